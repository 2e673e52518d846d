"""Single time-scale distributed observer and the inner-consensus-loop baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .topology import CavNetwork, build_shared_observation


@dataclass
class MessageCounter:
    rounds: int = 0
    messages: int = 0

    def exchange(self, edges: int, rounds: int = 1):
        self.rounds += rounds
        self.messages += rounds * edges


class ObserverBank:
    """Per-CAV estimates of the full HDV state.

    Each step is one synchronous round: every CAV sends its previous
    a-posteriori estimate together with its raw measurement to its
    out-neighbours, then all CAVs predict and innovate.
    """

    def __init__(self, network: CavNetwork, A: np.ndarray, K_blocks: Sequence[np.ndarray],
                 C_rows: Sequence[np.ndarray], x0: np.ndarray | None = None):
        self.network = network
        self.W = network.W
        self.A = np.asarray(A, dtype=float)
        self.C_rows = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C_rows]
        self.n = network.n
        self.dim = self.A.shape[0]
        shared = build_shared_observation(self.C_rows, network.neighborhoods)
        self.D_C = shared.D_C
        self.Dbar_C = shared.Dbar_C
        self.D_blocks = np.stack([self.D_C[i * self.dim:(i + 1) * self.dim, i * self.dim:(i + 1) * self.dim]
                                  for i in range(self.n)])
        self.K_blocks = np.stack([np.asarray(k, dtype=float) for k in K_blocks])
        if self.K_blocks.shape != (self.n, self.dim, self.dim):
            raise ValueError(f"expected {self.n} gain blocks of size {self.dim}")
        self.estimates = np.zeros((self.n, self.dim)) if x0 is None else np.array(x0, dtype=float)
        self.prior = None
        self.counter = MessageCounter()

    def stack(self, measurements: Sequence[np.ndarray]) -> np.ndarray:
        if len(measurements) != self.n:
            raise ValueError("one measurement vector per CAV required")
        return np.concatenate([np.atleast_1d(y) for y in measurements])

    def predict(self) -> np.ndarray:
        self.prior = self.W @ self.estimates @ self.A.T
        return self.prior

    def innovate(self, measurements: Sequence[np.ndarray]) -> np.ndarray:
        if self.prior is None:
            raise RuntimeError("predict must run before innovate")
        y = self.stack(measurements)
        shared = (self.Dbar_C @ y).reshape(self.n, self.dim)
        innov = shared - np.einsum("ijk,ik->ij", self.D_blocks, self.prior)
        self.estimates = self.prior + np.einsum("ijk,ik->ij", self.K_blocks, innov)
        self.prior = None
        return self.estimates

    def step(self, measurements: Sequence[np.ndarray]) -> np.ndarray:
        self.counter.exchange(self.network.edge_count)
        self.predict()
        return self.innovate(measurements)

    def residuals(self, measurements: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [residual(self.estimates[i], measurements[i], self.C_rows[i]) for i in range(self.n)]


def residual(estimate: np.ndarray, measurement: np.ndarray, C_i: np.ndarray) -> np.ndarray:
    return np.abs(np.atleast_1d(measurement) - np.atleast_2d(C_i) @ estimate)


def error_dynamics_check(truth: np.ndarray, estimates: np.ndarray, A: np.ndarray, A_hat: np.ndarray,
                         K: np.ndarray, D_C: np.ndarray, Dbar_C: np.ndarray,
                         measurement_noise: np.ndarray) -> float:
    """Max over k of ||e_k - A_hat e_{k-1} - eta_k||_inf.

    ``truth`` is (steps+1, dim) including the initial state, ``estimates`` is
    (steps+1, n, dim) including the initial estimates and
    ``measurement_noise`` is (steps, L) holding noise plus any fault, so the
    fault is folded into eta.  The process noise is recovered as
    x_k - A x_{k-1}, which covers the HDV model mismatch as well.
    """
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if measurement_noise is None:
        raise ValueError("recorded measurement noise required")
    steps = truth.shape[0] - 1
    n = estimates.shape[1]
    errors = (truth[:, None, :] - estimates).reshape(steps + 1, -1)
    nu = truth[1:] - truth[:-1] @ A.T
    I_KD = np.eye(K.shape[0]) - K @ D_C
    eta = np.tile(nu, (1, n)) @ I_KD.T - np.asarray(measurement_noise) @ (K @ Dbar_C).T
    defect = errors[1:] - errors[:-1] @ A_hat.T - eta
    return float(np.max(np.abs(defect))) if steps else 0.0


class BaselineBank:
    """Multi time-scale baseline: own-measurement innovation, then L consensus sweeps.

    The innovation of CAV j is scaled by 1/pi_j (pi the stationary vector of
    W) so that after the averaging sweeps each measured coordinate receives
    roughly the nominal gain.
    """

    def __init__(self, network: CavNetwork, A: np.ndarray, C_rows: Sequence[np.ndarray],
                 channel_gains: Sequence[float], L: int, m: int = 2, x0: np.ndarray | None = None):
        if L < 1:
            raise ValueError("L must be at least 1")
        self.network = network
        self.W = network.W
        self.A = np.asarray(A, dtype=float)
        self.C_rows = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C_rows]
        self.n = network.n
        self.dim = self.A.shape[0]
        self.L = int(L)
        pi = stationary_distribution(self.W)
        blocks = []
        for j, C in enumerate(self.C_rows):
            coords = np.argmax(C, axis=1)
            g = np.array([channel_gains[c % m] for c in coords])
            blocks.append(C.T @ np.diag(g / pi[j]) @ C)
        self.K_blocks = np.stack(blocks)
        self.WL = np.linalg.matrix_power(self.W, self.L)
        self.estimates = np.zeros((self.n, self.dim)) if x0 is None else np.array(x0, dtype=float)
        self.counter = MessageCounter()

    def step(self, measurements: Sequence[np.ndarray]) -> np.ndarray:
        prior = self.estimates @ self.A.T
        post = np.empty_like(prior)
        for i, C in enumerate(self.C_rows):
            innov = np.atleast_1d(measurements[i]) - C @ prior[i]
            post[i] = prior[i] + self.K_blocks[i] @ (C.T @ innov)
        self.estimates = baseline_inner_loop(post, self.W, self.L, self.counter, self.network.edge_count)
        return self.estimates

    def closed_loop(self) -> np.ndarray:
        blocks = [np.eye(self.dim) - self.K_blocks[i] @ C.T @ C for i, C in enumerate(self.C_rows)]
        return np.kron(self.WL, np.eye(self.dim)) @ block_diag(*blocks) @ np.kron(np.eye(self.n), self.A)


def baseline_inner_loop(estimates: np.ndarray, W: np.ndarray, L: int, counter: MessageCounter | None = None,
                        edges: int = 0) -> np.ndarray:
    """L synchronous consensus sweeps of the estimates over W."""
    if L < 1:
        raise ValueError("L must be at least 1")
    x = np.asarray(estimates, dtype=float)
    for _ in range(L):
        x = W @ x
    if counter is not None:
        counter.exchange(edges, rounds=L)
    return x


def stationary_distribution(W: np.ndarray) -> np.ndarray:
    """Left Perron vector of a row-stochastic matrix, normalised to sum 1."""
    vals, vecs = np.linalg.eig(W.T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, k])
    pi = pi / pi.sum()
    return np.clip(pi, 1e-12, None)
