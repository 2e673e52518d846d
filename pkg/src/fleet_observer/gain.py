"""Block-diagonal observer gain synthesis and the steady-state variance bound.

The gain family is diagonal per CAV block: CAV i applies scalar gain
``g[c]`` to every coordinate measured inside its neighbourhood, where ``c`` is
the coordinate's channel kind (position, velocity, ...).  A candidate is
accepted only with both certificates: Schur stability of the closed loop and
the isolation-ratio bound.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag
from scipy.sparse.csgraph import connected_components

from .matstat import spectral_radius, two_norm
from .topology import build_shared_observation, check_distributed_observability

_DEGENERATE = 1e-12
# eigenvalues near the unit circle are only accurate to about 1e-9 here, so a
# candidate needs this much margin before it counts as Schur stable
STABILITY_MARGIN = 1e-9
# spectral radii closer than this are ties, resolved toward the smaller gain
_TIE = 1e-9
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class GainSynthesisError(RuntimeError):
    pass


class DegenerateGainError(ValueError):
    pass


@dataclass
class GainDesign:
    K_blocks: list[np.ndarray]
    epsilon: float
    A_hat: np.ndarray
    beta: float
    rho: float
    ratio: float
    channel_gains: list[float] = field(default_factory=list)

    @property
    def K(self) -> np.ndarray:
        return block_diag(*self.K_blocks)

    def to_json(self) -> str:
        return json.dumps({
            "K_blocks": [b.tolist() for b in self.K_blocks],
            "epsilon": self.epsilon,
            "beta": self.beta,
            "rho": self.rho,
            "ratio": self.ratio,
            "channel_gains": list(self.channel_gains),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, W, A, D_C) -> "GainDesign":
        doc = json.loads(text)
        blocks = [np.asarray(b, dtype=float) for b in doc["K_blocks"]]
        A_hat = closed_loop(W, A, block_diag(*blocks), D_C)
        return cls(blocks, doc["epsilon"], A_hat, two_norm(A_hat), spectral_radius(A_hat),
                   doc["ratio"], doc.get("channel_gains", []))


def decoupled_blocks(pattern: np.ndarray) -> list[np.ndarray]:
    """Index sets of the independent diagonal blocks of a matrix with sparsity ``pattern``.

    A symmetric permutation that makes the matrix block diagonal leaves its
    spectrum unchanged, so eigenvalues and 2-norms can be taken per block.
    """
    n_comp, labels = connected_components(np.asarray(pattern) != 0, directed=False)
    return [np.flatnonzero(labels == c) for c in range(n_comp)]


def blockwise_radius(M: np.ndarray, blocks: Sequence[np.ndarray]) -> float:
    return max(spectral_radius(M[np.ix_(b, b)]) for b in blocks)


def blockwise_norm(M: np.ndarray, blocks: Sequence[np.ndarray]) -> float:
    return max(two_norm(M[np.ix_(b, b)]) for b in blocks)


def closed_loop(W, A, K, D_C) -> np.ndarray:
    WA = np.kron(np.asarray(W, dtype=float), np.asarray(A, dtype=float))
    K = np.asarray(K, dtype=float)
    D_C = np.asarray(D_C, dtype=float)
    if K.shape != WA.shape or D_C.shape != WA.shape:
        raise ValueError(f"K {K.shape} and D_C {D_C.shape} must match W kron A {WA.shape}")
    return WA - K @ D_C @ WA


def isolation_ratio(K_blocks: Sequence[np.ndarray], C_rows: Sequence[np.ndarray],
                    neighborhoods: Sequence[Sequence[int]]) -> float:
    """Largest |C_i K_i C_j^T| / |C_j K_j C_j^T - 1| over i != j, j in N(i).

    For multi-channel sensors the ratio is evaluated per channel pair.
    """
    worst = 0.0
    for i, nb in enumerate(neighborhoods):
        for j in nb:
            if j == i:
                continue
            cross = np.abs(C_rows[i] @ K_blocks[i] @ C_rows[j].T)
            own = np.abs(np.diag(C_rows[j] @ K_blocks[j] @ C_rows[j].T) - 1.0)
            if np.any(own < _DEGENERATE):
                raise DegenerateGainError(f"C_j K_j C_j^T = 1 at CAV {j}")
            worst = max(worst, float(np.max(cross / own[None, :])))
    return worst


def _channel_masks(C_rows, neighborhoods, m: int) -> list[list[np.ndarray]]:
    """Per CAV, per channel kind: 0/1 diagonal of coordinates measured inside N(i)."""
    dim = C_rows[0].shape[1]
    masks = []
    for nb in neighborhoods:
        measured = np.zeros(dim)
        for j in nb:
            measured += C_rows[j].sum(axis=0)
        measured = (measured > 0).astype(float)
        kinds = []
        for c in range(m):
            sel = np.zeros(dim)
            sel[c::m] = 1.0
            kinds.append(measured * sel)
        masks.append(kinds)
    return masks


def diagonal_gain_blocks(gains: Sequence[float], masks) -> list[np.ndarray]:
    blocks = []
    for kinds in masks:
        d = sum(g * mk for g, mk in zip(gains, kinds))
        blocks.append(np.diag(d))
    return blocks


@dataclass
class SearchFamily:
    """Box of per-channel-kind gains, searched on a grid then refined.

    ``shared`` ties all channel kinds to one scalar.  ``bounds`` holds one
    (low, high) pair per channel kind (or a single pair when shared).
    """

    bounds: list[tuple[float, float]] = field(default_factory=lambda: [(0.05, 1.0)])
    grid_points: int = 12
    shared: bool = True
    refine_iters: int = 30

    @classmethod
    def from_dict(cls, d: dict | None) -> "SearchFamily":
        if not d:
            return cls()
        return cls(bounds=[tuple(map(float, b)) for b in d.get("bounds", [(0.05, 1.0)])],
                   grid_points=int(d.get("grid_points", 12)),
                   shared=bool(d.get("shared", len(d.get("bounds", [0])) == 1)),
                   refine_iters=int(d.get("refine_iters", 30)))


def synthesize_gain(W, A, C_rows, neighborhoods, epsilon: float, search: SearchFamily | None = None,
                    m: int = 2, check_observability: bool = True) -> GainDesign:
    """Pick the stabilizing gain of the family with the smallest spectral radius.

    Candidates failing the isolation bound or with a degenerate own-channel
    gain are discarded.  Raises :class:`GainSynthesisError` when nothing in the
    family is certified.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    search = search or SearchFamily()
    W = np.asarray(W, dtype=float)
    A = np.asarray(A, dtype=float)
    C_rows = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C_rows]
    shared = build_shared_observation(C_rows, neighborhoods)
    if check_observability:
        obs = check_distributed_observability(W, A, shared.D_C)
        if not obs["observable"]:
            raise GainSynthesisError(f"(W kron A, D_C) not observable: rank {obs['rank']} < {obs['dim']}")
    WA = np.kron(W, A)
    DWA = shared.D_C @ WA
    # every diagonal gain of the family is supported where D_C is, so one
    # decomposition of the closed-loop pattern serves all candidates
    blocks_idx = decoupled_blocks(np.abs(WA) + np.abs(DWA))
    masks = _channel_masks(C_rows, neighborhoods, m)
    n_par = 1 if search.shared else m
    bounds = list(search.bounds)
    if len(bounds) == 1:
        bounds = bounds * n_par
    if len(bounds) != n_par:
        raise ValueError(f"search family needs {n_par} bound pairs")

    cache: dict[tuple, tuple[float, float | None, list]] = {}

    def evaluate(params: tuple) -> float:
        key = tuple(round(p, 15) for p in params)
        if key in cache:
            return cache[key][0]
        gains = list(params) * m if search.shared else list(params)
        blocks = diagonal_gain_blocks(gains, masks)
        try:
            ratio = isolation_ratio(blocks, C_rows, neighborhoods)
        except DegenerateGainError:
            cache[key] = (math.inf, None, blocks)
            return math.inf
        if ratio > epsilon:
            cache[key] = (math.inf, ratio, blocks)
            return math.inf
        kd = np.concatenate([np.diag(b) for b in blocks])
        A_hat = WA - kd[:, None] * DWA
        rho = blockwise_radius(A_hat, blocks_idx)
        cache[key] = (rho, ratio, blocks)
        return rho

    axes = [np.linspace(lo, hi, search.grid_points) if search.grid_points > 1 else np.array([hi])
            for lo, hi in bounds]
    best, best_val = None, math.inf
    for point in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n_par):
        val = evaluate(tuple(float(v) for v in point))
        # strict improvement keeps the first (smallest-gain) candidate on ties
        if val < best_val - _TIE:
            best, best_val = tuple(float(v) for v in point), val
    if best is None or not best_val < 1.0 - STABILITY_MARGIN:
        raise GainSynthesisError("no stabilizing gain in the search family")

    # coordinate-wise golden-section refinement around the grid optimum
    best = list(best)
    for d in range(n_par):
        lo, hi = bounds[d]
        step = (hi - lo) / max(search.grid_points - 1, 1)
        a, b = max(lo, best[d] - step), min(hi, best[d] + step)
        if b - a <= 0:
            continue

        def f(t, d=d):
            p = list(best)
            p[d] = t
            return evaluate(tuple(p))

        x1, x2 = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
        f1, f2 = f(x1), f(x2)
        for _ in range(search.refine_iters):
            if f1 <= f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - _GOLDEN * (b - a)
                f1 = f(x1)
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + _GOLDEN * (b - a)
                f2 = f(x2)
        cand = x1 if f1 <= f2 else x2
        if f(cand) < f(best[d]) - _TIE:
            best[d] = cand

    rho, ratio, blocks = cache[tuple(round(p, 15) for p in best)]
    A_hat = WA - np.concatenate([np.diag(b) for b in blocks])[:, None] * DWA
    gains = best * m if search.shared else best
    return GainDesign(blocks, float(epsilon), A_hat, blockwise_norm(A_hat, blocks_idx), float(rho), float(ratio),
                      [float(g) for g in gains])


def fixed_gain(W, A, C_rows, neighborhoods, gains: Sequence[float], epsilon: float, m: int = 2
               ) -> GainDesign:
    """Certify a given per-channel gain without searching."""
    fam = SearchFamily(bounds=[(g, g) for g in gains], grid_points=1, shared=False, refine_iters=0)
    return synthesize_gain(W, A, C_rows, neighborhoods, epsilon, fam, m=m)


@dataclass(frozen=True)
class BoundChain:
    Q_norm_bound: float
    alpha1: float
    alpha2: float
    Rbar_norm: float
    G_norm: float
    Theta: float
    Phi: list[np.ndarray]  # per CAV, one entry per measured channel
    c: float

    def phi(self, cav: int) -> np.ndarray:
        return self.Phi[cav]


def rbar_matrix(R_per_sensor: Sequence[np.ndarray], C_rows, neighborhoods) -> np.ndarray:
    blocks = []
    for nb in neighborhoods:
        blocks.append(sum(C_rows[j].T @ np.diag(np.atleast_1d(R_per_sensor[j])) @ C_rows[j]
                          for j in nb))
    return block_diag(*blocks)


def bound_chain(design: GainDesign, G, R_per_sensor, C_rows, neighborhoods, c: float = 1.0
                ) -> BoundChain:
    """Steady-state per-CAV error variance bound Theta and residual scale Phi = c*Theta + R."""
    if not design.beta < 1.0:
        raise ValueError(f"closed-loop 2-norm {design.beta:.4f} >= 1: variance bound is unbounded")
    n = len(C_rows)
    K = design.K
    C_rows = [np.atleast_2d(np.asarray(cr, dtype=float)) for cr in C_rows]
    D_C = build_shared_observation(C_rows, neighborhoods).D_C
    G_norm = two_norm(np.atleast_2d(G)) if np.size(G) else 0.0
    alpha1 = two_norm(np.eye(K.shape[0]) - K @ D_C) ** 2
    alpha2 = two_norm(K) ** 2
    Rbar_norm = two_norm(rbar_matrix(R_per_sensor, C_rows, neighborhoods))
    q_bound = alpha1 * n * G_norm + alpha2 * Rbar_norm
    theta = q_bound / (n * (1.0 - design.beta ** 2))
    phi = [c * theta + np.atleast_1d(np.asarray(r, dtype=float)) for r in R_per_sensor]
    return BoundChain(q_bound, alpha1, alpha2, Rbar_norm, G_norm, theta, phi, c)


def empirical_error_cov(errors: np.ndarray, window: slice | None = None) -> list[np.ndarray]:
    """Per-CAV sample covariance of the estimation error.

    ``errors`` has shape (steps, n, dim).
    """
    errors = np.asarray(errors, dtype=float)
    if window is not None:
        errors = errors[window]
    if errors.shape[0] < 50:
        raise ValueError("steady-state window shorter than 50 samples")
    return [np.atleast_2d(np.cov(errors[:, i, :], rowvar=False)) for i in range(errors.shape[1])]


def empirical_error_variance(errors: np.ndarray, window: slice | None = None) -> np.ndarray:
    """Largest eigenvalue of each per-CAV error covariance (comparable to Theta)."""
    return np.array([np.linalg.eigvalsh(P)[-1] for P in empirical_error_cov(errors, window)])
