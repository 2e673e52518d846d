"""CAV communication graphs, consensus weights and distributed observability."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .matstat import RngStream

MAX_ER_ATTEMPTS = 1000


@dataclass(frozen=True)
class CavNetwork:
    """Directed CAV graph.  ``adjacency[i, j] = 1`` means CAV i receives from CAV j."""

    adjacency: np.ndarray
    W: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def neighborhoods(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.adjacency]

    @property
    def edge_count(self) -> int:
        """Directed links, self-loops excluded."""
        return int(self.adjacency.sum() - np.trace(self.adjacency))


def _check_adjacency(adjacency) -> np.ndarray:
    adj = np.asarray(adjacency)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    adj = (adj != 0).astype(int)
    return adj


def with_self_loops(adjacency) -> np.ndarray:
    adj = _check_adjacency(adjacency).copy()
    np.fill_diagonal(adj, 1)
    return adj


def build_consensus_matrix(adjacency, rule: str = "uniform", weights=None) -> np.ndarray:
    """Row-stochastic consensus matrix supported on ``adjacency`` (self-loops required)."""
    adj = _check_adjacency(adjacency)
    if np.any(np.diag(adj) == 0):
        raise ValueError("adjacency must include self-loops")
    n = adj.shape[0]
    if rule == "uniform":
        return adj / adj.sum(axis=1, keepdims=True)
    if rule == "metropolis_hastings":
        und = ((adj + adj.T) > 0).astype(int)
        deg = und.sum(axis=1) - 1
        W = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j and und[i, j]:
                    W[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
            W[i, i] = 1.0 - W[i].sum()
        return W
    if rule == "given":
        if weights is None:
            raise ValueError("rule 'given' needs explicit weights")
        W = np.asarray(weights, dtype=float)
        if W.shape != adj.shape:
            raise ValueError("weights shape does not match adjacency")
        if np.any(W < 0) or np.any((W > 0) & (adj == 0)):
            raise ValueError("weights must be non-negative and follow the adjacency pattern")
        if not np.allclose(W.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("weights must be row-stochastic")
        return W
    raise ValueError(f"unknown consensus rule {rule!r}")


def make_network(adjacency, rule: str = "uniform", weights=None) -> CavNetwork:
    adj = with_self_loops(adjacency)
    return CavNetwork(adj, build_consensus_matrix(adj, rule, weights))


def strongly_connected_components(adjacency) -> list[list[int]]:
    """Tarjan's algorithm, iterative.  Edges follow ``adjacency[i, j] != 0`` as i -> j."""
    adj = _check_adjacency(adjacency)
    n = adj.shape[0]
    succ = [np.flatnonzero(adj[i]).tolist() for i in range(n)]
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] >= 0:
            continue
        work = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            v, pos = work[-1]
            if pos < len(succ[v]):
                work[-1] = (v, pos + 1)
                w = succ[v][pos]
                if index[w] < 0:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, 0))
                elif on_stack[w]:
                    low[v] = min(low[v], index[w])
            else:
                work.pop()
                if work:
                    u = work[-1][0]
                    low[u] = min(low[u], low[v])
                if low[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack[w] = False
                        comp.append(w)
                        if w == v:
                            break
                    comps.append(sorted(comp))
    return comps


def is_strongly_connected(adjacency) -> bool:
    adj = _check_adjacency(adjacency)
    if adj.shape[0] == 0:
        return False
    return len(strongly_connected_components(adj)) == 1


def bfs_diameter(adjacency) -> int | None:
    """Longest shortest directed path; ``None`` if some node is unreachable."""
    adj = _check_adjacency(adjacency)
    n = adj.shape[0]
    succ = [np.flatnonzero(adj[i]) for i in range(n)]
    diameter = 0
    for s in range(n):
        dist = [-1] * n
        dist[s] = 0
        q = deque([s])
        while q:
            v = q.popleft()
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    q.append(w)
        if min(dist) < 0:
            return None
        diameter = max(diameter, max(dist))
    return diameter


def erdos_renyi(n: int, p: float, rng: RngStream, require_strong: bool = True,
                max_attempts: int = MAX_ER_ATTEMPTS, rule: str = "uniform") -> CavNetwork:
    if not 0.0 <= p <= 1.0:
        raise ValueError("link probability must lie in [0, 1]")
    for _ in range(max_attempts):
        adj = (rng.uniform((n, n)) < p).astype(int)
        np.fill_diagonal(adj, 1)
        if not require_strong or is_strongly_connected(adj):
            return make_network(adj, rule)
    raise RuntimeError(f"no strongly connected Erdos-Renyi graph after {max_attempts} attempts")


def cycle_adjacency(n: int, bidirectional: bool = True) -> np.ndarray:
    adj = np.eye(n, dtype=int)
    for i in range(n):
        adj[i, (i + 1) % n] = 1
        if bidirectional:
            adj[i, (i - 1) % n] = 1
    return adj


@dataclass(frozen=True)
class SharedObservation:
    D_C: np.ndarray  # (n*Nm, n*Nm) block diagonal
    Dbar_C: np.ndarray  # (n*Nm, L) maps stacked measurements to per-CAV innovations


def build_shared_observation(C_rows: Sequence[np.ndarray], neighborhoods: Sequence[Sequence[int]]
                             ) -> SharedObservation:
    """Assemble D_C and the stacked-measurement operator Dbar_C.

    Block (i, j) of Dbar_C is C_j^T when j is in N(i), which is exactly how
    the innovation step consumes neighbour measurements.
    """
    C_rows = [np.atleast_2d(np.asarray(c, dtype=float)) for c in C_rows]
    n = len(C_rows)
    if len(neighborhoods) != n:
        raise ValueError("one neighbourhood per CAV required")
    dim = C_rows[0].shape[1]
    if any(c.shape[1] != dim for c in C_rows):
        raise ValueError("selector widths differ")
    offsets = np.cumsum([0] + [c.shape[0] for c in C_rows])
    D_C = np.zeros((n * dim, n * dim))
    Dbar = np.zeros((n * dim, offsets[-1]))
    for i, nb in enumerate(neighborhoods):
        rows = slice(i * dim, (i + 1) * dim)
        for j in nb:
            D_C[rows, rows] += C_rows[j].T @ C_rows[j]
            Dbar[rows, offsets[j]:offsets[j + 1]] = C_rows[j].T
    return SharedObservation(D_C, Dbar)


def observability_rank(M: np.ndarray, H: np.ndarray, rel_tol: float = 1e-12) -> int:
    """Rank of [H; H M; H M^2; ...], stacking until the rank saturates.

    When H is square, the pair is first split into the independent diagonal
    blocks of the joint sparsity pattern (for W kron A with block-diagonal A
    these are the per-HDV subsystems); the rank is the sum over blocks.
    """
    M = np.asarray(M, dtype=float)
    H = np.asarray(H, dtype=float)
    if H.shape == M.shape:
        pattern = (M != 0) | (H != 0) | (H.T != 0)
        n_comp, labels = connected_components(pattern, directed=False)
        if n_comp > 1:
            total = 0
            for c in range(n_comp):
                idx = np.flatnonzero(labels == c)
                total += _stacked_rank(M[np.ix_(idx, idx)], H[np.ix_(idx, idx)], rel_tol)
            return total
    return _stacked_rank(M, H, rel_tol)


def _stacked_rank(M: np.ndarray, H: np.ndarray, rel_tol: float) -> int:
    """The stack is kept compressed as the R factor of a running QR so memory
    stays O(dim^2); singular values of R equal those of the stack."""
    dim = M.shape[0]
    block = H.copy()
    R = np.linalg.qr(block, mode="r")
    rank = _rank(R, dim, rel_tol)
    for _ in range(dim - 1):
        if rank == dim:
            break
        block = block @ M
        R = np.linalg.qr(np.vstack([R, block]), mode="r")
        new_rank = _rank(R, dim, rel_tol)
        if new_rank == rank:
            break
        rank = new_rank
    return rank


def _rank(R: np.ndarray, dim: int, rel_tol: float) -> int:
    s = np.linalg.svd(R, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * dim * rel_tol))


def check_distributed_observability(W, A, D_C) -> dict:
    W = np.asarray(W, dtype=float)
    A = np.asarray(A, dtype=float)
    D_C = np.asarray(D_C, dtype=float)
    dim = W.shape[0] * A.shape[0]
    if D_C.shape != (dim, dim):
        raise ValueError(f"D_C has shape {D_C.shape}, expected {(dim, dim)}")
    rank = observability_rank(np.kron(W, A), D_C)
    return {"observable": rank == dim, "rank": rank, "dim": dim}


def to_adjacency_json(adjacency) -> str:
    """Adjacency list keyed by node id; lists are out-neighbours (self-loops omitted)."""
    adj = _check_adjacency(adjacency)
    n = adj.shape[0]
    # i receives from j  <=>  j -> i, so out-neighbours of j are the rows i with adj[i, j]
    out = {str(j): [int(i) for i in range(n) if i != j and adj[i, j]] for j in range(n)}
    return json.dumps({"n": n, "out_neighbors": out}, sort_keys=True)


def from_adjacency_json(text: str) -> np.ndarray:
    doc = json.loads(text)
    n = int(doc["n"])
    adj = np.eye(n, dtype=int)
    for j, outs in doc["out_neighbors"].items():
        j = int(j)
        for i in outs:
            if not 0 <= int(i) < n or not 0 <= j < n:
                raise ValueError(f"node id out of range in edge {j}->{i}")
            adj[int(i), j] = 1
    return adj
