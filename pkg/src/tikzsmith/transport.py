"""Exact solver for the uniform-marginal transportation problem.

Minimizes <F, D> over flow matrices F >= 0 whose rows each sum to 1/m and
whose columns each sum to 1/n. Solved with the transportation simplex
(north-west-corner start, MODI pricing) using Bland's rule, which terminates
even on the heavily degenerate square instances uniform marginals produce.
An entropic (Sinkhorn) fallback covers patch counts too large for the exact
method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TransportSolveError

# Above this many cells the exact pivot loop is no longer worth it.
EXACT_CELL_LIMIT = 4096

SINKHORN_EPSILON = 1e-2
SINKHORN_TOL = 1e-7
SINKHORN_MAX_ITERS = 100_000


@dataclass
class TransportPlan:
    flow: np.ndarray
    cost: float
    iterations: int
    method: str


def _check_feasible(flow: np.ndarray, tol: float = 1e-8) -> tuple[float, float]:
    m, n = flow.shape
    row_res = float(np.max(np.abs(flow.sum(axis=1) - 1.0 / m)))
    col_res = float(np.max(np.abs(flow.sum(axis=0) - 1.0 / n)))
    if row_res > tol or col_res > tol or (flow < -tol).any():
        raise TransportSolveError(
            "flow violates transportation constraints",
            row_residual=row_res,
            col_residual=col_res,
        )
    return row_res, col_res


def solve_transport_exact(distances: np.ndarray, *, tol: float = 1e-12) -> TransportPlan:
    D = np.asarray(distances, dtype=float)
    if D.ndim != 2 or D.size == 0:
        raise ValueError("distance matrix must be a non-empty 2-d array")
    if not np.isfinite(D).all():
        raise ValueError("distance matrix must be finite")
    m, n = D.shape

    flow = np.zeros((m, n))
    basis: list[tuple[int, int]] = []
    supply = np.full(m, 1.0 / m)
    demand = np.full(n, 1.0 / n)
    i = j = 0
    while True:
        amount = min(supply[i], demand[j])
        flow[i, j] = amount
        basis.append((i, j))
        supply[i] -= amount
        demand[j] -= amount
        if i == m - 1 and j == n - 1:
            break
        # On degenerate ties move down, adding a zero-valued basic cell next;
        # this keeps the basis a spanning tree of size m + n - 1.
        if supply[i] <= demand[j] and i < m - 1:
            i += 1
        else:
            j += 1
    assert len(basis) == m + n - 1

    max_pivots = 1000 * (m + n) * max(m, n) + 1000
    pivots = 0
    while True:
        if pivots > max_pivots:
            raise TransportSolveError("pivot limit exceeded")
        u = np.full(m, np.nan)
        v = np.full(n, np.nan)
        rows_adj: dict[int, list[int]] = {}
        cols_adj: dict[int, list[int]] = {}
        for bi, bj in basis:
            rows_adj.setdefault(bi, []).append(bj)
            cols_adj.setdefault(bj, []).append(bi)
        u[0] = 0.0
        stack: list[tuple[str, int]] = [("r", 0)]
        while stack:
            kind, idx = stack.pop()
            if kind == "r":
                for bj in rows_adj.get(idx, []):
                    if np.isnan(v[bj]):
                        v[bj] = D[idx, bj] - u[idx]
                        stack.append(("c", bj))
            else:
                for bi in cols_adj.get(idx, []):
                    if np.isnan(u[bi]):
                        u[bi] = D[bi, idx] - v[idx]
                        stack.append(("r", bi))
        if np.isnan(u).any() or np.isnan(v).any():
            raise TransportSolveError("basis is not a spanning tree")

        reduced = D - u[:, None] - v[None, :]
        basis_set = set(basis)
        entering = None
        for ei in range(m):
            for ej in np.flatnonzero(reduced[ei] < -tol):
                if (ei, int(ej)) not in basis_set:
                    entering = (ei, int(ej))
                    break
            if entering is not None:
                break
        if entering is None:
            break

        adjacency: dict[tuple[str, int], list[tuple[str, int]]] = {}
        for bi, bj in basis:
            adjacency.setdefault(("r", bi), []).append(("c", bj))
            adjacency.setdefault(("c", bj), []).append(("r", bi))
        start, goal = ("r", entering[0]), ("c", entering[1])
        prev: dict[tuple[str, int], tuple[str, int] | None] = {start: None}
        frontier = [start]
        while frontier:
            nd = frontier.pop()
            if nd == goal:
                break
            for nb in adjacency.get(nd, []):
                if nb not in prev:
                    prev[nb] = nd
                    frontier.append(nb)
        if goal not in prev:
            raise TransportSolveError("no cycle path found for entering cell")
        path = []
        nd: tuple[str, int] | None = goal
        while nd is not None:
            path.append(nd)
            nd = prev[nd]
        path.reverse()

        cycle = [entering]
        for k in range(len(path) - 1):
            a, b = path[k], path[k + 1]
            cell = (a[1], b[1]) if a[0] == "r" else (b[1], a[1])
            cycle.append(cell)
        minus_cells = cycle[1::2]
        theta = min(flow[c] for c in minus_cells)
        leaving = min(c for c in minus_cells if flow[c] <= theta + 1e-15)
        for k, cell in enumerate(cycle):
            flow[cell] += theta if k % 2 == 0 else -theta
        flow[leaving] = 0.0
        basis.remove(leaving)
        basis.append(entering)
        pivots += 1

    flow = np.maximum(flow, 0.0)
    _check_feasible(flow)
    return TransportPlan(flow=flow, cost=float((flow * D).sum()), iterations=pivots, method="exact")


def solve_transport_sinkhorn(
    distances: np.ndarray,
    *,
    epsilon: float = SINKHORN_EPSILON,
    tol: float = SINKHORN_TOL,
    max_iters: int = SINKHORN_MAX_ITERS,
) -> TransportPlan:
    """Entropic-regularized approximation in log space.

    ``epsilon`` is the regularization strength; iteration stops when both
    marginal residuals fall below ``tol``.
    """
    D = np.asarray(distances, dtype=float)
    m, n = D.shape
    a = np.full(m, 1.0 / m)
    b = np.full(n, 1.0 / n)
    f = np.zeros(m)
    g = np.zeros(n)
    it = 0
    for it in range(1, max_iters + 1):
        M = (-D + f[:, None] + g[None, :]) / epsilon
        f = f + epsilon * (np.log(a) - _logsumexp_rows(M))
        M = (-D + f[:, None] + g[None, :]) / epsilon
        g = g + epsilon * (np.log(b) - _logsumexp_rows(M.T))
        M = (-D + f[:, None] + g[None, :]) / epsilon
        flow = np.exp(M)
        row_res = np.max(np.abs(flow.sum(axis=1) - a))
        col_res = np.max(np.abs(flow.sum(axis=0) - b))
        if row_res < tol and col_res < tol:
            break
    else:
        raise TransportSolveError(
            "sinkhorn did not converge",
            row_residual=float(row_res),
            col_residual=float(col_res),
        )
    return TransportPlan(flow=flow, cost=float((flow * D).sum()), iterations=it, method="sinkhorn")


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(axis=1, keepdims=True))).ravel()


def solve_transport(distances: np.ndarray, *, exact_cell_limit: int = EXACT_CELL_LIMIT) -> TransportPlan:
    D = np.asarray(distances, dtype=float)
    if D.ndim != 2 or D.size == 0:
        raise ValueError("distance matrix must be a non-empty 2-d array")
    if D.size <= exact_cell_limit:
        return solve_transport_exact(D)
    return solve_transport_sinkhorn(D)
