"""Exact solver for small balanced transportation problems.

Classic transportation simplex (MODI): northwest-corner starting basis, then
pivots chosen by Bland's smallest-index rule, which makes the solver fully
deterministic and immune to cycling. Forbidden cells are excluded with an
internal big-M cost; the returned flows are checked to carry exactly zero
there.

Intended as a ground-truth oracle for test-scale problems, hence the hard
size cap in `exact_solve_oracle`.
"""

from __future__ import annotations

import numpy as np

from .errors import OracleTooLarge

_RC_TOL = 1e-11  # reduced-cost threshold for optimality
_MAX_PIVOTS = 100_000

ORACLE_DIM_CAP = 16


def _northwest_corner(supply: np.ndarray, demand: np.ndarray):
    """Initial basic feasible solution; returns (flows, basic cell list)."""
    n_rows, n_cols = len(supply), len(demand)
    flows = np.zeros((n_rows, n_cols))
    basic: list[tuple[int, int]] = []
    rem_a = supply.astype(float).copy()
    rem_b = demand.astype(float).copy()
    i = j = 0
    while True:
        f = min(rem_a[i], rem_b[j])
        flows[i, j] = f
        basic.append((i, j))
        rem_a[i] -= f
        rem_b[j] -= f
        if i == n_rows - 1 and j == n_cols - 1:
            break
        if rem_a[i] <= 0 and i < n_rows - 1:
            i += 1
        elif j < n_cols - 1:
            j += 1
        else:
            i += 1
    return flows, basic


def _potentials(basic, cost, n_rows, n_cols):
    """Solve u_i + v_j = c_ij on the basis tree (u[0] anchored at 0)."""
    row_adj: list[list[tuple[int, int]]] = [[] for _ in range(n_rows)]
    col_adj: list[list[tuple[int, int]]] = [[] for _ in range(n_cols)]
    for i, j in basic:
        row_adj[i].append((j, 1))
        col_adj[j].append((i, 0))
    u = np.full(n_rows, np.nan)
    v = np.full(n_cols, np.nan)
    u[0] = 0.0
    stack = [(0, 0)]  # (node index, 0 = row / 1 = col)
    while stack:
        node, kind = stack.pop()
        if kind == 0:
            for j, _ in row_adj[node]:
                if np.isnan(v[j]):
                    v[j] = cost[node, j] - u[node]
                    stack.append((j, 1))
        else:
            for i, _ in col_adj[node]:
                if np.isnan(u[i]):
                    u[i] = cost[i, node] - v[node]
                    stack.append((i, 0))
    return u, v


def _tree_path(basic, start_row, end_col, n_rows, n_cols):
    """Cell path in the basis tree from row node `start_row` to col node `end_col`."""
    adj: dict[tuple[int, int], list[tuple[tuple[int, int], tuple[int, int]]]] = {}
    for i, j in basic:
        adj.setdefault((0, i), []).append(((1, j), (i, j)))
        adj.setdefault((1, j), []).append(((0, i), (i, j)))
    target = (1, end_col)
    prev: dict[tuple[int, int], tuple[tuple[int, int], tuple[int, int]]] = {}
    frontier = [(0, start_row)]
    seen = {(0, start_row)}
    while frontier:
        nxt = []
        for node in frontier:
            for other, cell in adj.get(node, ()):
                if other in seen:
                    continue
                seen.add(other)
                prev[other] = (node, cell)
                nxt.append(other)
        if target in seen:
            break
        frontier = nxt
    path = []
    node = target
    while node != (0, start_row):
        node, cell = prev[node]
        path.append(cell)
    path.reverse()
    return path


def solve_transportation(
    cost: np.ndarray,
    supply: np.ndarray,
    demand: np.ndarray,
    forbidden: list[tuple[int, int]] | None = None,
) -> tuple[np.ndarray, int]:
    """Minimize sum(c*x) with row sums == supply, col sums == demand, x >= 0.

    Returns (flows, pivot count). `forbidden` cells are guaranteed zero flow
    provided a feasible solution avoiding them exists.
    """
    cost = np.asarray(cost, dtype=np.float64)
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(1.0, supply.sum()):
        raise ValueError("transportation problem is not balanced")

    work = cost.copy()
    if forbidden:
        big = (1.0 + float(np.abs(cost).max(initial=0.0))) * (1.0 + float(supply.sum()))
        for i, j in forbidden:
            work[i, j] = big

    flows, basic = _northwest_corner(supply, demand)
    basic_set = set(basic)

    for pivot in range(_MAX_PIVOTS):
        u, v = _potentials(basic, work, n_rows, n_cols)
        entering = None
        for i in range(n_rows):  # Bland: first improving cell in row-major order
            for j in range(n_cols):
                if (i, j) in basic_set:
                    continue
                if work[i, j] - u[i] - v[j] < -_RC_TOL:
                    entering = (i, j)
                    break
            if entering:
                break
        if entering is None:
            if forbidden:
                for i, j in forbidden:
                    flows[i, j] = 0.0  # kill any degenerate-basis fp residue
            np.clip(flows, 0.0, None, out=flows)
            return flows, pivot

        path = _tree_path(basic, entering[0], entering[1], n_rows, n_cols)
        minus_cells = path[0::2]  # alternate -,+ along the path from the entering row
        plus_cells = path[1::2]
        theta = min(flows[c] for c in minus_cells)
        leaving = min(c for c in minus_cells if flows[c] == theta)

        flows[entering] += theta
        for c in plus_cells:
            flows[c] += theta
        for c in minus_cells:
            flows[c] -= theta
        flows[leaving] = 0.0
        basic_set.remove(leaving)
        basic_set.add(entering)
        basic = sorted(basic_set)

    raise RuntimeError("transportation simplex failed to terminate")
