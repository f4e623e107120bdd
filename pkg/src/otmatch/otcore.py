"""Partial optimal transport core.

Pipeline per episode: cosine costs between support nodes (suppliers) and
query nodes (demanders), then reduction of the absolute partial problem to a
balanced transportation problem by appending one dummy supplier and one dummy
demander, then an entropic log-domain Sinkhorn solve with feasibility
rounding. `exact_solve_oracle` provides a ground-truth solution for small
instances via the transportation simplex in `simplex.py`.

The dummy-to-dummy corner must never carry flow; it is excluded structurally
(masked kernel cell, no infinite cost sentinel ever enters exp/log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateFeature,
    InfeasibleFlow,
    InvalidShape,
    OracleTooLarge,
    ShapeMismatch,
)
from .simplex import ORACLE_DIM_CAP, solve_transportation
from .tensorio import FeatureGrid

FEASIBILITY_TOL = 1e-9


def _unit_normalize(nodes: np.ndarray, label: str) -> np.ndarray:
    norms = np.linalg.norm(nodes, axis=1)
    if np.any(norms == 0):
        bad = int(np.argmax(norms == 0))
        raise DegenerateFeature(f"{label} node {bad} has zero norm")
    return nodes / norms[:, None]


def cosine_cost_matrix(support: FeatureGrid, query: FeatureGrid) -> np.ndarray:
    """Cost c_ij = 1 - cos(s_i, d_j) for support node i, query node j.

    Nodes are flattened row-major; the result is clamped to [0, 2] against
    round-off and returned as float32 of shape (H_s*W_s, H_q*W_q).
    """
    if support.channels != query.channels:
        raise ShapeMismatch(
            f"channel mismatch: support {support.channels} vs query {query.channels}"
        )
    s = _unit_normalize(support.nodes().astype(np.float64), "support")
    d = _unit_normalize(query.nodes().astype(np.float64), "query")
    cost = 1.0 - s @ d.T
    np.clip(cost, 0.0, 2.0, out=cost)
    return cost.astype(np.float32)


@dataclass
class MarginalWeights:
    """Supplier/demander masses and the matched mass of a partial problem."""

    supply: np.ndarray
    demand: np.ndarray
    matched_mass: float

    def __post_init__(self):
        self.supply = np.asarray(self.supply, dtype=np.float64)
        self.demand = np.asarray(self.demand, dtype=np.float64)
        if self.supply.ndim != 1 or self.demand.ndim != 1:
            raise InvalidShape("supply and demand must be 1-d")
        if np.any(self.supply < 0) or np.any(self.demand < 0):
            raise InfeasibleFlow("masses must be nonnegative")
        limit = min(self.total_supply, self.total_demand)
        if not 0 < self.matched_mass <= limit + 1e-12:
            raise InfeasibleFlow(
                f"matched mass {self.matched_mass} outside (0, {limit}]"
            )

    @property
    def total_supply(self) -> float:
        return float(self.supply.sum())

    @property
    def total_demand(self) -> float:
        return float(self.demand.sum())


def unit_weights(m: int, k: int, matched_mass: float) -> MarginalWeights:
    """Unit mass per node, the convention used for feature-grid matching."""
    return MarginalWeights(np.ones(m), np.ones(k), matched_mass)


@dataclass
class BalancedProblem:
    """Balanced reduction of a partial problem via one dummy supplier/demander.

    cost is (m+1) x (k+1); row m and column k are the dummies with zero cost
    to every real node. The corner cell (m, k) is forbidden: its cost entry is
    stored as 0 but solvers must route no flow through it.
    """

    cost: np.ndarray
    supply: np.ndarray
    demand: np.ndarray
    m: int
    k: int
    matched_mass: float
    balanced_total: float

    @property
    def dummy_supply(self) -> float:
        return float(self.supply[self.m])

    @property
    def dummy_demand(self) -> float:
        return float(self.demand[self.k])

    def real_block(self, flows: np.ndarray) -> np.ndarray:
        return flows[: self.m, : self.k]


def build_partial_problem(weights: MarginalWeights, cost: np.ndarray) -> BalancedProblem:
    """Append dummy nodes so the partial problem becomes balanced.

    The dummy supplier provides total_demand - M, the dummy demander absorbs
    total_supply - M, and the balanced total is total_demand + total_supply - M.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, k = len(weights.supply), len(weights.demand)
    if cost.shape != (m, k):
        raise ShapeMismatch(f"cost is {cost.shape}, weights imply ({m}, {k})")
    if np.any(cost < 0) or not np.all(np.isfinite(cost)):
        raise InvalidShape("costs must be finite and nonnegative")
    w_s, w_d, mass = weights.total_supply, weights.total_demand, weights.matched_mass
    if mass > min(w_s, w_d) + 1e-12:
        raise InfeasibleFlow(f"matched mass {mass} exceeds min({w_s}, {w_d})")

    aug_cost = np.zeros((m + 1, k + 1))
    aug_cost[:m, :k] = cost
    supply = np.concatenate([weights.supply, [w_d - mass]])
    demand = np.concatenate([weights.demand, [w_s - mass]])
    return BalancedProblem(
        cost=aug_cost,
        supply=supply,
        demand=demand,
        m=m,
        k=k,
        matched_mass=mass,
        balanced_total=w_d + w_s - mass,
    )


@dataclass
class SinkhornConfig:
    """Entropic solver knobs.

    The regularizer starts at epsilon_scale * mean(real-block cost) and is
    halved anneal_steps times with warm-started potentials, so the final
    stage runs at epsilon_scale * mean / 2**anneal_steps. max_iters bounds
    the total iteration count across stages.
    """

    epsilon_scale: float = 0.05
    max_iters: int = 10000
    tolerance: float = 1e-5
    anneal_steps: int = 3

    def __post_init__(self):
        if self.epsilon_scale <= 0:
            raise ConfigError(f"epsilon_scale must be > 0, got {self.epsilon_scale}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0:
            raise ConfigError(f"tolerance must be > 0, got {self.tolerance}")
        if self.anneal_steps < 0:
            raise ConfigError(f"anneal_steps must be >= 0, got {self.anneal_steps}")


@dataclass
class TransportPlan:
    """Nonnegative flow matrix with achieved cost and marginal metadata."""

    flows: np.ndarray
    cost: float
    marginal_defect: float
    iterations: int = 0


def _logsumexp(values: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - peak), axis=axis)) + np.squeeze(peak, axis)
    return out


def _plan_from_potentials(phi, psi, logits):
    with np.errstate(invalid="ignore"):
        log_plan = phi[:, None] + psi[None, :] + logits
    return np.exp(np.where(np.isneginf(logits), -np.inf, log_plan))


def _marginal_defect(flows, supply, demand) -> float:
    row = np.abs(flows.sum(axis=1) - supply).max()
    col = np.abs(flows.sum(axis=0) - demand).max()
    return float(max(row, col))


def sinkhorn_solve(problem: BalancedProblem, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Entropically regularized solve of a balanced problem, then rounding.

    Runs log-domain scaling iterations with an epsilon annealing ladder; the
    forbidden corner is a masked kernel cell (exact zero in every plan). The
    returned plan has been passed through `round_to_feasible`, so marginals
    hold to FEASIBILITY_TOL. Raises ConvergenceError when the pre-rounding
    defect is still above 100x tolerance after the iteration budget.
    """
    cfg = cfg or SinkhornConfig()
    supply, demand, cost = problem.supply, problem.demand, problem.cost
    real = problem.real_block(cost)
    mean_cost = float(real.mean()) if real.size else 0.0
    eps0 = cfg.epsilon_scale * mean_cost if mean_cost > 0 else cfg.epsilon_scale

    with np.errstate(divide="ignore"):
        log_a = np.log(supply)
        log_b = np.log(demand)

    n_stages = cfg.anneal_steps + 1
    phi = np.zeros(problem.m + 1)
    psi = np.zeros(problem.k + 1)
    total_iters = 0
    defect = np.inf
    for stage in range(n_stages):
        eps = eps0 / (2.0**stage)
        if stage > 0:
            # Keep the unscaled duals eps*phi continuous across the ladder.
            phi = np.where(np.isfinite(phi), 2.0 * phi, phi)
            psi = np.where(np.isfinite(psi), 2.0 * psi, psi)
        logits = -cost / eps
        logits[problem.m, problem.k] = -np.inf  # structural corner exclusion
        final = stage == n_stages - 1
        # Coarse stages only warm the potentials; the full precision target
        # applies to the last stage, which gets the remaining budget.
        stage_tol = cfg.tolerance if final else max(cfg.tolerance, 1e-3)
        while total_iters < cfg.max_iters:
            phi = log_a - _logsumexp(psi[None, :] + logits, axis=1)
            phi = np.where(np.isneginf(log_a), -np.inf, phi)
            psi = log_b - _logsumexp(phi[:, None] + logits, axis=0)
            psi = np.where(np.isneginf(log_b), -np.inf, psi)
            total_iters += 1
            if total_iters % 4 == 0 or total_iters >= cfg.max_iters:
                flows = _plan_from_potentials(phi, psi, logits)
                defect = _marginal_defect(flows, supply, demand)
                if defect < stage_tol:
                    break

    if defect > 100 * cfg.tolerance:
        raise ConvergenceError(
            f"sinkhorn defect {defect:.3e} after {total_iters} iterations "
            f"(tolerance {cfg.tolerance:.1e})",
            defect=defect,
        )

    flows = _plan_from_potentials(phi, psi, logits)
    raw = TransportPlan(
        flows=flows,
        cost=float((problem.real_block(flows) * problem.real_block(cost)).sum()),
        marginal_defect=defect,
        iterations=total_iters,
    )
    rounded = round_to_feasible(raw, problem)
    rounded.iterations = total_iters
    return rounded


def round_to_feasible(plan: TransportPlan, problem: BalancedProblem) -> TransportPlan:
    """Repair a nearly feasible plan so marginals hold to FEASIBILITY_TOL.

    Rows then columns are scaled down to their marginals, and the remaining
    deficit is filled greedily on the cheapest allowed cells. If the only
    pairable deficit sits on the dummy row and dummy column, mass is swapped
    through a positive real cell instead of the forbidden corner (this also
    lowers the cost, since dummy edges are free).
    """
    supply, demand = problem.supply, problem.demand
    m, k = problem.m, problem.k
    x = np.clip(np.asarray(plan.flows, dtype=np.float64), 0.0, None).copy()
    if x.shape != (m + 1, k + 1):
        raise ShapeMismatch(f"plan is {x.shape}, problem needs {(m + 1, k + 1)}")
    x[m, k] = 0.0

    row_sums = x.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(row_sums > 0, np.minimum(1.0, supply / row_sums), 1.0)
    x *= scale[:, None]
    col_sums = x.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(col_sums > 0, np.minimum(1.0, demand / col_sums), 1.0)
    x *= scale[None, :]

    err_a = np.clip(supply - x.sum(axis=1), 0.0, None)
    err_b = np.clip(demand - x.sum(axis=0), 0.0, None)
    if err_a.max() > FEASIBILITY_TOL / 4 or err_b.max() > FEASIBILITY_TOL / 4:
        order = sorted(
            ((i, j) for i in range(m + 1) for j in range(k + 1) if (i, j) != (m, k)),
            key=lambda ij: (problem.cost[ij], ij),
        )
        for i, j in order:
            delta = min(err_a[i], err_b[j])
            if delta > 0:
                x[i, j] += delta
                err_a[i] -= delta
                err_b[j] -= delta
        # Deadlock: deficit only pairable at the forbidden corner.
        while err_a[m] > FEASIBILITY_TOL / 4 and err_b[k] > FEASIBILITY_TOL / 4:
            real = x[:m, :k]
            i, j = np.unravel_index(np.argmax(real), real.shape)
            if real[i, j] <= 0:
                raise RuntimeError("cannot repair plan without corner flow")
            delta = min(err_a[m], err_b[k], real[i, j])
            x[m, j] += delta
            x[i, k] += delta
            x[i, j] -= delta
            err_a[m] -= delta
            err_b[k] -= delta

    return TransportPlan(
        flows=x,
        cost=float((problem.real_block(x) * problem.real_block(problem.cost)).sum()),
        marginal_defect=_marginal_defect(x, supply, demand),
        iterations=plan.iterations,
    )


def exact_solve_oracle(problem: BalancedProblem) -> TransportPlan:
    """Exact optimal plan by transportation simplex; capped at 16x16 augmented."""
    n_rows, n_cols = problem.m + 1, problem.k + 1
    if n_rows > ORACLE_DIM_CAP or n_cols > ORACLE_DIM_CAP:
        raise OracleTooLarge(
            f"augmented problem {n_rows}x{n_cols} exceeds the {ORACLE_DIM_CAP} cap"
        )
    flows, pivots = solve_transportation(
        problem.cost, problem.supply, problem.demand, forbidden=[(problem.m, problem.k)]
    )
    assert flows[problem.m, problem.k] == 0.0
    return TransportPlan(
        flows=flows,
        cost=float((problem.real_block(flows) * problem.real_block(problem.cost)).sum()),
        marginal_defect=_marginal_defect(flows, problem.supply, problem.demand),
        iterations=pivots,
    )


def strip_dummies(plan: TransportPlan, m: int, k: int) -> TransportPlan:
    """Drop the dummy row/column, keeping the m x k real block."""
    if plan.flows.shape != (m + 1, k + 1):
        raise ShapeMismatch(f"plan is {plan.flows.shape}, expected {(m + 1, k + 1)}")
    return TransportPlan(
        flows=plan.flows[:m, :k].copy(),
        cost=plan.cost,
        marginal_defect=plan.marginal_defect,
        iterations=plan.iterations,
    )


def transport_cost(plan: TransportPlan, cost: np.ndarray) -> float:
    """Total cost sum(c_ij * x_ij) of a plan against a matching cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if plan.flows.shape != cost.shape:
        raise ShapeMismatch(f"plan {plan.flows.shape} vs cost {cost.shape}")
    return float((plan.flows * cost).sum())
