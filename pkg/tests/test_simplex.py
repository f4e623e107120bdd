"""Exact transportation solver against closed forms, enumeration, and scipy."""

import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from otmatch.errors import OracleTooLarge
from otmatch.otcore import (
    MarginalWeights,
    build_partial_problem,
    exact_solve_oracle,
)
from otmatch.simplex import solve_transportation


def linprog_transportation(cost, supply, demand, forbidden=None):
    """Independent LP route for cross-checking the simplex solver."""
    n_rows, n_cols = cost.shape
    n_vars = n_rows * n_cols
    a_eq = np.zeros((n_rows + n_cols, n_vars))
    for i in range(n_rows):
        a_eq[i, i * n_cols : (i + 1) * n_cols] = 1.0
    for j in range(n_cols):
        a_eq[n_rows + j, j::n_cols] = 1.0
    b_eq = np.concatenate([supply, demand])
    bounds = [(0, None)] * n_vars
    if forbidden:
        for i, j in forbidden:
            bounds[i * n_cols + j] = (0, 0)
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    assert res.status == 0, res.message
    return res.fun


def random_partial_instance(rng, max_dim=8, max_mass=5):
    m, k = rng.integers(2, max_dim + 1), rng.integers(2, max_dim + 1)
    supply = rng.integers(1, max_mass + 1, m).astype(float)
    demand = rng.integers(1, max_mass + 1, k).astype(float)
    mass = float(rng.integers(1, int(min(supply.sum(), demand.sum())) + 1))
    cost = rng.uniform(0.0, 2.0, (m, k))
    return MarginalWeights(supply, demand, mass), cost


def test_zero_cost_perfect_matching():
    weights = MarginalWeights(np.ones(2), np.ones(2), 2.0)
    problem = build_partial_problem(weights, np.array([[0.0, 1.0], [1.0, 0.0]]))
    plan = exact_solve_oracle(problem)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.flows[:2, :2], np.eye(2))


def test_partial_mass_one_routes_through_zero_cell():
    # enumeration oracle: real block carries exactly 1 unit, min cost is 0
    weights = MarginalWeights(np.ones(2), np.ones(2), 1.0)
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    problem = build_partial_problem(weights, cost)
    plan = exact_solve_oracle(problem)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    assert plan.flows[:2, :2].sum() == pytest.approx(1.0, abs=1e-12)
    # brute-force the best single-unit routing over the real block
    best = min(cost[i, j] for i, j in itertools.product(range(2), range(2)))
    assert plan.cost == pytest.approx(best, abs=1e-12)


def test_matches_linprog_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(50):
        weights, cost = random_partial_instance(rng)
        problem = build_partial_problem(weights, cost)
        plan = exact_solve_oracle(problem)
        want = linprog_transportation(
            problem.cost, problem.supply, problem.demand, forbidden=[(problem.m, problem.k)]
        )
        assert plan.cost == pytest.approx(want, abs=1e-8)
        assert plan.marginal_defect <= 1e-9
        assert plan.flows[problem.m, problem.k] == 0.0


def test_monotone_in_matched_mass():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m, k = rng.integers(2, 7), rng.integers(2, 7)
        supply = rng.integers(1, 5, m).astype(float)
        demand = rng.integers(1, 5, k).astype(float)
        cost = rng.uniform(0.0, 2.0, (m, k))
        cap = int(min(supply.sum(), demand.sum()))
        costs = []
        for mass in range(1, cap + 1):
            problem = build_partial_problem(MarginalWeights(supply, demand, float(mass)), cost)
            costs.append(exact_solve_oracle(problem).cost)
        assert all(a <= b + 1e-9 for a, b in zip(costs, costs[1:]))


def test_permutation_equivariance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        weights, cost = random_partial_instance(rng, max_dim=6)
        problem = build_partial_problem(weights, cost)
        plan = exact_solve_oracle(problem)
        perm = rng.permutation(len(weights.supply))
        permuted = build_partial_problem(
            MarginalWeights(weights.supply[perm], weights.demand, weights.matched_mass),
            cost[perm],
        )
        plan_p = exact_solve_oracle(permuted)
        assert plan_p.cost == pytest.approx(plan.cost, abs=1e-9)
        assert np.allclose(plan_p.flows[: problem.m], plan.flows[perm], atol=1e-9)


def test_oracle_dimension_cap():
    weights = MarginalWeights(np.ones(16), np.ones(16), 4.0)
    problem = build_partial_problem(weights, np.zeros((16, 16)))
    with pytest.raises(OracleTooLarge):
        exact_solve_oracle(problem)


def test_solver_handles_degenerate_zero_marginals():
    # fully balanced reduction: both dummy masses are zero
    weights = MarginalWeights(np.array([1.0, 1.0]), np.array([1.0, 1.0]), 2.0)
    problem = build_partial_problem(weights, np.array([[0.3, 0.9], [0.9, 0.3]]))
    plan = exact_solve_oracle(problem)
    assert plan.cost == pytest.approx(0.6, abs=1e-12)
    assert plan.flows[2].sum() == 0.0
    assert plan.flows[:, 2].sum() == 0.0


def test_unbalanced_input_rejected():
    with pytest.raises(ValueError):
        solve_transportation(np.zeros((2, 2)), np.array([1.0, 1.0]), np.array([1.0, 2.0]))
