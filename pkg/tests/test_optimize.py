"""Clamped simplex solver and box search against brute-force oracles."""

import math

import numpy as np
import pytest

from swbin.optimize import (
    DEFAULT_BUDGET,
    ClampedProblem,
    ExponentResult,
    OptimizerBudget,
    box_grid,
    minimize_on_box,
    solve_clamped,
    true_value,
)
from swbin.probability import entropy_bits, kl_bits


def test_budget_resolution_schedule():
    b = OptimizerBudget()
    assert b.resolution_for(2) == 128
    assert b.resolution_for(4) == 64
    assert b.resolution_for(6) == 24
    assert b.resolution_for(9) == 10
    assert b.resolution_for(10) is None
    assert OptimizerBudget(grid_resolution=17).resolution_for(8) == 17


def test_exponent_result_defaults():
    r = ExponentResult(value=1.5)
    assert r.argmin is None and r.active_branch is None
    assert r.certified_gap == 0.0 and r.diagnostics == {}


def test_unconstrained_kl_minimum_is_zero_at_target():
    p = np.array([0.3, 0.7])
    prob = ClampedProblem(dim=2, base=lambda q: kl_bits(q, p))
    val, arg, info = solve_clamped(prob)
    assert abs(val) < 1e-9
    assert np.allclose(arg, p, atol=1e-5)
    assert info["feasible"]


def test_entropy_constraint_projects_onto_boundary():
    # min D(q||p) s.t. H(q) >= 0.9 with H(p) < 0.9: optimum sits on H(q) = 0.9
    p = np.array([0.3, 0.7])
    prob = ClampedProblem(
        dim=2,
        base=lambda q: kl_bits(q, p),
        ineq=(lambda q: entropy_bits(q) - 0.9,),
    )
    val, arg, _ = solve_clamped(prob)
    # boundary point on the p-side of 1/2 by bisection
    lo, hi = 0.3, 0.5
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if entropy_bits(np.array([mid, 1 - mid])) < 0.9:
            lo = mid
        else:
            hi = mid
    qstar = np.array([hi, 1 - hi])
    assert abs(val - kl_bits(qstar, p)) < 2e-3
    assert entropy_bits(arg) >= 0.9 - 1e-5


def brute_force_curve(fn, npts=60001):
    t = np.linspace(0.0, 1.0, npts)
    return min(fn(np.array([ti, 1.0 - ti])) for ti in t)


def test_clamped_objective_matches_dense_scan():
    # base + [bracket]_+ over the binary simplex vs a half-million-point scan
    p = np.array([0.3, 0.7])

    def base(q):
        return kl_bits(q, p)

    def bracket(q):
        return entropy_bits(q) - 0.6

    prob = ClampedProblem(dim=2, base=base, bracket=bracket)
    val, arg, info = solve_clamped(prob)
    oracle = brute_force_curve(lambda q: base(q) + max(bracket(q), 0.0))
    assert abs(val - oracle) < 2e-3
    assert abs(true_value(prob, arg) - val) < 1e-9


def test_clamped_randomized_against_scan():
    rng = np.random.default_rng(11)
    for _ in range(6):
        p = rng.dirichlet(np.ones(2))
        c = float(rng.uniform(0.2, 1.0))
        w = float(rng.uniform(-2.0, 2.0))

        def base(q, p=p):
            return kl_bits(q, p)

        def bracket(q, c=c, w=w):
            return w * (entropy_bits(q) - c)

        prob = ClampedProblem(dim=2, base=base, bracket=bracket)
        val, _, _ = solve_clamped(prob)
        oracle = brute_force_curve(lambda q: base(q) + max(bracket(q), 0.0))
        assert abs(val - oracle) < 2e-3


def test_infeasible_constraints_return_inf():
    prob = ClampedProblem(
        dim=2,
        base=lambda q: 0.0,
        ineq=(lambda q: entropy_bits(q) - 1.5,),  # impossible for binary
    )
    val, arg, info = solve_clamped(prob)
    assert math.isinf(val)
    assert not info["feasible"]


def test_support_pinning_restricts_coordinates():
    p = np.array([0.2, 0.5, 0.3])
    prob = ClampedProblem(
        dim=3,
        base=lambda q: kl_bits(q, np.array([0.4, 0.6, 0.0]) + 1e-300),
        support=np.array([True, True, False]),
    )
    val, arg, _ = solve_clamped(prob)
    assert arg[2] == 0.0
    assert abs(val) < 1e-6


def test_extra_starts_rescue_narrow_minimum():
    # grid misses a needle at an irrational point; the start pins it
    target = np.array([1 / math.sqrt(2), 1 - 1 / math.sqrt(2)])

    def base(q):
        return min(1.0, 1e4 * float(np.sum((q - target) ** 2)))

    budget = OptimizerBudget(restarts=0, refine_iters=0, grid_resolution=8)
    prob = ClampedProblem(dim=2, base=base, extra_starts=(target,))
    val, arg, _ = solve_clamped(prob, budget)
    assert val < 1e-9
    assert np.allclose(arg, target)


def test_batch_value_agrees_with_scalar_base():
    p = np.array([0.25, 0.75])

    def base(q):
        return kl_bits(q, p)

    def batch(qs):
        return np.array([kl_bits(q, p) for q in qs])

    v1, _, _ = solve_clamped(ClampedProblem(dim=2, base=base))
    v2, _, _ = solve_clamped(ClampedProblem(dim=2, base=base, batch_value=batch))
    assert abs(v1 - v2) < 2e-3


def test_true_value_applies_clamp_and_feasibility():
    prob = ClampedProblem(
        dim=2,
        base=lambda q: 1.0,
        bracket=lambda q: q[0] - 0.5,
        ineq=(lambda q: q[0] - 0.9,),
    )
    assert math.isinf(true_value(prob, np.array([0.5, 0.5])))
    assert abs(true_value(prob, np.array([0.95, 0.05])) - 1.45) < 1e-12


def test_box_grid_shape_and_corners():
    g = box_grid([(0.0, 1.0), (2.0, 4.0)], 3)
    assert g.shape == (9, 2)
    assert [0.0, 2.0] in g.tolist()
    assert [1.0, 4.0] in g.tolist()


def test_minimize_on_box_quadratic():
    target = np.array([0.3, 0.7])

    def fn(x):
        return float(np.sum((x - target) ** 2))

    val, x = minimize_on_box(fn, [(0.0, 1.0), (0.0, 1.0)], DEFAULT_BUDGET)
    assert val < 1e-8
    assert np.allclose(x, target, atol=1e-3)


def test_minimize_on_box_maximize_flag():
    def fn(x):
        return -((x[0] - 0.25) ** 2)

    val, x = minimize_on_box(fn, [(0.0, 1.0)], DEFAULT_BUDGET, maximize=True)
    assert abs(val) < 1e-8
    assert abs(x[0] - 0.25) < 1e-3


def test_minimize_on_box_batch_path_matches():
    def fn(x):
        return float(np.cos(3 * x[0]) + (x[1] - 0.2) ** 2)

    def fn_batch(pts):
        return np.cos(3 * pts[:, 0]) + (pts[:, 1] - 0.2) ** 2

    b = [(0.0, 2.0), (0.0, 1.0)]
    v1, _ = minimize_on_box(fn, b, DEFAULT_BUDGET)
    v2, _ = minimize_on_box(fn, b, DEFAULT_BUDGET, fn_batch=fn_batch)
    assert abs(v1 - v2) < 1e-6
