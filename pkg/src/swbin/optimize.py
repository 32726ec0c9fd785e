"""Shared minimization utilities for exponent and bound computations.

The recurring shape is: minimize base(q) + [bracket(q)]_+ over a probability
simplex, subject to inequality and equality constraints. The positive-part
term is handled exactly by solving two smooth constrained subproblems (clamp
inactive: bracket <= 0; clamp active: bracket >= 0, added to the objective)
and taking the better, since the unconstrained split is wrong whenever the
smooth minimizer lands at a negative bracket. Global structure comes from a
deterministic simplex grid plus caller-provided structured starts; the true
clamped objective is re-evaluated at every candidate, so refinement can only
improve on the grid bracket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import NonlinearConstraint, minimize

from .probability import JointPmf, simplex_grid_array

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class OptimizerBudget:
    """Effort knobs shared by all optimization-backed operations."""

    grid_resolution: int | None = None  # None: auto from the variable count
    restarts: int = 8
    refine_iters: int = 200
    tol: float = 1e-3
    multiplier_cap: float = 32.0
    seed: int = 0

    def resolution_for(self, dim: int) -> int | None:
        if self.grid_resolution is not None:
            return self.grid_resolution
        if dim <= 2:
            return 128
        if dim <= 4:
            return 64
        if dim <= 6:
            return 24
        if dim <= 9:
            return 10
        return None


DEFAULT_BUDGET = OptimizerBudget()


@dataclass
class ExponentResult:
    """Value in bits with the witness distribution and optimizer diagnostics."""

    value: float
    argmin: JointPmf | None = None
    active_branch: str | None = None
    certified_gap: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ClampedProblem:
    """min base(q) + [bracket(q)]_+ over the dim-simplex with constraints.

    ineq entries must be >= 0 at feasible points; eq entries must be 0.
    support, when given, pins coordinates outside it to zero.
    batch_value, when given, evaluates the full clamped objective (with
    feasibility folded in as +inf) on an (N, dim) array of grid rows.
    """

    dim: int
    base: Callable[[np.ndarray], float]
    bracket: Callable[[np.ndarray], float] | None = None
    ineq: tuple = ()
    eq: tuple = ()
    support: np.ndarray | None = None
    batch_value: Callable[[np.ndarray], np.ndarray] | None = None
    extra_starts: tuple = ()


def _clean(q: np.ndarray) -> np.ndarray:
    q = np.clip(np.asarray(q, dtype=float), 0.0, None)
    s = q.sum()
    return q / s if s > 0 else q


def true_value(problem: ClampedProblem, q: np.ndarray) -> float:
    """Clamped objective with hard feasibility, at a cleaned point."""
    q = _clean(q)
    for g in problem.ineq:
        if g(q) < -FEAS_TOL:
            return math.inf
    for h in problem.eq:
        if abs(h(q)) > FEAS_TOL:
            return math.inf
    v = problem.base(q)
    if problem.bracket is not None:
        b = problem.bracket(q)
        v = v + max(b, 0.0)
    return v


def _embed(problem: ClampedProblem, fn: Callable) -> Callable:
    """Lift a full-length callable to the support-restricted variable."""
    if problem.support is None:
        return fn
    support = problem.support

    def lifted(z: np.ndarray) -> float:
        q = np.zeros(problem.dim)
        q[support] = np.clip(z, 0.0, None)
        return fn(q)

    return lifted


def _restrict(problem: ClampedProblem, q: np.ndarray) -> np.ndarray:
    return q if problem.support is None else q[problem.support]


def _expand(problem: ClampedProblem, z: np.ndarray) -> np.ndarray:
    if problem.support is None:
        return z
    q = np.zeros(problem.dim)
    q[problem.support] = z
    return q


def _grid_candidates(problem: ClampedProblem, budget: OptimizerBudget) -> np.ndarray:
    free = problem.dim if problem.support is None else int(problem.support.sum())
    res = budget.resolution_for(free)
    pts = None
    if res is not None:
        count = math.comb(res + free - 1, free - 1)
        while res > 4 and count > 400_000:
            res = res // 2
            count = math.comb(res + free - 1, free - 1)
        if count <= 400_000:
            pts = simplex_grid_array(free, res)
    rng = np.random.default_rng(budget.seed)
    extras = [np.full(free, 1.0 / free)]
    extras.append(rng.dirichlet(np.ones(free), size=max(4 * budget.restarts, 16)))
    pool = np.vstack([pts] + [np.atleast_2d(e) for e in extras]) if pts is not None \
        else np.vstack([np.atleast_2d(e) for e in extras])
    if problem.support is not None:
        full = np.zeros((pool.shape[0], problem.dim))
        full[:, problem.support] = pool
        pool = full
    if problem.extra_starts:
        pool = np.vstack([pool, np.atleast_2d(np.asarray(problem.extra_starts, dtype=float))])
    return pool


def _pool_values(problem: ClampedProblem, pool: np.ndarray) -> np.ndarray:
    if problem.batch_value is not None:
        return np.asarray(problem.batch_value(pool), dtype=float)
    return np.array([true_value(problem, q) for q in pool])


def _refine_one(problem: ClampedProblem, q0: np.ndarray, budget: OptimizerBudget) -> list:
    """SLSQP on the clamp-inactive and clamp-active smooth subproblems."""
    free = problem.dim if problem.support is None else int(problem.support.sum())
    z0 = _restrict(problem, _clean(q0))
    bounds = [(0.0, 1.0)] * free
    cons = [{"type": "eq", "fun": lambda z: z.sum() - 1.0}]
    for g in problem.ineq:
        cons.append({"type": "ineq", "fun": _embed(problem, g)})
    for h in problem.eq:
        cons.append({"type": "eq", "fun": _embed(problem, h)})
    out = []

    def run(obj, extra_cons):
        try:
            res = minimize(obj, z0, method="SLSQP", bounds=bounds,
                           constraints=cons + extra_cons,
                           options={"maxiter": budget.refine_iters, "ftol": 1e-12})
        except (ValueError, FloatingPointError):
            return
        z = np.clip(res.x, 0.0, None)
        if z.sum() > 0:
            out.append(_expand(problem, z / z.sum()))

    base = _embed(problem, problem.base)
    if problem.bracket is None:
        run(base, [])
    else:
        bracket = _embed(problem, problem.bracket)
        run(base, [{"type": "ineq", "fun": lambda z: -bracket(z)}])
        run(lambda z: base(z) + bracket(z), [{"type": "ineq", "fun": bracket}])
    return out


def solve_clamped(problem: ClampedProblem, budget: OptimizerBudget = DEFAULT_BUDGET) -> tuple:
    """Returns (value, argmin or None, info dict)."""
    pool = _grid_candidates(problem, budget)
    vals = _pool_values(problem, pool)
    order = np.argsort(vals)
    grid_best = float(vals[order[0]]) if len(order) else math.inf
    starts = [pool[i] for i in order[: budget.restarts] if math.isfinite(vals[i])]
    # structured starts are always worth refining even if the grid beat them
    for q in problem.extra_starts:
        starts.append(np.asarray(q, dtype=float))

    candidates = [pool[order[0]]] if len(order) and math.isfinite(grid_best) else []
    for q0 in starts:
        candidates.extend(_refine_one(problem, q0, budget))
    candidates.extend(np.asarray(q, dtype=float) for q in problem.extra_starts)

    best_v, best_q = grid_best if math.isfinite(grid_best) else math.inf, None
    if len(order) and math.isfinite(grid_best):
        best_q = _clean(pool[order[0]])
    for q in candidates:
        v = true_value(problem, q)
        if v < best_v:
            best_v, best_q = v, _clean(q)
    info = {
        "grid_best": grid_best,
        "certified_gap": abs(best_v - grid_best) if math.isfinite(best_v) and math.isfinite(grid_best) else 0.0,
        "pool_size": int(len(pool)),
        "feasible": math.isfinite(best_v),
    }
    if problem.bracket is not None and best_q is not None and math.isfinite(best_v):
        info["clamp_active"] = problem.bracket(best_q) > 0.0
    return best_v, best_q, info


# ---------------------------------------------------------------------------
# box minimization (conditional rows, auxiliary channel variables)
# ---------------------------------------------------------------------------

def box_grid(bounds: Sequence[tuple], resolution: int) -> np.ndarray:
    """Full mesh over a box, shaped (N, dim)."""
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def minimize_on_box(fn: Callable[[np.ndarray], float], bounds: Sequence[tuple],
                    budget: OptimizerBudget = DEFAULT_BUDGET,
                    fn_batch: Callable[[np.ndarray], np.ndarray] | None = None,
                    extra_starts: Sequence[np.ndarray] = (),
                    maximize: bool = False) -> tuple:
    """Grid bracketing plus Nelder-Mead polish inside a box; returns (value, x)."""
    sign = -1.0 if maximize else 1.0
    dim = len(bounds)
    per_dim = max(3, int(round(30_000 ** (1.0 / dim))))
    if budget.grid_resolution is not None:
        per_dim = max(3, min(per_dim, budget.grid_resolution))
    pts = box_grid(bounds, per_dim)
    if extra_starts:
        pts = np.vstack([pts, np.atleast_2d(np.asarray(extra_starts, dtype=float))])
    if fn_batch is not None:
        vals = sign * np.asarray(fn_batch(pts), dtype=float)
    else:
        vals = np.array([sign * fn(x) for x in pts])
    vals = np.where(np.isnan(vals), np.inf, vals)
    order = np.argsort(vals)
    best_v, best_x = float(vals[order[0]]), pts[order[0]].copy()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    for i in order[: max(2, budget.restarts // 2)]:
        if not math.isfinite(vals[i]):
            break
        res = minimize(lambda x: sign * fn(np.clip(x, lo, hi)), pts[i],
                       method="Nelder-Mead",
                       options={"maxiter": budget.refine_iters * dim,
                                "xatol": 1e-8, "fatol": 1e-12})
        x = np.clip(res.x, lo, hi)
        v = sign * fn(x)
        if v < best_v:
            best_v, best_x = v, x
    return sign * best_v, best_x
