"""Error and excess-code-length exponents for random-binning ensembles.

Every computation here is a finite-alphabet type search: a KL radius to the
source plus family-dependent rate terms, minimized over joint types, with
the positive-part term split into two smooth subproblems. Values are in
bits per symbol. +inf encodes an event whose witness set is empty: no
confusable source pair exists, or no type can reach the length threshold.

Branch conventions: E1 covers errors in the first stream only, E2 in the
second, E3 in both. E2 is always computed on the transposed source with
the second channel playing the first's role.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .optimize import (DEFAULT_BUDGET, FEAS_TOL, ClampedProblem, ExponentResult,
                       OptimizerBudget, solve_clamped)
from .probability import (Alphabet, JointPmf, entropy_bits, entropy_bits_batch,
                          kl_bits, kl_bits_batch, simplex_grid_array)
from .rbc import RbcSpec, eval_F
from .zeta import zeta_primal

_SUPPORT_EPS = 1e-15


@dataclass(frozen=True)
class TradeoffPoint:
    """One point of an excess-length / decoding-error trade-off curve."""

    level: float
    e_err: float | None
    member_index: int | None
    feasible: bool
    member_ecl: float | None = None


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _joint_array(p_xy) -> np.ndarray:
    p = np.asarray(p_xy.probs if isinstance(p_xy, JointPmf) else p_xy, dtype=float)
    if p.ndim != 2:
        raise ValueError("the source must be a two-axis joint pmf")
    return p


def _axes_of(p_xy, p: np.ndarray) -> tuple:
    if isinstance(p_xy, JointPmf):
        return p_xy.axes
    return _int_alphabet(p.shape[0]), _int_alphabet(p.shape[1])


def _int_alphabet(n: int) -> Alphabet:
    return Alphabet(tuple(range(n)))


def _floor_tiny(v: float) -> float:
    # provably nonnegative quantities are allowed to round to -1e-16
    return 0.0 if -1e-9 < v < 0.0 else float(v)


def _clean_rows(pool: np.ndarray) -> np.ndarray:
    q = np.clip(np.asarray(pool, dtype=float), 0.0, None)
    return q / np.maximum(q.sum(axis=1, keepdims=True), 1e-300)


def _project_pmf(q) -> np.ndarray:
    # refinement iterates drift off the simplex; designated maps are only
    # defined on it, so snap the argument back before calling one
    q = np.clip(np.asarray(q, dtype=float), 0.0, None)
    s = q.sum()
    return q / s if s > 0.0 else np.full(q.size, 1.0 / q.size)


def _pmf_with_entropy(n: int, h: float) -> np.ndarray:
    """A length-n pmf with entropy h bits, on the point-mass/uniform segment."""
    h = min(max(h, 0.0), math.log2(n))
    lo, hi = 0.0, 1.0

    def ent(t):
        q = np.full(n, t / n)
        q[0] += 1.0 - t
        return entropy_bits(q)

    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ent(mid) < h:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    q = np.full(n, t / n)
    q[0] += 1.0 - t
    return q


# ---------------------------------------------------------------------------
# per-channel descriptors and confusable-pair detection
# ---------------------------------------------------------------------------

@dataclass
class _Side:
    """One binning channel as seen by the exponent search."""

    kind: str
    n_bins: int
    bin_axis: Alphabet
    rate: float | None = None
    rows_fn: Callable | None = None     # star: q_x -> (n_source, n_bins) rows
    rows_const: np.ndarray | None = None
    marg_fn: Callable | None = None     # star/vrsw: q_x -> bin marginal
    marg_const: np.ndarray | None = None
    marg_vec: Callable | None = None    # vectorized marginal for (N, n_source)
    fcost: Callable | None = None       # general table: q_ux -> bits
    coll: np.ndarray | None = None      # (n_source, n_source) bin-collision mask


def _ones_coll(n: int) -> np.ndarray:
    return np.ones((n, n), dtype=bool)


def _rows_collision(rows: np.ndarray) -> np.ndarray:
    b = (np.asarray(rows, dtype=float) > 1e-12).astype(int)
    return (b @ b.T) > 0


def _side_from_spec(spec: RbcSpec, n_source: int) -> _Side:
    if spec.source_alphabet.size != n_source:
        raise ValueError("channel source alphabet does not match the joint source")
    kind = spec.family
    if kind == "fixed_rate":
        n = max(2, math.ceil(2.0 ** spec.rate - 1e-12))
        return _Side(kind, n, _int_alphabet(n), rate=float(spec.rate),
                     coll=_ones_coll(n_source))
    n = spec.bin_alphabet.size
    if kind == "vrsw":
        mc = None if callable(spec.marginal_map) else np.asarray(spec.marginal_map, float)
        return _Side(kind, n, spec.bin_alphabet,
                     marg_fn=lambda q_x: spec.marginal_at(_project_pmf(q_x)),
                     marg_const=mc, coll=_ones_coll(n_source))
    if kind == "star":
        rc = None if callable(spec.conditional_map) else np.asarray(spec.conditional_map, float)
        coll = _rows_collision(rc) if rc is not None else _ones_coll(n_source)
        vec = (lambda qs: qs @ rc) if rc is not None else None
        return _Side(kind, n, spec.bin_alphabet,
                     rows_fn=lambda q_x: spec.conditional_at(_project_pmf(q_x)),
                     rows_const=rc,
                     marg_fn=lambda q_x: spec.marginal_at(_project_pmf(q_x)),
                     marg_vec=vec, coll=coll)
    return _Side(kind, n, spec.bin_alphabet,
                 fcost=lambda q_ux: eval_F(spec, q_ux), coll=_ones_coll(n_source))


def _star_side_from_map(q_star, n_source: int) -> _Side:
    if callable(q_star):
        fn = q_star

        def rows_fn(q_x):
            rows = np.asarray(fn(_project_pmf(q_x)), dtype=float)
            if rows.shape[0] != n_source:
                raise ValueError("conditional rows must have one row per source symbol")
            return rows

        n = rows_fn(np.full(n_source, 1.0 / n_source)).shape[1]
        rc = None
    else:
        rc = np.asarray(q_star, dtype=float)
        if rc.ndim != 2 or rc.shape[0] != n_source:
            raise ValueError("conditional rows must be shaped (n_source, n_bins)")
        if np.any(rc < -1e-12) or np.max(np.abs(rc.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("conditional rows must be stochastic")
        n = rc.shape[1]

        def rows_fn(q_x):
            return rc

    coll = _rows_collision(rc) if rc is not None else _ones_coll(n_source)
    vec = (lambda qs: qs @ rc) if rc is not None else None
    return _Side("star", n, _int_alphabet(n), rows_fn=rows_fn, rows_const=rc,
                 marg_fn=lambda q_x: _project_pmf(q_x) @ rows_fn(q_x),
                 marg_vec=vec, coll=coll)


def _vrsw_side_from_map(q_map, n_source: int) -> _Side:
    if callable(q_map):
        fn = q_map
        marg_fn = lambda q_x: np.asarray(fn(_project_pmf(q_x)), dtype=float)
        n = len(marg_fn(np.full(n_source, 1.0 / n_source)))
        mc = None
    else:
        mc = np.asarray(q_map, dtype=float)
        if mc.ndim != 1 or abs(mc.sum() - 1.0) > 1e-6 or np.any(mc < -1e-12):
            raise ValueError("a constant bin marginal must be a pmf vector")
        n = len(mc)
        marg_fn = lambda q_x: mc
    return _Side("vrsw", n, _int_alphabet(n), marg_fn=marg_fn, marg_const=mc,
                 coll=_ones_coll(n_source))


def _confusable_single(p: np.ndarray, coll: np.ndarray | None) -> bool:
    """Whether two distinct first-stream symbols can share a bin and a pair."""
    s = p > _SUPPORT_EPS
    share = (s.astype(int) @ s.T.astype(int)) > 0
    m = share if coll is None else (share & coll)
    m = m.copy()
    np.fill_diagonal(m, False)
    return bool(m.any())


def _confusable_pair(p: np.ndarray, coll_u: np.ndarray | None,
                     coll_v: np.ndarray | None) -> bool:
    """Whether distinct pairs (x,y), (x',y') with x!=x', y!=y' can collide in both bins."""
    s = p > _SUPPORT_EPS
    nx, ny = p.shape
    cu = _ones_coll(nx) if coll_u is None else coll_u
    cv = _ones_coll(ny) if coll_v is None else coll_v
    for a in range(nx):
        for a2 in range(nx):
            if a2 == a or not cu[a, a2]:
                continue
            m = np.outer(s[a], s[a2]) & cv
            np.fill_diagonal(m, False)
            if m.any():
                return True
    return False


def _infeasible_result(label: str, **diag) -> ExponentResult:
    return ExponentResult(math.inf, None, label, 0.0, dict(diag))


# ---------------------------------------------------------------------------
# branch solvers on the source-type space Q_XY
# ---------------------------------------------------------------------------

def _pack_qxy(value, arg, info, axes, label, **diag) -> ExponentResult:
    nx, ny = axes[0].size, axes[1].size
    argmin = None
    if arg is not None and math.isfinite(value):
        argmin = JointPmf(axes, np.asarray(arg, dtype=float).reshape(nx, ny))
    d = {"argmin_axes": "xy", "grid_best": info.get("grid_best", math.inf), **diag}
    if "clamp_active" in info:
        d["clamp_active"] = bool(info["clamp_active"])
    return ExponentResult(_floor_tiny(value), argmin, label,
                          float(info.get("certified_gap", 0.0)), d)


def _branch_fixed_reduced(p, axes, const, mode, budget, label) -> ExponentResult:
    """min over Q_XY of D(Q||P) + [const - H_Q(mode)]_+ for a fixed rate bundle."""
    nx, ny = p.shape
    pflat = p.reshape(-1)

    def hcond(q2):
        h_all = entropy_bits(q2)
        if mode == "x|y":
            return h_all - entropy_bits(q2.sum(axis=0))
        if mode == "y|x":
            return h_all - entropy_bits(q2.sum(axis=1))
        return h_all

    def bracket(q):
        return const - hcond(q.reshape(nx, ny))

    def batch(pool):
        q = _clean_rows(pool)
        t = q.reshape(-1, nx, ny)
        h = entropy_bits_batch(q)
        if mode == "x|y":
            h = h - entropy_bits_batch(t.sum(axis=1))
        elif mode == "y|x":
            h = h - entropy_bits_batch(t.sum(axis=2))
        return kl_bits_batch(q, pflat) + np.maximum(const - h, 0.0)

    problem = ClampedProblem(dim=nx * ny, base=lambda q: kl_bits(q, pflat),
                             bracket=bracket, batch_value=batch,
                             extra_starts=(pflat,))
    value, arg, info = solve_clamped(problem, budget)
    return _pack_qxy(value, arg, info, axes, label, family="fixed_rate",
                     formula="reduced", rate_bundle=float(const))


def _branch_vrsw_reduced1(p, axes, side, budget, label) -> ExponentResult:
    """min over Q_XY of D(Q||P) + [H(marginal(Q_X)) - H_Q(X|Y)]_+."""
    nx, ny = p.shape
    pflat = p.reshape(-1)
    marg_fn = side.marg_fn

    def bracket(q):
        q2 = q.reshape(nx, ny)
        h_star = entropy_bits(np.asarray(marg_fn(q2.sum(axis=1)), dtype=float))
        return h_star - (entropy_bits(q2) - entropy_bits(q2.sum(axis=0)))

    batch = None
    if side.marg_const is not None or side.marg_vec is not None:
        def batch(pool):
            q = _clean_rows(pool)
            t = q.reshape(-1, nx, ny)
            if side.marg_const is not None:
                h_star = entropy_bits(side.marg_const)
            else:
                h_star = entropy_bits_batch(side.marg_vec(t.sum(axis=2)))
            hcond = entropy_bits_batch(q) - entropy_bits_batch(t.sum(axis=1))
            return kl_bits_batch(q, pflat) + np.maximum(h_star - hcond, 0.0)

    problem = ClampedProblem(dim=nx * ny, base=lambda q: kl_bits(q, pflat),
                             bracket=bracket, batch_value=batch,
                             extra_starts=(pflat,))
    value, arg, info = solve_clamped(problem, budget)
    return _pack_qxy(value, arg, info, axes, label, family="vrsw", formula="reduced")


def _branch_vrsw_reduced3(p, axes, su, sv, budget) -> ExponentResult:
    """min over Q_XY of D(Q||P) + [H(mu(Q_X)) + H(mv(Q_Y)) - H_Q(X,Y)]_+."""
    nx, ny = p.shape
    pflat = p.reshape(-1)

    def bracket(q):
        q2 = q.reshape(nx, ny)
        hu = entropy_bits(np.asarray(su.marg_fn(q2.sum(axis=1)), dtype=float))
        hv = entropy_bits(np.asarray(sv.marg_fn(q2.sum(axis=0)), dtype=float))
        return hu + hv - entropy_bits(q2)

    batch = None
    u_fast = su.marg_const is not None or su.marg_vec is not None
    v_fast = sv.marg_const is not None or sv.marg_vec is not None
    if u_fast and v_fast:
        def batch(pool):
            q = _clean_rows(pool)
            t = q.reshape(-1, nx, ny)
            hu = (entropy_bits(su.marg_const) if su.marg_const is not None
                  else entropy_bits_batch(su.marg_vec(t.sum(axis=2))))
            hv = (entropy_bits(sv.marg_const) if sv.marg_const is not None
                  else entropy_bits_batch(sv.marg_vec(t.sum(axis=1))))
            return kl_bits_batch(q, pflat) + np.maximum(hu + hv - entropy_bits_batch(q), 0.0)

    problem = ClampedProblem(dim=nx * ny, base=lambda q: kl_bits(q, pflat),
                             bracket=bracket, batch_value=batch,
                             extra_starts=(pflat,))
    value, arg, info = solve_clamped(problem, budget)
    return _pack_qxy(value, arg, info, axes, label="E3", family="vrsw",
                     formula="reduced")


# ---------------------------------------------------------------------------
# branch solvers over full bin/source types
# ---------------------------------------------------------------------------

def _pack_tensor(value, arg, info, axes, shape, label, axes_tag, **diag) -> ExponentResult:
    argmin = None
    if arg is not None and math.isfinite(value):
        argmin = JointPmf(axes, np.asarray(arg, dtype=float).reshape(shape))
    d = {"argmin_axes": axes_tag, "grid_best": info.get("grid_best", math.inf), **diag}
    if "clamp_active" in info:
        d["clamp_active"] = bool(info["clamp_active"])
    return ExponentResult(_floor_tiny(value), argmin, label,
                          float(info.get("certified_gap", 0.0)), d)


def _branch_fixed_lemma1(p, axes, rate, budget, label) -> ExponentResult:
    """Single-stream error branch of a fixed-rate channel over bin/source types.

    The auxiliary bin symbol ranges over the smallest alphabet whose log size
    covers the rate; achievable types are entropy-capped at the rate.
    """
    nx, ny = p.shape
    nu = max(2, math.ceil(2.0 ** rate - 1e-12))
    pflat = p.reshape(-1)
    dim = nu * nx * ny

    def base(q):
        t = q.reshape(nu, nx, ny)
        q_xy = t.sum(axis=0)
        return kl_bits(q_xy, pflat) + rate - (entropy_bits(q) - entropy_bits(q_xy))

    def bracket(q):
        t = q.reshape(nu, nx, ny)
        return rate - (entropy_bits(q) - entropy_bits(t.sum(axis=1)))

    def cap(q):
        return rate - entropy_bits(q.reshape(nu, nx, ny).sum(axis=(1, 2)))

    def batch(pool):
        q = _clean_rows(pool)
        t = q.reshape(-1, nu, nx, ny)
        q_xy = t.sum(axis=1).reshape(len(q), -1)
        h_all = entropy_bits_batch(q)
        vals = (kl_bits_batch(q_xy, pflat) + rate - (h_all - entropy_bits_batch(q_xy))
                + np.maximum(rate - (h_all - entropy_bits_batch(t.sum(axis=2).reshape(len(q), -1))), 0.0))
        h_u = entropy_bits_batch(t.sum(axis=(2, 3)))
        return np.where(h_u > rate + FEAS_TOL, np.inf, vals)

    # bin-independent couplings mu (x) Q_XY seed the search; the optimum is one
    mu = _pmf_with_entropy(nu, min(rate, math.log2(nu)))
    grid = simplex_grid_array(nx * ny, 24 if nx * ny <= 4 else 8)
    prods = np.einsum("u,nk->nuk", mu, grid).reshape(len(grid), -1)
    scan = batch(prods)
    top = np.argsort(scan)[:3]
    extras = [prods[i] for i in top]
    extras.append(np.einsum("u,k->uk", mu, pflat).reshape(-1))
    problem = ClampedProblem(dim=dim, base=base, bracket=bracket, ineq=(cap,),
                             batch_value=batch, extra_starts=tuple(extras))
    value, arg, info = solve_clamped(problem, budget)
    return _pack_tensor(value, arg, info, (_int_alphabet(nu), axes[0], axes[1]),
                        (nu, nx, ny), label, "uxy", family="fixed_rate",
                        scan_best=float(np.min(scan)))


def _branch_table_lemma1(p, axes, side, budget, label) -> ExponentResult:
    """Single-stream error branch for a general cost table, over bin/source types."""
    nx, ny = p.shape
    nu = side.n_bins
    pflat = p.reshape(-1)
    fcost = side.fcost

    def base(q):
        t = q.reshape(nu, nx, ny)
        q_xy = t.sum(axis=0)
        f = fcost(t.sum(axis=2))
        if not math.isfinite(f):
            return math.inf
        return kl_bits(q_xy, pflat) + f - (entropy_bits(q) - entropy_bits(q_xy))

    def bracket(q):
        t = q.reshape(nu, nx, ny)
        f = fcost(t.sum(axis=2))
        if not math.isfinite(f):
            return 0.0  # base already reports +inf there
        return f - (entropy_bits(q) - entropy_bits(t.sum(axis=1)))

    uniform_rows = np.full(nu, 1.0 / nu)
    extras = (np.einsum("u,k->uk", uniform_rows, pflat).reshape(-1),)
    problem = ClampedProblem(dim=nu * nx * ny, base=base, bracket=bracket,
                             extra_starts=extras)
    value, arg, info = solve_clamped(problem, budget)
    return _pack_tensor(value, arg, info, (side.bin_axis, axes[0], axes[1]),
                        (nu, nx, ny), label, "uxy", family="general_table")


def _branch_star_zeta(p, axes, side, budget, label) -> ExponentResult:
    """Single-stream error branch of a designated-conditional channel.

    The bin/source joint is pinned to rows(Q_X), so the branch is an outer
    search over Q_X of the reverse-channel functional at rows(Q_X) (x) Q_X.
    The marginal-family value at the same induced marginal map is computed
    first: its optimizer seeds the outer search and a product reverse channel
    built from its argmin is handed to the inner solve, which keeps this
    branch at or below the marginal-family branch.
    """
    nx, ny = p.shape
    nu = side.n_bins
    p_joint = JointPmf((axes[0], axes[1]), p)
    rows_fn = side.rows_fn
    cheap = replace(budget, refine_iters=0, restarts=2)

    vr = _branch_vrsw_reduced1(p, axes, side, budget, label)
    seed_qx = None
    seed_rows = ()
    if vr.argmin is not None and math.isfinite(vr.value):
        q2 = np.asarray(vr.argmin.probs, dtype=float)
        seed_qx = q2.sum(axis=1)
        ry = np.divide(q2, np.maximum(q2.sum(axis=1, keepdims=True), 1e-300))
        ry = np.where(q2.sum(axis=1, keepdims=True) > 1e-300, ry, 1.0 / ny)
        seed_rows = (np.broadcast_to(ry[None, :, :], (nu, nx, ny)).copy(),)

    def qux_at(q_x):
        q_x = np.clip(np.asarray(q_x, dtype=float), 0.0, None)
        q_x = q_x / max(q_x.sum(), 1e-300)
        return (q_x[:, None] * rows_fn(q_x)).T, q_x

    def val(q_x, b):
        q_ux, _ = qux_at(q_x)
        return zeta_primal(q_ux, p_joint, budget=b, extra_rows=seed_rows)

    if nx == 2:
        ts = np.linspace(0.0, 1.0, 21)
        coarse = [val(np.array([1.0 - t, t]), cheap) for t in ts]
        tb = float(ts[int(np.argmin(coarse))])
        lo, hi = max(0.0, tb - 0.1), min(1.0, tb + 0.1)
        res = minimize_scalar(lambda t: val(np.array([1.0 - t, t]), cheap),
                              bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-5, "maxiter": 24})
        finals = [np.array([1.0 - res.x, res.x]), np.array([1.0 - tb, tb])]
    else:
        qgrid = simplex_grid_array(nx, 9)
        coarse = [val(q, cheap) for q in qgrid]
        order = np.argsort(coarse)[:3]
        finals = [qgrid[i] for i in order]
    if seed_qx is not None:
        finals.append(seed_qx)

    best_v, best_qx = math.inf, None
    for q_x in finals:
        v = val(q_x, budget)
        if v < best_v:
            best_v, best_qx = v, q_x
    argmin = None
    if best_qx is not None and math.isfinite(best_v):
        q_ux, q_x = qux_at(best_qx)
        argmin = JointPmf((side.bin_axis, axes[0]), q_ux)
    return ExponentResult(_floor_tiny(best_v), argmin, label, 0.0,
                          {"argmin_axes": "ux", "family": "star",
                           "marginal_family_bound": vr.value,
                           "outer_points": len(finals)})


def _start_rows(side: _Side, q_x: np.ndarray, n_source: int) -> np.ndarray:
    """Feasible per-source bin rows used to build product-coupling starts."""
    if side.kind == "star":
        return np.asarray(side.rows_fn(q_x), dtype=float)
    if side.kind == "vrsw":
        m = np.asarray(side.marg_fn(q_x), dtype=float)
        return np.tile(m, (n_source, 1))
    if side.kind == "fixed_rate":
        m = _pmf_with_entropy(side.n_bins, min(side.rate, math.log2(side.n_bins)))
        return np.tile(m, (n_source, 1))
    return np.tile(np.full(side.n_bins, 1.0 / side.n_bins), (n_source, 1))


def _branch3_engine(p, axes, su, sv, budget, seed_joints) -> ExponentResult:
    """Both-streams error branch over joint bin/bin/source/source types.

    Designated conditionals and marginals enter as equality pins, fixed rates
    as entropy caps, general tables through their cost callable. Product
    couplings built on a source-type scan (plus caller seeds) start the
    refinement, and one of them is always kept as a candidate.
    """
    nx, ny = p.shape
    nu, nv = su.n_bins, sv.n_bins
    pflat = p.reshape(-1)
    dim = nu * nv * nx * ny

    def side_cost(side, t, u_side: bool):
        if side.kind == "fixed_rate":
            return side.rate
        if side.kind == "vrsw":
            q_b = t.sum(axis=(1, 2, 3)) if u_side else t.sum(axis=(0, 2, 3))
            return entropy_bits(q_b)
        q_bs = t.sum(axis=(1, 3)) if u_side else t.sum(axis=(0, 2))
        if side.kind == "star":
            return entropy_bits(q_bs) - entropy_bits(q_bs.sum(axis=0))
        return side.fcost(q_bs)

    def base(q):
        t = q.reshape(nu, nv, nx, ny)
        q_xy = t.sum(axis=(0, 1))
        fu = side_cost(su, t, True)
        fv = side_cost(sv, t, False)
        if not (math.isfinite(fu) and math.isfinite(fv)):
            return math.inf
        return (kl_bits(q_xy, pflat) + fu + fv
                - (entropy_bits(q) - entropy_bits(q_xy)))

    def bracket(q):
        t = q.reshape(nu, nv, nx, ny)
        fu = side_cost(su, t, True)
        fv = side_cost(sv, t, False)
        if not (math.isfinite(fu) and math.isfinite(fv)):
            return 0.0
        return fu + fv - (entropy_bits(q) - entropy_bits(t.sum(axis=(2, 3))))

    ineq, eqs = [], []

    def add_side_constraints(side, u_side: bool):
        n_src = nx if u_side else ny
        if side.kind == "fixed_rate":
            def cap(q, side=side, u_side=u_side):
                t = q.reshape(nu, nv, nx, ny)
                q_b = t.sum(axis=(1, 2, 3)) if u_side else t.sum(axis=(0, 2, 3))
                return side.rate - entropy_bits(q_b)
            ineq.append(cap)
        elif side.kind == "star":
            for b in range(side.n_bins - 1):
                for s in range(n_src):
                    def pin(q, b=b, s=s, side=side, u_side=u_side):
                        t = q.reshape(nu, nv, nx, ny)
                        if u_side:
                            q_src = t.sum(axis=(0, 1, 3))
                            q_bs = t.sum(axis=(1, 3))
                        else:
                            q_src = t.sum(axis=(0, 1, 2))
                            q_bs = t.sum(axis=(0, 2))
                        rows = np.asarray(side.rows_fn(q_src), dtype=float)
                        return q_bs[b, s] - rows[s, b] * q_src[s]
                    eqs.append(pin)
        elif side.kind == "vrsw":
            for b in range(side.n_bins - 1):
                def pin(q, b=b, side=side, u_side=u_side):
                    t = q.reshape(nu, nv, nx, ny)
                    if u_side:
                        q_src = t.sum(axis=(0, 1, 3))
                        q_b = t.sum(axis=(1, 2, 3))
                    else:
                        q_src = t.sum(axis=(0, 1, 2))
                        q_b = t.sum(axis=(0, 2, 3))
                    return q_b[b] - np.asarray(side.marg_fn(q_src), dtype=float)[b]
                eqs.append(pin)

    add_side_constraints(su, True)
    add_side_constraints(sv, False)

    def build(q2):
        ru = _start_rows(su, q2.sum(axis=1), nx)
        rv = _start_rows(sv, q2.sum(axis=0), ny)
        return np.einsum("xy,xu,yv->uvxy", q2, ru, rv).reshape(-1)

    def clamped(q):
        b = base(q)
        if not math.isfinite(b):
            return math.inf
        return b + max(bracket(q), 0.0)

    scan_res = 16 if nx * ny <= 4 else 6
    starts = [build(g.reshape(nx, ny)) for g in simplex_grid_array(nx * ny, scan_res)]
    scan = np.array([clamped(q) for q in starts])
    extras = [starts[i] for i in np.argsort(scan)[:3]]
    for q2 in seed_joints:
        extras.append(build(np.asarray(q2, dtype=float)))

    problem = ClampedProblem(dim=dim, base=base, bracket=bracket,
                             ineq=tuple(ineq), eq=tuple(eqs),
                             extra_starts=tuple(extras))
    value, arg, info = solve_clamped(problem, budget)
    return _pack_tensor(value, arg, info,
                        (su.bin_axis, sv.bin_axis, axes[0], axes[1]),
                        (nu, nv, nx, ny), "E3", "uvxy",
                        families=(su.kind, sv.kind),
                        scan_best=float(np.min(scan)))


# ---------------------------------------------------------------------------
# branch dispatch and result assembly
# ---------------------------------------------------------------------------

def _branch_err1(p, axes, side, budget, label) -> ExponentResult:
    if not _confusable_single(p, side.coll):
        return _infeasible_result(label, empty_confusion=True, family=side.kind)
    if side.kind == "fixed_rate":
        return _branch_fixed_lemma1(p, axes, side.rate, budget, label)
    if side.kind == "star":
        return _branch_star_zeta(p, axes, side, budget, label)
    if side.kind == "vrsw":
        return _branch_vrsw_reduced1(p, axes, side, budget, label)
    return _branch_table_lemma1(p, axes, side, budget, label)


def _branch_err3(p, axes, su, sv, budget) -> ExponentResult:
    if not _confusable_pair(p, su.coll, sv.coll):
        return _infeasible_result("E3", empty_confusion=True,
                                  families=(su.kind, sv.kind))
    if su.kind == "vrsw" and sv.kind == "vrsw":
        return _branch_vrsw_reduced3(p, axes, su, sv, budget)
    seeds = [p]
    if su.marg_fn is not None and sv.marg_fn is not None:
        vr = _branch_vrsw_reduced3(p, axes, su, sv, budget)
        if vr.argmin is not None and math.isfinite(vr.value):
            seeds.append(np.asarray(vr.argmin.probs, dtype=float))
    return _branch3_engine(p, axes, su, sv, budget, seeds)


def _min_result(branches: dict) -> ExponentResult:
    order = ("E1", "E2", "E3")
    label = min(order, key=lambda k: (branches[k].value, order.index(k)))
    r = branches[label]
    diag = dict(r.diagnostics)
    diag["branch_values"] = {k: branches[k].value for k in order}
    return ExponentResult(r.value, r.argmin, label, r.certified_gap, diag)


# ---------------------------------------------------------------------------
# public error-exponent operations
# ---------------------------------------------------------------------------

def fixed_rate_exponent(p_xy, r_x: float, r_y: float,
                        budget: OptimizerBudget | None = None) -> dict:
    """Decoding-error exponents of the fixed-rate pair, by the reduced
    source-type formulas: each branch is min D(Q||P) + [rates - H_Q(.)]_+.

    Returns {"E1", "E2", "E3", "min"} of ExponentResult. Branches whose
    confusion set is empty (a stream fully determined by the other) are +inf.
    """
    if r_x < 0 or r_y < 0:
        raise ValueError("rates must be nonnegative")
    budget = budget or DEFAULT_BUDGET
    p = _joint_array(p_xy)
    axes = _axes_of(p_xy, p)
    out = {}
    if _confusable_single(p, None):
        out["E1"] = _branch_fixed_reduced(p, axes, r_x, "x|y", budget, "E1")
    else:
        out["E1"] = _infeasible_result("E1", empty_confusion=True, family="fixed_rate")
    if _confusable_single(p.T, None):
        out["E2"] = _branch_fixed_reduced(p, axes, r_y, "y|x", budget, "E2")
    else:
        out["E2"] = _infeasible_result("E2", empty_confusion=True, family="fixed_rate")
    if _confusable_pair(p, None, None):
        out["E3"] = _branch_fixed_reduced(p, axes, r_x + r_y, "xy", budget, "E3")
    else:
        out["E3"] = _infeasible_result("E3", empty_confusion=True, family="fixed_rate")
    out["min"] = _min_result(out)
    return out


def error_exponent_vrsw(p_xy, q_u_map, q_v_map,
                        budget: OptimizerBudget | None = None) -> dict:
    """Decoding-error exponents when each stream's bin marginal is designated
    by a map of its source type (constant pmf or callable q_x -> pmf)."""
    budget = budget or DEFAULT_BUDGET
    p = _joint_array(p_xy)
    axes = _axes_of(p_xy, p)
    su = _vrsw_side_from_map(q_u_map, p.shape[0])
    sv = _vrsw_side_from_map(q_v_map, p.shape[1])
    out = {
        "E1": _branch_err1(p, axes, su, budget, "E1"),
        "E2": _branch_err1(p.T, (axes[1], axes[0]), sv, budget, "E2"),
        "E3": _branch_err3(p, axes, su, sv, budget),
    }
    out["min"] = _min_result(out)
    return out


def error_exponent_star(p_xy, q_star_ux, q_star_vy,
                        budget: OptimizerBudget | None = None) -> dict:
    """Decoding-error exponents when each stream's bin conditional is
    designated: rows shaped (n_source, n_bins), constant or callable of q_x.

    Deterministic rows get an exact bin-collision test; branches whose
    confusable set is empty come back +inf with an empty_confusion flag.
    """
    budget = budget or DEFAULT_BUDGET
    p = _joint_array(p_xy)
    axes = _axes_of(p_xy, p)
    su = _star_side_from_map(q_star_ux, p.shape[0])
    sv = _star_side_from_map(q_star_vy, p.shape[1])
    out = {
        "E1": _branch_err1(p, axes, su, budget, "E1"),
        "E2": _branch_err1(p.T, (axes[1], axes[0]), sv, budget, "E2"),
        "E3": _branch_err3(p, axes, su, sv, budget),
    }
    out["min"] = _min_result(out)
    return out


def error_exponent_general(p_xy, spec_f: RbcSpec, spec_g: RbcSpec,
                           budget: OptimizerBudget | None = None) -> dict:
    """Decoding-error exponents for an arbitrary pair of binning channels.

    Dispatches each branch on the channel family: fixed rates run over
    entropy-capped bin/source types, designated conditionals through the
    reverse-channel functional, designated marginals through the reduced
    source-type form, and general tables through their cost callable.
    Callers are expected to pass channels with a near-zero normalization
    residual (see validate_rbc).
    """
    budget = budget or DEFAULT_BUDGET
    p = _joint_array(p_xy)
    axes = _axes_of(p_xy, p)
    su = _side_from_spec(spec_f, p.shape[0])
    sv = _side_from_spec(spec_g, p.shape[1])
    out = {
        "E1": _branch_err1(p, axes, su, budget, "E1"),
        "E2": _branch_err1(p.T, (axes[1], axes[0]), sv, budget, "E2"),
        "E3": _branch_err3(p, axes, su, sv, budget),
    }
    out["min"] = _min_result(out)
    return out


# ---------------------------------------------------------------------------
# excess code length
# ---------------------------------------------------------------------------

def _psi_table(side: _Side, q_x: np.ndarray, r_tilde: float, rng: np.random.Generator,
               memo: dict, n_samples: int = 64) -> float:
    """Cheapest cost overshoot of a general table at source type q_x, over
    bin conditionals whose induced marginal reaches the length threshold."""
    key = tuple(np.round(q_x * 256.0).astype(int)), round(r_tilde, 12)
    if key in memo:
        return memo[key]
    n_src = len(q_x)
    n = side.n_bins
    rows_pool = [np.tile(np.full(n, 1.0 / n), (n_src, 1))]
    rows_pool.extend(rng.dirichlet(np.ones(n), size=n_src) for _ in range(n_samples))
    best = math.inf
    for rows in rows_pool:
        q_ux = (q_x[:, None] * rows).T
        if entropy_bits(q_ux.sum(axis=1)) < r_tilde - FEAS_TOL:
            continue
        f = side.fcost(q_ux)
        if not math.isfinite(f):
            continue
        best = min(best, f - (entropy_bits(q_ux) - entropy_bits(q_x)))
    memo[key] = best
    return best


def excess_length_exponent(p_xy, spec_f: RbcSpec, spec_g: RbcSpec,
                           r_tilde_x: float, r_tilde_y: float,
                           budget: OptimizerBudget | None = None) -> ExponentResult:
    """Exponent of both code lengths exceeding the thresholds simultaneously.

    Designated-marginal and designated-conditional channels contribute the
    constraint H(marginal(Q_X)) >= threshold; a fixed-rate channel either
    always or never exceeds its threshold; a general table contributes its
    cheapest feasible cost overshoot. +inf (with an infeasible flag) means
    no joint source type meets the thresholds.
    """
    if r_tilde_x < 0 or r_tilde_y < 0:
        raise ValueError("length thresholds must be nonnegative")
    budget = budget or DEFAULT_BUDGET
    p = _joint_array(p_xy)
    axes = _axes_of(p_xy, p)
    nx, ny = p.shape
    pflat = p.reshape(-1)
    sides = (_side_from_spec(spec_f, nx), _side_from_spec(spec_g, ny))
    thresholds = (float(r_tilde_x), float(r_tilde_y))

    for side, r_t in zip(sides, thresholds):
        if side.kind == "fixed_rate":
            if r_t > side.rate + 1e-9:
                return _infeasible_result(
                    None, infeasible=True, r_tilde=thresholds,
                    reason="fixed rate below the length threshold")
        elif r_t > math.log2(side.n_bins) + 1e-9:
            return _infeasible_result(
                None, infeasible=True, r_tilde=thresholds,
                reason="threshold above the log bin-alphabet size")

    ineq = []
    psi_terms = []
    memo: dict = {}
    rng = np.random.default_rng(budget.seed)
    for idx, (side, r_t) in enumerate(zip(sides, thresholds)):
        if side.kind in ("star", "vrsw"):
            def g(q, side=side, r_t=r_t, idx=idx):
                q2 = q.reshape(nx, ny)
                q_src = q2.sum(axis=1) if idx == 0 else q2.sum(axis=0)
                return entropy_bits(np.asarray(side.marg_fn(q_src), dtype=float)) - r_t
            ineq.append(g)
        elif side.kind == "general_table":
            def psi(q, side=side, r_t=r_t, idx=idx):
                q2 = q.reshape(nx, ny)
                q_src = q2.sum(axis=1) if idx == 0 else q2.sum(axis=0)
                return _psi_table(side, q_src, r_t, rng, memo)
            psi_terms.append(psi)

    if psi_terms:
        def base(q):
            v = kl_bits(q, pflat)
            for psi in psi_terms:
                v += psi(q)
            return v
        batch = None
    else:
        base = lambda q: kl_bits(q, pflat)
        marg_gs = []  # (acts_on_x, q_src -> entropy slack) per constrained side
        for idx, (side, r_t) in enumerate(zip(sides, thresholds)):
            if side.kind in ("star", "vrsw"):
                marg_gs.append((idx == 0,
                                lambda q_src, side=side, r_t=r_t:
                                entropy_bits(np.asarray(side.marg_fn(q_src),
                                                        dtype=float)) - r_t))

        def batch(pool):
            q = _clean_rows(pool)
            vals = kl_bits_batch(q, pflat)
            t = q.reshape(-1, nx, ny)
            # constraints go through the same scalar path the refiner uses,
            # once per distinct source type
            for on_x, g_src in marg_gs:
                axis_src = t.sum(axis=2) if on_x else t.sum(axis=1)
                uniq, inv = np.unique(axis_src.round(12), axis=0, return_inverse=True)
                ok = np.array([g_src(row) >= -FEAS_TOL for row in uniq])[inv]
                vals = np.where(ok, vals, np.inf)
            return vals

    problem = ClampedProblem(dim=nx * ny, base=base, ineq=tuple(ineq),
                             batch_value=batch, extra_starts=(pflat,))
    value, arg, info = solve_clamped(problem, budget)
    if not info.get("feasible", True) or not math.isfinite(value):
        return _infeasible_result(None, infeasible=True, r_tilde=thresholds,
                                  reason="no joint source type meets the thresholds")
    res = _pack_qxy(value, arg, info, axes, None, r_tilde=thresholds,
                    families=(sides[0].kind, sides[1].kind))
    if memo:
        res.diagnostics["psi_sampled_types"] = len(memo)
    return res


def excess_length_sweep(p_xy, spec_f: RbcSpec, spec_g: RbcSpec,
                        levels: Sequence, budget: OptimizerBudget | None = None) -> list:
    """Excess-length exponents at several thresholds, one ExponentResult per
    level. Levels are (r_tilde_x, r_tilde_y) pairs (a scalar stands for both).

    When the levels ascend componentwise, any later level's optimizer is
    feasible at earlier levels, so a backward pass transfers improvements
    and the returned values are exactly non-decreasing.
    """
    pairs = [(float(l), float(l)) if np.isscalar(l) else (float(l[0]), float(l[1]))
             for l in levels]
    results = [excess_length_exponent(p_xy, spec_f, spec_g, rx, ry, budget)
               for rx, ry in pairs]
    for i in range(len(results) - 2, -1, -1):
        nested = pairs[i][0] <= pairs[i + 1][0] and pairs[i][1] <= pairs[i + 1][1]
        if nested and results[i + 1].value < results[i].value:
            donor = results[i + 1]
            results[i] = ExponentResult(
                donor.value, donor.argmin, donor.active_branch, donor.certified_gap,
                {**donor.diagnostics, "r_tilde": pairs[i], "sweep_tightened": True})
    return results


# ---------------------------------------------------------------------------
# trade-off curve
# ---------------------------------------------------------------------------

def tradeoff_curve(p_xy, ensemble_family: Sequence, r_tilde_x: float, r_tilde_y: float,
                   ecl_levels: Sequence[float],
                   budget: OptimizerBudget | None = None) -> list:
    """Best decoding-error exponent achievable at each required excess-length
    exponent, over a finite menu of channel pairs.

    ensemble_family is a sequence of (spec_f, spec_g) pairs. Each member's
    two exponents are computed once; at each level the feasible members are
    those whose excess-length exponent reaches it, and the best error
    exponent among them is reported. Levels no member reaches come back
    flagged infeasible.
    """
    members = list(ensemble_family)
    if not members:
        raise ValueError("the ensemble menu must be non-empty")
    ecl, err = [], []
    for spec_f, spec_g in members:
        ecl.append(excess_length_exponent(p_xy, spec_f, spec_g,
                                          r_tilde_x, r_tilde_y, budget).value)
        err.append(error_exponent_general(p_xy, spec_f, spec_g, budget)["min"].value)
    points = []
    for lvl in ecl_levels:
        lvl = float(lvl)
        feasible = [m for m in range(len(members)) if ecl[m] >= lvl - 1e-12]
        if not feasible:
            points.append(TradeoffPoint(lvl, None, None, False))
            continue
        best = max(feasible, key=lambda m: err[m])
        points.append(TradeoffPoint(lvl, err[best], best, True, ecl[best]))
    return points


# ---------------------------------------------------------------------------
# JSON projection
# ---------------------------------------------------------------------------

def _json_scalar(v):
    v = float(v)
    if math.isfinite(v):
        return v
    if math.isnan(v):
        return "nan"
    return "inf" if v > 0 else "-inf"


def _jsonable(x):
    if isinstance(x, ExponentResult):
        return result_to_jsonable(x)
    if isinstance(x, TradeoffPoint):
        return {"level": _json_scalar(x.level),
                "e_err": None if x.e_err is None else _json_scalar(x.e_err),
                "member_index": x.member_index,
                "feasible": bool(x.feasible),
                "member_ecl": None if x.member_ecl is None else _json_scalar(x.member_ecl)}
    if isinstance(x, JointPmf):
        return {"axes": [list(a.symbols) for a in x.axes],
                "probs": x.probs.tolist()}
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return _json_scalar(x)
    return x


def result_to_jsonable(obj) -> dict | list:
    """Project results (ExponentResult, branch dicts, trade-off points, or
    lists of them) onto JSON-serializable structures; non-finite floats
    become the strings "inf"/"-inf"/"nan"."""
    if isinstance(obj, ExponentResult):
        return {"value": _json_scalar(obj.value),
                "active_branch": obj.active_branch,
                "certified_gap": _json_scalar(obj.certified_gap),
                "argmin": None if obj.argmin is None else _jsonable(obj.argmin),
                "diagnostics": _jsonable(obj.diagnostics)}
    return _jsonable(obj)
