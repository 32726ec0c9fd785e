"""Single-stream robust coding analysis: one source is compressed under a
per-letter distortion budget against its bin sequence while the other source
is available losslessly at the decoder.

Provides the inner exponent functional zeta(Q_UX) in two equivalent forms
(an explicit minimization over the reverse channel Q_{Y|UX}, and a dual
form over an auxiliary channel V with a conjugate parameter lambda), two
lower bounds on the constrained error exponent (e_hat_bound: rate threshold,
excess-length level, and distortion all active; e_tilde_bound: distortion
only), their combination, and the threshold rates at the two excess-length
extremes.

Naming: the paper-independent quantity zeta(Q_UX) and the distortion
multiplier are distinct objects; the multiplier is always called zeta_mult.
All values are in bits. Scalar multipliers live on documented grids capped
at budget.multiplier_cap, with cap hits reported through the optional
report dict accepted by the bound operations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .optimize import DEFAULT_BUDGET, OptimizerBudget, minimize_on_box
from .probability import ConditionalPmf, JointPmf, entropy_bits, kl_bits
from .rbc import DistortionSpec

# documented grid densities for the nested-bound evaluations
ETILDE_LAM_POINTS = 33
ETILDE_ZETA_POINTS = 33
EHAT_LAM_POINTS = 9
EHAT_SCALAR_POINTS = 9
EHAT_THETA_POINTS = 16
VROW_POINTS = 7
DIST_POINTS = 9


def _rows_of(v) -> np.ndarray:
    if isinstance(v, ConditionalPmf):
        return np.asarray(v.probs, dtype=float)
    return np.asarray(v, dtype=float)


def _p_y_rows(p_xy) -> np.ndarray:
    """P(y|x) rows, shaped (|X|, |Y|); zero-mass x rows are irrelevant."""
    p = np.asarray(p_xy.probs if isinstance(p_xy, JointPmf) else p_xy, dtype=float)
    px = p.sum(axis=1)
    return np.divide(p, np.where(px > 0, px, 1.0)[:, None])


def z_matrix(v_rows: np.ndarray, lam: float, p_y_rows: np.ndarray) -> np.ndarray:
    """Z(u, x, V, lambda) for all (u, x) at once, shaped (|U|, |X|)."""
    pe = np.power(p_y_rows, 1.0 / (1.0 + lam))        # (|X|, |Y|)
    ve = np.power(_rows_of(v_rows), lam / (1.0 + lam))  # (|U|, |Y|)
    return ve @ pe.T


def z_factor(u: int, x: int, v, lam: float, p_xy: JointPmf) -> float:
    """Sum over y of P(y|x)^{1/(1+lam)} V(y|u)^{lam/(1+lam)}."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return float(z_matrix(_rows_of(v), lam, _p_y_rows(p_xy))[u, x])


@dataclass(frozen=True)
class AuxiliaryVars:
    """Auxiliary distributions and conjugate parameters of the bounds.

    v_rows: (|U|, |Y|) conditional rows of y given u; m, w: distributions
    over the bin alphabet; c: joint over bins x side letters (used only by
    the distortion-only bound); lam in [0,1]; rho, zeta_mult, theta >= 0.
    """

    v_rows: np.ndarray
    m: np.ndarray
    w: np.ndarray
    lam: float = 0.0
    rho: float = 0.0
    zeta_mult: float = 0.0
    theta: float = 0.0
    c: np.ndarray | None = None

    def __post_init__(self):
        v = _rows_of(self.v_rows)
        if np.any(v < -1e-12) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("v_rows must be row-stochastic")
        for name in ("m", "w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < -1e-12) or abs(arr.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a distribution")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "v_rows", v)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if min(self.rho, self.zeta_mult, self.theta) < 0.0:
            raise ValueError("rho, zeta_mult, theta must be nonnegative")
        if self.c is not None:
            c = np.asarray(self.c, dtype=float)
            if np.any(c < -1e-12) or abs(c.sum() - 1.0) > 1e-9:
                raise ValueError("c must be a joint distribution")
            object.__setattr__(self, "c", c)


@dataclass(frozen=True)
class RobustQuery:
    """Inputs of the constrained exponent: source, distortion budget,
    threshold rate r_tilde, and excess-length level ecl_level."""

    p_xy: JointPmf
    dist: DistortionSpec
    r_tilde: float
    ecl_level: float
    budget: OptimizerBudget = DEFAULT_BUDGET

    def __post_init__(self):
        if self.r_tilde < 0.0 or self.ecl_level < 0.0:
            raise ValueError("r_tilde and ecl_level must be nonnegative")


def s_vector(aux: AuxiliaryVars, dist: DistortionSpec, p_xy: JointPmf) -> np.ndarray:
    """S(x, M, W, V, rho, zeta_mult, lambda) for every x, shaped (|X|,).

    A bin letter whose denominator vanishes (W(u)=0 with lam>0, or Z=0) is
    excluded from the max; 0/0 counts as 0 as well.
    """
    z = z_matrix(aux.v_rows, aux.lam, _p_y_rows(p_xy))            # (|U|,|X|)
    num = np.power(aux.m, aux.rho)[:, None]
    den = (np.power(aux.w, aux.lam)[:, None]
           * np.power(2.0, aux.zeta_mult * dist.table.T)
           * np.power(z, 1.0 + aux.lam))
    ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return ratio.max(axis=0)


def s_factor(x: int, aux: AuxiliaryVars, dist: DistortionSpec, p_xy: JointPmf) -> float:
    return float(s_vector(aux, dist, p_xy)[x])


def t0_value(aux: AuxiliaryVars, dist: DistortionSpec, p_xy: JointPmf) -> float:
    """lam*H(X) - sum_x P_X(x) log2 S(x, ...): the excess-length-level-0
    threshold objective."""
    px = np.asarray(p_xy.probs, dtype=float).sum(axis=1)
    s = s_vector(aux, dist, p_xy)
    mask = px > 0
    if np.any(s[mask] <= 0):
        return math.inf
    return float(aux.lam * entropy_bits(px)
                 - np.sum(px[mask] * np.log2(s[mask])))


def t_inf_value(aux: AuxiliaryVars, dist: DistortionSpec, p_xy: JointPmf) -> float:
    """(1+lam) log2 sum_x [P_X(x)/S(x, ...)]^{1/(1+lam)}: the objective at
    the opposite excess-length extreme."""
    px = np.asarray(p_xy.probs, dtype=float).sum(axis=1)
    s = s_vector(aux, dist, p_xy)
    mask = px > 0
    if np.any(s[mask] <= 0):
        return math.inf
    total = np.sum(np.power(px[mask] / s[mask], 1.0 / (1.0 + aux.lam)))
    return float((1.0 + aux.lam) * np.log2(total))


# ---------------------------------------------------------------------------
# zeta(Q_UX): primal form
# ---------------------------------------------------------------------------

def _xlogx(a: np.ndarray) -> np.ndarray:
    return np.where(a > 0, a * np.log2(np.where(a > 0, a, 1.0)), 0.0)


def zeta_primal(q_ux, p_xy: JointPmf, budget: OptimizerBudget | None = None,
                extra_rows: tuple = ()) -> float:
    """min over Q_{Y|UX} of D(Q_XY||P_XY) + H_Q(U|X) - H_Q(U|X,Y)
    + [H_Q(U|X) - H_Q(X|U,Y)]_+, for a fixed bin/source joint Q_UX.

    +inf when Q_X puts mass outside the support of P_X. extra_rows may carry
    additional (|U|,|X|,|Y|) reverse-channel starts that are always evaluated.
    """
    budget = budget or DEFAULT_BUDGET
    q = q_ux.probs if isinstance(q_ux, JointPmf) else np.asarray(q_ux, dtype=float)
    p = np.asarray(p_xy.probs, dtype=float)
    return _zeta_primal_arrays(q, p, budget, extra_rows)


def _zeta_primal_arrays(q: np.ndarray, p: np.ndarray, budget: OptimizerBudget,
                        extra_rows: tuple = ()) -> float:
    nu, nx = q.shape
    ny = p.shape[1]
    qx = q.sum(axis=0)
    px = p.sum(axis=1)
    if np.any((qx > 1e-15) & (px <= 0)):
        return math.inf
    hu_x = float(-_xlogx(q).sum() + _xlogx(qx).sum())   # H_Q(U|X)
    p_rows = _p_y_rows(p)
    logp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)

    def value_from_rows(rows: np.ndarray) -> float:
        quxy = q[:, :, None] * rows
        qxy = quxy.sum(axis=0)
        if np.any((qxy > 1e-15) & (p <= 0)):
            return math.inf
        mask = qxy > 0
        div = float(np.sum(qxy[mask] * np.log2(qxy[mask])) - np.sum(qxy[mask] * logp[mask]))
        h_uxy = float(-_xlogx(quxy).sum())
        h_xy = float(-_xlogx(qxy).sum())
        h_uy = float(-_xlogx(quxy.sum(axis=1)).sum())
        h_u_given_xy = h_uxy - h_xy
        h_x_given_uy = h_uxy - h_uy
        return div + hu_x - h_u_given_xy + max(hu_x - h_x_given_uy, 0.0)

    # cells with q mass and more than one feasible y are the free variables;
    # rows off the support of P(.|x) would force the divergence to +inf
    supp = p_rows > 0
    forced_rows = np.tile(p_rows[None, :, :], (nu, 1, 1))
    free = [(u, x) for u in range(nu) for x in range(nx)
            if q[u, x] > 1e-15 and int(supp[x].sum()) >= 2]
    if not free:
        return value_from_rows(forced_rows)
    if ny != 2 or not all(supp[x].all() for _, x in free):
        return _zeta_primal_slsqp(q, p, forced_rows, free, value_from_rows, budget, extra_rows)

    fu = np.array([u for u, _ in free])
    fx = np.array([x for _, x in free])

    def rows_from(t: np.ndarray) -> np.ndarray:
        rows = forced_rows.copy()
        rows[fu, fx, 0] = t
        rows[fu, fx, 1] = 1.0 - t
        return rows

    def batch(pts: np.ndarray) -> np.ndarray:
        n = pts.shape[0]
        rows = np.tile(forced_rows[None], (n, 1, 1, 1))
        rows[:, fu, fx, 0] = pts
        rows[:, fu, fx, 1] = 1.0 - pts
        quxy = q[None, :, :, None] * rows
        qxy = quxy.sum(axis=1)
        bad = np.any((qxy > 1e-15) & (p[None] <= 0), axis=(1, 2))
        div = (_xlogx(qxy).sum(axis=(1, 2))
               - (qxy * logp[None]).sum(axis=(1, 2)))
        h_uxy = -_xlogx(quxy).sum(axis=(1, 2, 3))
        h_xy = -_xlogx(qxy).sum(axis=(1, 2))
        h_uy = -_xlogx(quxy.sum(axis=2)).sum(axis=(1, 2))
        base = div + hu_x - (h_uxy - h_xy)
        bracket = hu_x - (h_uxy - h_uy)
        vals = base + np.maximum(bracket, 0.0)
        return np.where(bad, np.inf, vals)

    k = len(free)
    per_dim = max(5, int(round(30_000 ** (1.0 / k))))
    if budget.grid_resolution is not None:
        per_dim = max(3, min(per_dim, budget.grid_resolution + 1))
    grids = np.stack(np.meshgrid(*([np.linspace(0.0, 1.0, per_dim)] * k),
                                 indexing="ij"), axis=-1).reshape(-1, k)
    starts = [p_rows[fx, 0]]
    for rows in extra_rows:
        starts.append(np.asarray(rows, dtype=float)[fu, fx, 0])
    pts = np.vstack([grids, np.atleast_2d(np.asarray(starts))])
    vals = batch(pts)
    order = np.argsort(vals)
    best = float(vals[order[0]])

    if budget.refine_iters > 0:
        def base_of(t):
            rows = rows_from(np.clip(t, 0.0, 1.0))
            quxy = q[:, :, None] * rows
            qxy = quxy.sum(axis=0)
            mask = qxy > 0
            if np.any(mask & (p <= 0)):
                return 1e9
            div = float(np.sum(qxy[mask] * (np.log2(qxy[mask]) - logp[mask])))
            return div + hu_x - (-_xlogx(quxy).sum() + _xlogx(qxy).sum())

        def bracket_of(t):
            rows = rows_from(np.clip(t, 0.0, 1.0))
            quxy = q[:, :, None] * rows
            h_uxy = -_xlogx(quxy).sum()
            h_uy = -_xlogx(quxy.sum(axis=1)).sum()
            return hu_x - (h_uxy - h_uy)

        seeds = [pts[i] for i in order[:3] if math.isfinite(vals[i])]
        seeds.extend(np.asarray(s, dtype=float) for s in starts)
        for t0 in seeds:
            for obj, cons in (
                (base_of, [{"type": "ineq", "fun": lambda t: -bracket_of(t)}]),
                (lambda t: base_of(t) + bracket_of(t),
                 [{"type": "ineq", "fun": bracket_of}]),
            ):
                try:
                    res = minimize(obj, t0, method="SLSQP",
                                   bounds=[(0.0, 1.0)] * k, constraints=cons,
                                   options={"maxiter": budget.refine_iters, "ftol": 1e-12})
                except (ValueError, FloatingPointError):
                    continue
                v = value_from_rows(rows_from(np.clip(res.x, 0.0, 1.0)))
                best = min(best, v)
    return best


def _zeta_primal_slsqp(q, p, forced_rows, free, value_from_rows, budget, extra_rows):
    """Fallback for non-binary y alphabets or partial supports: SLSQP over
    the flattened free rows with per-cell normalization constraints."""
    ny = p.shape[1]
    p_rows = _p_y_rows(p)
    supp = [np.flatnonzero(p_rows[x] > 0) for _, x in free]

    def rows_from(vec):
        rows = forced_rows.copy()
        off = 0
        for (u, x), s in zip(free, supp):
            seg = np.clip(vec[off:off + len(s)], 0.0, None)
            total = seg.sum()
            rows[u, x, :] = 0.0
            rows[u, x, s] = seg / total if total > 0 else 1.0 / len(s)
            off += len(s)
        return rows

    dim = sum(len(s) for s in supp)
    rng = np.random.default_rng(budget.seed)
    starts = [np.concatenate([p_rows[x][s] for (_, x), s in zip(free, supp)])]
    for rows in extra_rows:
        rows = np.asarray(rows, dtype=float)
        starts.append(np.concatenate([rows[u, x][s] for (u, x), s in zip(free, supp)]))
    for _ in range(budget.restarts):
        starts.append(np.concatenate([rng.dirichlet(np.ones(len(s))) for s in supp]))
    best = math.inf
    cons = []
    off = 0
    for s in supp:
        cons.append({"type": "eq",
                     "fun": (lambda o, k: lambda v: v[o:o + k].sum() - 1.0)(off, len(s))})
        off += len(s)
    for v0 in starts:
        best = min(best, value_from_rows(rows_from(v0)))
        try:
            res = minimize(lambda v: value_from_rows(rows_from(v)), v0,
                           method="SLSQP", bounds=[(0.0, 1.0)] * dim,
                           constraints=cons,
                           options={"maxiter": budget.refine_iters or 60, "ftol": 1e-12})
            best = min(best, value_from_rows(rows_from(res.x)))
        except (ValueError, FloatingPointError):
            pass
    return best


# ---------------------------------------------------------------------------
# zeta(Q_UX): dual form
# ---------------------------------------------------------------------------

def zeta_dual(q_ux, p_xy: JointPmf, budget: OptimizerBudget | None = None) -> float:
    """inf over the auxiliary channel V of sup over lambda in [0,1] of
    sum_ux Q(u,x) log2[Q_X(x)^{1+lam} / (P_X(x) Q_U(u)^lam)]
    - (1+lam) sum_ux Q(u,x) log2 Z(u,x,V,lam)."""
    budget = budget or DEFAULT_BUDGET
    q = q_ux.probs if isinstance(q_ux, JointPmf) else np.asarray(q_ux, dtype=float)
    p = np.asarray(p_xy.probs, dtype=float)
    nu = q.shape[0]
    ny = p.shape[1]
    qx = q.sum(axis=0)
    qu = q.sum(axis=1)
    px = p.sum(axis=1)
    if np.any((qx > 1e-15) & (px <= 0)):
        return math.inf
    p_rows = _p_y_rows(p)
    # the first sum is affine in lambda: D(Q_X||P_X) + lam*(H(Q_U) - H(Q_X))
    a0 = kl_bits(qx, px)
    b0 = entropy_bits(qu) - entropy_bits(qx)
    lam_grid = np.linspace(0.0, 1.0, 129)
    qmask = q > 1e-15

    def second_term(v_rows_batch: np.ndarray, lam: float) -> np.ndarray:
        z = np.einsum("nuy,xy->nux",
                      np.power(v_rows_batch, lam / (1.0 + lam)),
                      np.power(p_rows, 1.0 / (1.0 + lam)))
        with np.errstate(divide="ignore"):
            logz = np.where(z > 0, np.log2(np.where(z > 0, z, 1.0)), -np.inf)
        bad = np.any(qmask[None] & np.isneginf(logz), axis=(1, 2))
        tot = (q[None] * np.where(np.isneginf(logz), 0.0, logz)).sum(axis=(1, 2))
        return np.where(bad, -np.inf, tot)

    def sup_lam(v_rows: np.ndarray, polish: bool) -> float:
        batchv = v_rows[None]
        vals = np.array([a0 + lam * b0 - (1.0 + lam) * second_term(batchv, lam)[0]
                         for lam in lam_grid])
        k = int(np.argmax(vals))
        best = float(vals[k])
        if polish and math.isfinite(best):
            lo = lam_grid[max(k - 1, 0)]
            hi = lam_grid[min(k + 1, len(lam_grid) - 1)]
            res = minimize_scalar(
                lambda lam: -(a0 + lam * b0
                              - (1.0 + lam) * second_term(batchv, lam)[0]),
                bounds=(lo, hi), method="bounded",
                options={"xatol": 1e-10})
            best = max(best, float(-res.fun))
        return best

    if ny == 2:
        def fn(vflat):
            rows = np.stack([vflat, 1.0 - vflat], axis=-1)
            return sup_lam(rows, polish=True)

        def fn_batch(pts):
            rows = np.stack([pts, 1.0 - pts], axis=-1)   # (N,|U|,2)
            vals = np.full(pts.shape[0], -np.inf)
            for lam in lam_grid:
                cur = a0 + lam * b0 - (1.0 + lam) * second_term(rows, lam)
                vals = np.maximum(vals, cur)
            return vals

        value, _ = minimize_on_box(fn, [(0.0, 1.0)] * nu, budget, fn_batch=fn_batch)
        return float(value)

    # general y alphabet: alternating restarts over full rows
    rng = np.random.default_rng(budget.seed)
    best = math.inf
    starts = [np.tile(px @ p_rows, (nu, 1))]
    starts.extend(rng.dirichlet(np.ones(ny), size=nu) for _ in range(budget.restarts))
    for rows0 in starts:
        flat0 = rows0[:, :-1].reshape(-1)

        def fn(flat):
            rows = np.zeros((nu, ny))
            rows[:, :-1] = np.clip(flat.reshape(nu, ny - 1), 0.0, 1.0)
            rows[:, -1] = np.clip(1.0 - rows[:, :-1].sum(axis=1), 0.0, 1.0)
            rows /= rows.sum(axis=1, keepdims=True)
            return sup_lam(rows, polish=True)

        res = minimize(fn, flat0, method="Nelder-Mead",
                       options={"maxiter": 200 * nu * ny, "xatol": 1e-8, "fatol": 1e-12})
        best = min(best, float(res.fun))
    return best


# ---------------------------------------------------------------------------
# lower bounds on the constrained exponent
# ---------------------------------------------------------------------------

def _zeta_mult_grid(cap: float, n: int) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(1e-3, cap, n - 1)])


def e_tilde_bound(p_xy: JointPmf, dist: DistortionSpec,
                  budget: OptimizerBudget | None = None,
                  report: dict | None = None) -> float:
    """Distortion-only lower bound: sup over lam of inf over zeta_mult and
    the auxiliary joint C of
    zeta_mult*D - (1+lam) log2 sum_x min_u [2^{zeta_mult d(x,u)}
    * sum_y P(x,y)^{1/(1+lam)} C(u,y)^{lam/(1+lam)}].

    Can be arbitrarily negative when the distortion level is infeasible;
    zeta_mult is capped at budget.multiplier_cap (cap hits are reported).
    """
    budget = budget or DEFAULT_BUDGET
    p = np.asarray(p_xy.probs, dtype=float)
    nx, ny = p.shape
    nu = dist.table.shape[1]
    level = dist.level
    d_xu = dist.table
    cap = budget.multiplier_cap
    zgrid = _zeta_mult_grid(cap, ETILDE_ZETA_POINTS)
    lam_grid = np.linspace(0.0, 1.0, ETILDE_LAM_POINTS)

    from .probability import simplex_grid_array
    res = budget.grid_resolution
    if res is None:
        res = 24
        while math.comb(res + nu * ny - 1, nu * ny - 1) > 4000 and res > 4:
            res -= 4
    cgrid = simplex_grid_array(nu * ny, res).reshape(-1, nu, ny)

    def inner_values(lam: float) -> tuple:
        pq = np.power(p, 1.0 / (1.0 + lam))                     # (|X|,|Y|)
        cq = np.power(cgrid, lam / (1.0 + lam))                 # (N,|U|,|Y|)
        sums = np.einsum("nuy,xy->nux", cq, pq)
        factor = np.power(2.0, zgrid[:, None, None] * d_xu.T[None])  # (K,|U|,|X|)
        term = np.min(factor[:, None] * sums[None], axis=2)     # (K,N,|X|)
        tot = term.sum(axis=2)
        with np.errstate(divide="ignore"):
            vals = zgrid[:, None] * level - (1.0 + lam) * np.log2(tot)
        vals = np.where(np.isnan(vals), np.inf, vals)
        k, n = np.unravel_index(np.argmin(vals), vals.shape)
        return float(vals[k, n]), float(zgrid[k]), cgrid[n]

    def refine(lam: float, z0: float, c0: np.ndarray) -> float:
        def obj(vec):
            zm = max(vec[0], 0.0)
            c = np.clip(vec[1:], 0.0, None).reshape(nu, ny)
            tot = c.sum()
            if tot <= 0:
                return np.inf
            c = c / tot
            sums = np.einsum("uy,xy->ux", np.power(c, lam / (1.0 + lam)),
                             np.power(p, 1.0 / (1.0 + lam)))
            term = np.min(np.power(2.0, zm * d_xu.T) * sums, axis=0)
            total = term.sum()
            if total <= 0:
                return np.inf
            return zm * level - (1.0 + lam) * np.log2(total)

        x0 = np.concatenate([[z0], c0.reshape(-1)])
        res_ = minimize(obj, x0, method="Nelder-Mead",
                        options={"maxiter": 400, "xatol": 1e-9, "fatol": 1e-12})
        return min(obj(x0), float(res_.fun))

    best, best_grid, arg = -math.inf, -math.inf, None
    for lam in lam_grid:
        val, z0, c0 = inner_values(lam)
        best_grid = max(best_grid, val)
        if budget.refine_iters > 0:
            val = min(val, refine(lam, z0, c0))
        if val > best:
            best, arg = val, (lam, z0)
    if report is not None:
        report.update({"lambda": arg[0], "zeta_mult": arg[1],
                       "cap_hit": bool(arg[1] >= 0.98 * cap),
                       "refine_gap": float(best_grid - best)})
    return best


def _interior_rows(dim: int, npts: int) -> np.ndarray:
    """Interior grid of distributions on a dim-simplex (endpoints clipped so
    the nested saddle never evaluates boundary conventions)."""
    if dim == 2:
        t = np.linspace(0.0, 1.0, npts)
        t = np.clip(t, 1e-3, 1.0 - 1e-3)
        return np.stack([t, 1.0 - t], axis=1)
    from .probability import simplex_grid_array
    res = npts - 1
    while math.comb(res + dim - 1, dim - 1) > 300 and res > 2:
        res -= 1
    pts = np.clip(simplex_grid_array(dim, res), 1e-3, None)
    return pts / pts.sum(axis=1, keepdims=True)


def _lam_grid_ehat() -> np.ndarray:
    return np.linspace(0.0, 1.0, EHAT_LAM_POINTS)


def _saddle_tensor(p_xy: JointPmf, dist: DistortionSpec, cap: float):
    """Static pieces shared by the e_hat and threshold tensor sweeps."""
    p = np.asarray(p_xy.probs, dtype=float)
    px = p.sum(axis=1)
    nu = dist.table.shape[1]
    ny = p.shape[1]
    p_rows = _p_y_rows(p_xy)
    vrows = _interior_rows(ny, VROW_POINTS)          # candidate V rows
    vcombo = np.array(list(itertools.product(range(len(vrows)), repeat=nu)))
    mgrid = _interior_rows(nu, DIST_POINTS)
    wgrid = _interior_rows(nu, DIST_POINTS)
    return p, px, p_rows, vrows, vcombo, mgrid, wgrid


def _log2s_slab(rho: float, zvals: np.ndarray, lam: float, dist: DistortionSpec,
                log2z_rows: np.ndarray, vcombo: np.ndarray,
                mgrid: np.ndarray, wgrid: np.ndarray) -> np.ndarray:
    """log2 S on the grid, shaped (nz, nV, nM, nW, |X|).

    log2z_rows: (nrows, |X|) table of log2 Z for each candidate V row at lam.
    """
    d_ux = dist.table.T                                   # (|U|,|X|)
    log2m = np.log2(mgrid)                                # (nM,|U|)
    log2w = np.log2(wgrid)
    lz = log2z_rows[vcombo]                               # (nV,|U|,|X|)
    # G[z,V,m,w,u,x] = rho*log2M - lam*log2W - z*d - (1+lam)*log2Z
    g = (rho * log2m[None, None, :, None, :, None]
         - lam * log2w[None, None, None, :, :, None]
         - zvals[:, None, None, None, None, None] * d_ux[None, None, None, None, :, :]
         - (1.0 + lam) * lz[None, :, None, None, :, :])
    return g.max(axis=4)


def _psi_curve(p_xy: JointPmf, dist: DistortionSpec, r_tilde: float,
               budget: OptimizerBudget) -> tuple:
    """psi(theta) = sup_lam inf_{rho, zeta_mult} {rho*r_tilde
    + zeta_mult*D - (1+theta+lam) * (the V/M/W saddle of the log-sum)}
    on a fixed theta grid. e_hat at any excess-length level is then
    max_theta [psi(theta) - theta*level], which is non-increasing in the
    level by construction."""
    cap = budget.multiplier_cap
    p, px, p_rows, vrows, vcombo, mgrid, wgrid = _saddle_tensor(p_xy, dist, cap)
    theta_grid = np.concatenate([[0.0], np.geomspace(0.05, cap, EHAT_THETA_POINTS)])
    rz = _zeta_mult_grid(cap, EHAT_SCALAR_POINTS)
    lam_grid = _lam_grid_ehat()
    log2px = np.where(px > 0, np.log2(np.where(px > 0, px, 1.0)), -np.inf)
    level_mask = px > 0

    # the V/M/W grid tensor depends on (lam, rho, zeta_mult) but not theta,
    # so it is built once per lam and swept over the whole theta grid
    psi = np.full(len(theta_grid), -math.inf)
    diag = {"cap_hit": False}
    for lam in lam_grid:
        pe = np.power(p_rows, 1.0 / (1.0 + lam))
        ve = np.power(vrows, lam / (1.0 + lam))
        log2z_rows = np.log2(np.maximum(ve @ pe.T, 1e-300))
        slabs = np.stack([_log2s_slab(rho, rz, lam, dist, log2z_rows,
                                      vcombo, mgrid, wgrid) for rho in rz])
        # slabs: (nrho, nz, nV, nM, nW, |X|)
        for ti, theta in enumerate(theta_grid):
            a = 1.0 / (1.0 + theta + lam)
            expo = a * ((1.0 + theta) * log2px - slabs)
            tot = np.where(level_mask, np.power(2.0, expo), 0.0).sum(axis=5)
            lsum = np.log2(np.maximum(tot, 1e-300))
            # innermost sup over W, then inf over M, then sup over V
            lam_val = lsum.max(axis=4).min(axis=3).max(axis=2)
            cand = (rz[:, None] * r_tilde + rz[None, :] * dist.level
                    - (1.0 + theta + lam) * lam_val)
            ri, k = np.unravel_index(np.argmin(cand), cand.shape)
            inner = float(cand[ri, k])
            if inner > psi[ti]:
                psi[ti] = inner
                if rz[ri] >= 0.98 * cap or rz[k] >= 0.98 * cap:
                    diag["cap_hit"] = True
    return theta_grid, psi, diag


def e_hat_bound(query: RobustQuery, report: dict | None = None) -> float:
    """Rate/excess-length/distortion lower bound, evaluated via the
    theta-grid sweep (see _psi_curve)."""
    theta_grid, psi, diag = _psi_curve(query.p_xy, query.dist, query.r_tilde,
                                       query.budget)
    vals = psi - theta_grid * query.ecl_level
    k = int(np.argmax(vals))
    if report is not None:
        report.update({"theta": float(theta_grid[k]), "cap_hit": diag["cap_hit"],
                       "theta_cap_hit": bool(k == len(theta_grid) - 1)})
    return float(vals[k])


def e_hat_levels(p_xy: JointPmf, dist: DistortionSpec, r_tilde: float,
                 levels, budget: OptimizerBudget | None = None) -> list:
    """e_hat at several excess-length levels from one shared psi curve;
    exactly non-increasing for ascending levels."""
    budget = budget or DEFAULT_BUDGET
    theta_grid, psi, _ = _psi_curve(p_xy, dist, r_tilde, budget)
    return [float(np.max(psi - theta_grid * lv)) for lv in levels]


def combined_error_exponent(query: RobustQuery, report: dict | None = None) -> float:
    """min of the two lower bounds (the distortion-only bound is evaluated
    at excess-length level zero, which dominates all levels)."""
    sub_h, sub_t = {}, {}
    eh = e_hat_bound(query, report=sub_h)
    et = e_tilde_bound(query.p_xy, query.dist, query.budget, report=sub_t)
    if report is not None:
        report.update({"e_hat": eh, "e_tilde": et,
                       "e_hat_report": sub_h, "e_tilde_report": sub_t})
    return min(eh, et)


def combined_levels(p_xy: JointPmf, dist: DistortionSpec, r_tilde: float,
                    levels, budget: OptimizerBudget | None = None) -> list:
    budget = budget or DEFAULT_BUDGET
    ehs = e_hat_levels(p_xy, dist, r_tilde, levels, budget)
    et = e_tilde_bound(p_xy, dist, budget)
    return [min(eh, et) for eh in ehs]


def threshold_rate(p_xy: JointPmf, dist: DistortionSpec, regime: str,
                   budget: OptimizerBudget | None = None,
                   report: dict | None = None) -> float:
    """Smallest threshold rate with a positive exponent at the two
    excess-length extremes:

    inf over lam of sup over s >= 0 and zeta_mult >= 0 of
    s * [ (V/M/W saddle of T) - zeta_mult*D ],  with rho = 1/s,
    where T is the level-0 objective (regime "ecl_zero") or the
    level-infinity objective (regime "ecl_infinity"). The s=0 endpoint
    contributes 0, so the result is nonnegative.
    """
    if regime not in ("ecl_zero", "ecl_infinity"):
        raise ValueError("regime must be ecl_zero or ecl_infinity")
    budget = budget or DEFAULT_BUDGET
    cap = budget.multiplier_cap
    p, px, p_rows, vrows, vcombo, mgrid, wgrid = _saddle_tensor(p_xy, dist, cap)
    sgrid = np.geomspace(1.0 / cap, cap, 2 * EHAT_SCALAR_POINTS - 1)
    zvals = _zeta_mult_grid(cap, EHAT_SCALAR_POINTS)
    lam_grid = _lam_grid_ehat()
    log2px = np.where(px > 0, np.log2(np.where(px > 0, px, 1.0)), -np.inf)
    mask = px > 0

    best_lam, arg = math.inf, None
    for lam in lam_grid:
        pe = np.power(p_rows, 1.0 / (1.0 + lam))
        ve = np.power(vrows, lam / (1.0 + lam))
        log2z_rows = np.log2(np.maximum(ve @ pe.T, 1e-300))
        sup_sz = 0.0  # the s=0 endpoint
        sup_arg = (0.0, 0.0)
        for s in sgrid:
            rho = 1.0 / s
            log2s = _log2s_slab(rho, zvals, lam, dist, log2z_rows,
                                vcombo, mgrid, wgrid)          # (nz,nV,nM,nW,|X|)
            if regime == "ecl_zero":
                t_val = (lam * entropy_bits(px)
                         - np.where(mask[None, None, None, None, :], px * log2s, 0.0).sum(axis=4))
            else:
                expo = (log2px[None, None, None, None, :] - log2s) / (1.0 + lam)
                tot = np.where(mask[None, None, None, None, :],
                               np.power(2.0, expo), 0.0).sum(axis=4)
                t_val = (1.0 + lam) * np.log2(np.maximum(tot, 1e-300))
            # innermost sup over W, then inf over M, then sup over V
            saddle = t_val.max(axis=3).min(axis=2).max(axis=1)
            cand = s * (saddle - zvals * dist.level)
            k = int(np.argmax(cand))
            if cand[k] > sup_sz:
                sup_sz = float(cand[k])
                sup_arg = (s, float(zvals[k]))
        if sup_sz < best_lam:
            best_lam, arg = sup_sz, (lam,) + sup_arg
    if report is not None:
        report.update({"lambda": arg[0], "s": arg[1], "zeta_mult": arg[2],
                       "cap_hit": bool(arg[1] >= 0.98 * cap or arg[2] >= 0.98 * cap)})
    return best_lam
