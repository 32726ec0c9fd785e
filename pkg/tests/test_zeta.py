"""Single-stream robust-coding bounds: zeta primal/dual, S/Z/T factors,
the two exponent lower bounds, and threshold rates, checked against
hand values and fresh in-test grid reimplementations."""

import itertools
import math

import numpy as np
import pytest

from swbin.optimize import OptimizerBudget
from swbin.probability import (
    Alphabet,
    JointPmf,
    doubly_symmetric_binary,
    entropy_bits,
    kl_bits,
    simplex_grid_array,
)
from swbin.rbc import DistortionSpec
from swbin.zeta import (
    DIST_POINTS,
    EHAT_LAM_POINTS,
    EHAT_SCALAR_POINTS,
    EHAT_THETA_POINTS,
    ETILDE_LAM_POINTS,
    ETILDE_ZETA_POINTS,
    VROW_POINTS,
    AuxiliaryVars,
    RobustQuery,
    _interior_rows,
    _zeta_mult_grid,
    combined_error_exponent,
    combined_levels,
    e_hat_bound,
    e_hat_levels,
    e_tilde_bound,
    s_factor,
    s_vector,
    t0_value,
    t_inf_value,
    threshold_rate,
    z_factor,
    zeta_dual,
    zeta_primal,
)

BIT = Alphabet((0, 1))


def skew_source():
    """All-positive asymmetric joint so axis mixups cannot cancel."""
    return JointPmf((BIT, BIT), np.array([[0.42, 0.08], [0.15, 0.35]]))


def skew_distortion(level=0.0):
    return DistortionSpec(BIT, BIT, np.array([[0.0, 1.0], [0.7, 0.2]]), level)


# ---------------------------------------------------------------------------
# Z / S / T factors
# ---------------------------------------------------------------------------

def test_z_factor_lambda_zero_is_one():
    p = skew_source()
    v = np.array([[0.9, 0.1], [0.3, 0.7]])
    for u in range(2):
        for x in range(2):
            assert abs(z_factor(u, x, v, 0.0, p) - 1.0) < 1e-12


def test_z_factor_matched_rows_is_one():
    p = doubly_symmetric_binary(0.25)
    rows = np.array([[0.75, 0.25], [0.75, 0.25]])  # V(.|u) = P(.|x=0)
    for lam in (0.0, 0.3, 1.0):
        assert abs(z_factor(0, 0, rows, lam, p) - 1.0) < 1e-12


def test_z_factor_half_half_against_point_mass():
    # lam=1, P(.|x)=(1/2,1/2), V(.|u)=(1,0): sqrt(1/2) + 0
    p = JointPmf((BIT, BIT), np.array([[0.25, 0.25], [0.25, 0.25]]))
    v = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert abs(z_factor(0, 0, v, 1.0, p) - math.sqrt(0.5)) < 1e-12


def test_z_factor_rejects_bad_lambda():
    p = skew_source()
    v = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        z_factor(0, 0, v, 1.5, p)


def test_s_factor_all_multipliers_zero_is_one():
    p = skew_source()
    aux = AuxiliaryVars(v_rows=np.array([[0.6, 0.4], [0.2, 0.8]]),
                        m=np.array([0.5, 0.5]), w=np.array([0.4, 0.6]))
    for x in range(2):
        assert abs(s_factor(x, aux, skew_distortion(), p) - 1.0) < 1e-12


def test_s_factor_singleton_bin_direct():
    u1 = Alphabet(("u",))
    p = skew_source()
    dist = DistortionSpec(BIT, u1, np.array([[0.3], [0.9]]))
    aux = AuxiliaryVars(v_rows=np.array([[0.5, 0.5]]), m=np.array([1.0]),
                        w=np.array([1.0]), lam=0.4, rho=1.3, zeta_mult=0.7)
    z00 = z_factor(0, 0, aux.v_rows, 0.4, p)
    want = 1.0 / (2.0 ** (0.7 * 0.3) * z00 ** 1.4)
    assert abs(s_factor(0, aux, dist, p) - want) < 1e-12


def test_s_factor_binary_spot_recomputation():
    p = skew_source()
    dist = skew_distortion()
    aux = AuxiliaryVars(v_rows=np.array([[0.7, 0.3], [0.2, 0.8]]),
                        m=np.array([0.6, 0.4]), w=np.array([0.3, 0.7]),
                        lam=0.5, rho=1.2, zeta_mult=0.8)
    for x in range(2):
        vals = []
        for u in range(2):
            z = z_factor(u, x, aux.v_rows, aux.lam, p)
            vals.append(aux.m[u] ** aux.rho
                        / (aux.w[u] ** aux.lam
                           * 2.0 ** (aux.zeta_mult * dist.table[x, u])
                           * z ** (1.0 + aux.lam)))
        assert abs(s_factor(x, aux, dist, p) - max(vals)) < 1e-12


def test_s_factor_excludes_zero_denominator_bins():
    # W(u=1)=0 with lam>0 knocks u=1 out of the max
    p = skew_source()
    dist = skew_distortion()
    aux = AuxiliaryVars(v_rows=np.array([[0.7, 0.3], [0.2, 0.8]]),
                        m=np.array([0.5, 0.5]), w=np.array([1.0, 0.0]),
                        lam=0.5, rho=1.0, zeta_mult=0.5)
    z0 = z_factor(0, 0, aux.v_rows, 0.5, p)
    want = 0.5 / (1.0 * 2.0 ** (0.5 * dist.table[0, 0]) * z0 ** 1.5)
    assert abs(s_factor(0, aux, dist, p) - want) < 1e-12


def test_auxiliary_vars_validation():
    ok = dict(v_rows=np.array([[0.5, 0.5]]), m=np.array([1.0]), w=np.array([1.0]))
    with pytest.raises(ValueError):
        AuxiliaryVars(**{**ok, "lam": 1.2})
    with pytest.raises(ValueError):
        AuxiliaryVars(**{**ok, "rho": -0.1})
    with pytest.raises(ValueError):
        AuxiliaryVars(v_rows=np.array([[0.7, 0.7]]), m=np.array([1.0]),
                      w=np.array([1.0]))
    with pytest.raises(ValueError):
        AuxiliaryVars(**{**ok, "c": np.array([[0.5, 0.1], [0.1, 0.1]])})


def test_robust_query_validation():
    with pytest.raises(ValueError):
        RobustQuery(p_xy=skew_source(), dist=skew_distortion(),
                    r_tilde=-0.2, ecl_level=0.0)


def test_t0_point_mass_source():
    # X is a point mass: T0 = -log2 S at that letter
    p = JointPmf((BIT, BIT), np.array([[0.6, 0.4], [0.0, 0.0]]))
    dist = skew_distortion()
    aux = AuxiliaryVars(v_rows=np.array([[0.7, 0.3], [0.4, 0.6]]),
                        m=np.array([0.6, 0.4]), w=np.array([0.5, 0.5]),
                        lam=0.8, rho=2.0, zeta_mult=1.1)
    want = -math.log2(s_factor(0, aux, dist, p))
    assert abs(t0_value(aux, dist, p) - want) < 1e-12


def test_t_values_spot_recomputation():
    p = skew_source()
    dist = skew_distortion()
    aux = AuxiliaryVars(v_rows=np.array([[0.7, 0.3], [0.2, 0.8]]),
                        m=np.array([0.6, 0.4]), w=np.array([0.3, 0.7]),
                        lam=0.5, rho=1.2, zeta_mult=0.8)
    px = np.asarray(p.probs).sum(axis=1)
    s = s_vector(aux, dist, p)
    t0 = 0.5 * entropy_bits(px) - float(np.sum(px * np.log2(s)))
    ti = 1.5 * math.log2(float(np.sum((px / s) ** (1 / 1.5))))
    assert abs(t0_value(aux, dist, p) - t0) < 1e-12
    assert abs(t_inf_value(aux, dist, p) - ti) < 1e-12


# ---------------------------------------------------------------------------
# zeta primal / dual
# ---------------------------------------------------------------------------

def test_zeta_primal_singleton_bin_is_marginal_divergence():
    u1 = Alphabet(("u",))
    p = doubly_symmetric_binary(0.25)
    for qx0 in (0.5, 0.3, 0.85):
        q = JointPmf((u1, BIT), np.array([[qx0, 1 - qx0]]))
        want = kl_bits(np.array([qx0, 1 - qx0]), np.array([0.5, 0.5]))
        assert abs(zeta_primal(q, p) - want) < 1e-9


def test_zeta_dual_singleton_bin_is_marginal_divergence():
    u1 = Alphabet(("u",))
    p = doubly_symmetric_binary(0.25)
    q = JointPmf((u1, BIT), np.array([[0.3, 0.7]]))
    want = kl_bits(np.array([0.3, 0.7]), np.array([0.5, 0.5]))
    assert abs(zeta_dual(q, p) - want) < 2e-3


def test_zeta_primal_matched_independent_bin_is_zero():
    # Q_UX = q_u (x) P_X with small H(U): divergence and entropy terms vanish
    p = doubly_symmetric_binary(0.25)
    q = JointPmf((BIT, BIT), np.outer([0.95, 0.05], [0.5, 0.5]))
    v = zeta_primal(q, p)
    assert -1e-12 <= v < 1e-9


def test_zeta_primal_nonnegative_on_randoms():
    rng = np.random.default_rng(7)
    p = skew_source()
    for _ in range(5):
        q = JointPmf((BIT, BIT), rng.dirichlet(np.ones(4)).reshape(2, 2))
        assert zeta_primal(q, p) >= -1e-12


def test_zeta_primal_off_support_is_inf():
    p = JointPmf((BIT, BIT), np.array([[0.6, 0.4], [0.0, 0.0]]))
    q = JointPmf((BIT, BIT), np.array([[0.2, 0.3], [0.1, 0.4]]))
    assert math.isinf(zeta_primal(q, p))
    assert math.isinf(zeta_dual(q, p))


def zeta_scan_oracle(q, p, npts):
    """Fresh dense scan over the four reverse-channel rows (binary case)."""
    t = np.linspace(0.0, 1.0, npts)
    grids = np.meshgrid(t, t, t, t, indexing="ij")
    rows0 = np.stack([g.reshape(-1) for g in grids], axis=1)  # (N,4): Q(y=0|u,x)
    qx = q.sum(axis=0)
    hu_x = entropy_bits(q.reshape(-1)) - entropy_bits(qx)

    def ent(a, axis):
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(a > 0, np.log2(np.where(a > 0, a, 1.0)), 0.0)
        return -(a * lg).sum(axis=axis)

    best = math.inf
    for chunk in np.array_split(rows0, 8):
        rows = chunk.reshape(-1, 2, 2)                       # (N,|U|,|X|)
        quxy = q[None, :, :, None] * np.stack([rows, 1 - rows], axis=3)
        qxy = quxy.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(qxy > 0, qxy / np.where(p > 0, p, 1.0), 1.0)
            div = np.where(qxy > 0, qxy * np.log2(ratio), 0.0).sum(axis=(1, 2))
        bad = ((qxy > 1e-15) & (p[None] <= 0)).any(axis=(1, 2))
        h_uxy = ent(quxy.reshape(len(rows), -1), 1)
        h_xy = ent(qxy.reshape(len(rows), -1), 1)
        h_uy = ent(quxy.sum(axis=2).reshape(len(rows), -1), 1)
        vals = (div + hu_x - (h_uxy - h_xy)
                + np.maximum(hu_x - (h_uxy - h_uy), 0.0))
        vals = np.where(bad, np.inf, vals)
        best = min(best, float(vals.min()))
    return best


def test_zeta_primal_grid_oracle_independent_uniform():
    # Q_X = P_X with U uniform and independent: bracket governs the value
    p = doubly_symmetric_binary(0.25)
    q = np.full((2, 2), 0.25)
    got = zeta_primal(JointPmf((BIT, BIT), q), p)
    oracle = zeta_scan_oracle(q, np.asarray(p.probs), 34)
    assert got > 0.0
    assert got <= oracle + 1e-9          # refinement only improves on the scan
    assert abs(got - oracle) < 3e-3


def test_zeta_primal_dual_agreement_randoms():
    rng = np.random.default_rng(42)
    p = doubly_symmetric_binary(0.2)
    for _ in range(5):
        q = JointPmf((BIT, BIT), rng.dirichlet(np.ones(4)).reshape(2, 2))
        zp = zeta_primal(q, p)
        zd = zeta_dual(q, p)
        assert abs(zp - zd) <= 2e-3


def test_zeta_dual_dominates_marginal_divergence():
    # the lam=0 slice of the dual objective is exactly D(Q_X || P_X)
    rng = np.random.default_rng(9)
    p = skew_source()
    px = np.asarray(p.probs).sum(axis=1)
    for _ in range(4):
        q = JointPmf((BIT, BIT), rng.dirichlet(np.ones(4)).reshape(2, 2))
        qx = np.asarray(q.probs).sum(axis=0)
        assert zeta_dual(q, p) >= kl_bits(qx, px) - 1e-9


# ---------------------------------------------------------------------------
# e_tilde: distortion-only bound
# ---------------------------------------------------------------------------

def e_tilde_oracle(p_xy, dist, cap=32.0):
    """Fresh reimplementation of the documented grid evaluation."""
    p = np.asarray(p_xy.probs, float)
    nu = dist.table.shape[1]
    ny = p.shape[1]
    d = np.asarray(dist.table, float)                     # (|X|,|U|)
    zg = _zeta_mult_grid(cap, ETILDE_ZETA_POINTS)
    res = 24
    while math.comb(res + nu * ny - 1, nu * ny - 1) > 4000 and res > 4:
        res -= 4
    cgrid = simplex_grid_array(nu * ny, res).reshape(-1, nu, ny)
    best = -math.inf
    for lam in np.linspace(0.0, 1.0, ETILDE_LAM_POINTS):
        pq = p ** (1.0 / (1.0 + lam))
        cq = cgrid ** (lam / (1.0 + lam))
        sums = np.tensordot(cq, pq, axes=([2], [1]))      # (N,|U|,|X|)
        lam_best = math.inf
        for zm in zg:
            per_u = np.stack([2.0 ** (zm * d[:, u]) * sums[:, u, :]
                              for u in range(nu)])        # (|U|,N,|X|)
            tot = per_u.min(axis=0).sum(axis=1)
            with np.errstate(divide="ignore"):
                vals = zm * dist.level - (1.0 + lam) * np.log2(tot)
            vals = np.where(np.isnan(vals), np.inf, vals)
            lam_best = min(lam_best, float(vals.min()))
        best = max(best, lam_best)
    return best


def test_e_tilde_matches_fresh_grid_oracle():
    p = skew_source()
    dist = skew_distortion(level=0.15)
    got = e_tilde_bound(p, dist, OptimizerBudget(refine_iters=0))
    assert abs(got - e_tilde_oracle(p, dist)) < 1e-9


def test_e_tilde_refinement_never_raises_the_value():
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=0.1)
    full = e_tilde_bound(p, dist)
    grid_only = e_tilde_bound(p, dist, OptimizerBudget(refine_iters=0))
    assert full <= grid_only + 1e-12


def test_e_tilde_slack_distortion_nonnegative():
    # Hamming with |U| = |X|: min_u d(x,u) = 0, so the lam=0 slice pins 0
    p = doubly_symmetric_binary(0.2)
    for lv in (0.0, 0.1, 0.3):
        assert e_tilde_bound(p, DistortionSpec.hamming(BIT, level=lv)) >= -1e-12


def test_e_tilde_zero_distortion_collapse_and_monotone_in_level():
    p = doubly_symmetric_binary(0.2)
    vals = [e_tilde_bound(p, DistortionSpec.hamming(BIT, level=lv))
            for lv in (0.0, 0.1, 0.3)]
    assert abs(vals[0]) < 1e-9
    assert vals[0] <= vals[1] + 1e-9 <= vals[2] + 2e-9


def test_e_tilde_report_fields():
    rep = {}
    e_tilde_bound(doubly_symmetric_binary(0.2),
                  DistortionSpec.hamming(BIT, level=0.1), report=rep)
    assert set(rep) == {"lambda", "zeta_mult", "cap_hit", "refine_gap"}
    assert rep["refine_gap"] >= -1e-12
    assert not rep["cap_hit"]


# ---------------------------------------------------------------------------
# e_hat: rate / excess-length / distortion bound
# ---------------------------------------------------------------------------

def e_hat_oracle(p_xy, dist, r_tilde, ecl_level, cap=32.0):
    """Fresh reimplementation of the documented theta-grid sweep."""
    p = np.asarray(p_xy.probs, float)
    px = p.sum(axis=1)
    prows = p / px[:, None]
    d = np.asarray(dist.table, float)                     # (|X|,|U|)
    nx, ny = p.shape
    nu = d.shape[1]
    vrows = _interior_rows(ny, VROW_POINTS)
    mg, wg = _interior_rows(nu, DIST_POINTS), _interior_rows(nu, DIST_POINTS)
    log2m, log2w = np.log2(mg), np.log2(wg)
    rz = _zeta_mult_grid(cap, EHAT_SCALAR_POINTS)
    thetas = np.concatenate([[0.0], np.geomspace(0.05, cap, EHAT_THETA_POINTS)])
    combos = list(itertools.product(range(len(vrows)), repeat=nu))
    psi = np.full(len(thetas), -math.inf)
    for lam in np.linspace(0.0, 1.0, EHAT_LAM_POINTS):
        zrows = np.array([[sum(prows[x, y] ** (1 / (1 + lam))
                               * vr[y] ** (lam / (1 + lam)) for y in range(ny))
                           for x in range(nx)] for vr in vrows])
        lzrows = np.log2(np.maximum(zrows, 1e-300))
        inner = np.full(len(thetas), math.inf)
        for rho in rz:
            for zm in rz:
                log2s = np.empty((len(combos), len(mg), len(wg), nx))
                for ci, combo in enumerate(combos):
                    term = -zm * d.T - (1 + lam) * lzrows[list(combo)]
                    g = (rho * log2m[:, None, :, None]
                         - lam * log2w[None, :, :, None]
                         + term[None, None, :, :])        # (nM,nW,|U|,|X|)
                    log2s[ci] = g.max(axis=2)
                for ti, theta in enumerate(thetas):
                    a = 1.0 / (1.0 + theta + lam)
                    tot = (2.0 ** (a * ((1 + theta) * np.log2(px) - log2s))).sum(axis=3)
                    sad = np.log2(tot).max(axis=2).min(axis=1).max()
                    cand = rho * r_tilde + zm * dist.level - (1 + theta + lam) * sad
                    inner[ti] = min(inner[ti], cand)
        psi = np.maximum(psi, inner)
    return float(np.max(psi - thetas * ecl_level)), psi, thetas


def test_e_hat_matches_fresh_grid_oracle():
    p = skew_source()
    dist = skew_distortion(level=0.15)
    want, psi, thetas = e_hat_oracle(p, dist, 0.8, 0.05)
    got = e_hat_bound(RobustQuery(p_xy=p, dist=dist, r_tilde=0.8, ecl_level=0.05))
    assert abs(got - want) < 1e-9
    # the shared psi curve reproduces every level of the sweep
    levels = [0.0, 0.02, 0.1, 0.4]
    got_levels = e_hat_levels(p, dist, 0.8, levels)
    for lv, gv in zip(levels, got_levels):
        assert abs(gv - float(np.max(psi - thetas * lv))) < 1e-9


def test_e_hat_all_slack_nonnegative():
    p = doubly_symmetric_binary(0.2)
    q = RobustQuery(p_xy=p, dist=DistortionSpec.hamming(BIT, level=1.0),
                    r_tilde=1.0, ecl_level=0.0)
    assert e_hat_bound(q) >= -1e-9


def test_e_hat_monotone_in_level_rate_and_distortion():
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=0.1)
    levels = [0.0, 0.01, 0.05, 0.1, 0.3, 1.0]
    vals = e_hat_levels(p, dist, 0.8, levels)
    assert all(vals[i] >= vals[i + 1] - 1e-12 for i in range(len(vals) - 1))
    # nondecreasing in the rate and distortion slack (multipliers are >= 0)
    by_rate = [e_hat_bound(RobustQuery(p_xy=p, dist=dist, r_tilde=r, ecl_level=0.05))
               for r in (0.6, 0.8, 1.0)]
    assert by_rate[0] <= by_rate[1] + 1e-12 <= by_rate[2] + 2e-12
    by_d = [e_hat_bound(RobustQuery(p_xy=p, dist=dist.with_level(lv),
                                    r_tilde=0.8, ecl_level=0.05))
            for lv in (0.05, 0.1, 0.2)]
    assert by_d[0] <= by_d[1] + 1e-12 <= by_d[2] + 2e-12


def test_e_hat_report_fields():
    rep = {}
    p = doubly_symmetric_binary(0.2)
    e_hat_bound(RobustQuery(p_xy=p, dist=DistortionSpec.hamming(BIT, level=0.1),
                            r_tilde=0.8, ecl_level=0.05), report=rep)
    assert set(rep) == {"theta", "cap_hit", "theta_cap_hit"}
    assert rep["theta"] >= 0.0


# ---------------------------------------------------------------------------
# combination and thresholds
# ---------------------------------------------------------------------------

def test_combined_is_min_of_the_two_bounds():
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=0.1)
    q = RobustQuery(p_xy=p, dist=dist, r_tilde=0.8, ecl_level=0.05)
    rep = {}
    got = combined_error_exponent(q, report=rep)
    assert abs(got - min(rep["e_hat"], rep["e_tilde"])) < 1e-12
    assert abs(rep["e_hat"] - e_hat_bound(q)) < 1e-12
    assert abs(rep["e_tilde"] - e_tilde_bound(p, dist)) < 1e-12


def test_combined_zero_distortion_bound_pins_zero():
    # e_tilde = 0 at level 0 for Hamming, so the combination cannot exceed 0
    p = doubly_symmetric_binary(0.2)
    q = RobustQuery(p_xy=p, dist=DistortionSpec.hamming(BIT, level=0.0),
                    r_tilde=1.0, ecl_level=0.0)
    assert abs(combined_error_exponent(q)) < 1e-9


def test_combined_levels_non_increasing():
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=0.1)
    vals = combined_levels(p, dist, 0.8, [0.0, 0.02, 0.05, 0.1, 0.25, 0.6])
    assert all(vals[i] >= vals[i + 1] - 1e-12 for i in range(len(vals) - 1))


def test_threshold_rejects_unknown_regime():
    with pytest.raises(ValueError):
        threshold_rate(doubly_symmetric_binary(0.2),
                       DistortionSpec.hamming(BIT), "sideways")


def test_threshold_slack_distortion_is_tiny():
    # any reconstruction is within distortion 1, so nearly no rate is needed
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=1.0)
    assert threshold_rate(p, dist, "ecl_zero") <= 0.05
    assert threshold_rate(p, dist, "ecl_infinity") <= 0.05


def test_threshold_orders_and_sign_consistency():
    p = doubly_symmetric_binary(0.2)
    dist = DistortionSpec.hamming(BIT, level=0.1)
    thr0 = threshold_rate(p, dist, "ecl_zero")
    thri = threshold_rate(p, dist, "ecl_infinity")
    assert 0.0 <= thr0 <= thri + 1e-9 <= 1.0 + 1e-9
    # above either threshold the bound goes positive; the theta=0 regime
    # also goes negative below (theta=0 sits in the grid exactly)
    assert e_hat_bound(RobustQuery(p_xy=p, dist=dist, r_tilde=thr0 + 0.03,
                                   ecl_level=0.0)) > 0.0
    assert e_hat_bound(RobustQuery(p_xy=p, dist=dist, r_tilde=thri + 0.03,
                                   ecl_level=1e6)) > 0.0
    assert e_hat_bound(RobustQuery(p_xy=p, dist=dist, r_tilde=thri - 0.03,
                                   ecl_level=1e6)) < 0.0


def test_threshold_report_fields():
    rep = {}
    threshold_rate(doubly_symmetric_binary(0.2),
                   DistortionSpec.hamming(BIT, level=0.1), "ecl_zero", report=rep)
    assert set(rep) == {"lambda", "s", "zeta_mult", "cap_hit"}
