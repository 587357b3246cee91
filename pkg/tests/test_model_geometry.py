import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad, simpson, solve_ivp

from speclab import model_geometry as mg
from speclab.errors import (
    InvalidProfile,
    NoPlateau,
    NotPinching,
    OutOfRange,
    ParabolicModel,
    SingularOrigin,
)


@pytest.fixture(scope="module")
def hyp3():
    return mg.build_geometry(mg.constant(1), 3, 20)


@pytest.fixture(scope="module")
def hyp2():
    return mg.build_geometry(mg.constant(1), 2, 20)


@pytest.fixture(scope="module")
def exp2():
    return mg.build_geometry(mg.exp_decay(1, 1), 2, 40)


def dop853_ratio(H, r_end):
    """h(r_end)/sinh(r_end) from scipy's eighth-order integrator."""
    sol = solve_ivp(lambda r, y: [y[1], H(r) * y[0]], (0.0, r_end), [0.0, 1.0],
                    method="DOP853", rtol=1e-13, atol=1e-16)
    return sol.y[0, -1] / math.sinh(r_end)


def log_coth_half(r):
    return np.log1p(2.0 * np.exp(-r) / -np.expm1(-r))


def stable_coth_minus_one(r):
    return 2.0 * np.exp(-2.0 * r) / -np.expm1(-2.0 * r)


# ---------------------------------------------------------------- profiles

def test_profile_parsing_round_trip():
    p = mg.parse_profile("exp_decay(1, 0.5)")
    assert p.name == "exp_decay" and p.params == (1.0, 0.5)
    assert p.asymptotic_class is mg.AsymptoticClass.L1_INTEGRABLE
    assert mg.parse_profile("power_decay(1,1)").asymptotic_class is mg.AsymptoticClass.SLOWLY_DECAYING
    assert mg.parse_profile("power_decay(1,2)").is_integrable
    assert mg.parse_profile("wigner(0.5,0.5)").asymptotic_class is mg.AsymptoticClass.SLOWLY_DECAYING
    assert mg.parse_profile("constant(0)").asymptotic_class is mg.AsymptoticClass.CONSTANT


@pytest.mark.parametrize("bad", ["nope(1)", "constant(1,2)", "exp_decay(1)", "exp_decay(a,1)", "garbage"])
def test_profile_parsing_rejects(bad):
    with pytest.raises(InvalidProfile):
        mg.parse_profile(bad)


def test_declared_hypotheses_for_shipped_profiles():
    for spec in ("constant(1)", "exp_decay(1,1)", "exp_decay(0.5,2)", "power_decay(1,2)"):
        chk = mg.check_hypotheses(mg.parse_profile(spec), 40)
        assert chk["H_ge_1"] and chk["non_increasing"]
    # exp_decay tail of the excess over [30, 40]
    assert mg.check_hypotheses(mg.exp_decay(1, 1), 40)["excess_tail"] < 1e-12


# ---------------------------------------------------------------- warping

def test_hyperbolic_warping_closed_form(hyp3):
    i = np.searchsorted(hyp3.r, 5.0)
    assert hyp3.r[i] == pytest.approx(5.0)
    assert hyp3.h[i] == pytest.approx(74.20321057778875, rel=1e-10)
    assert hyp3.v[i] == pytest.approx(4 * math.pi * math.sinh(5.0) ** 2, rel=1e-10)
    assert hyp3.h_prime[i] == pytest.approx(math.cosh(5.0), rel=1e-10)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_euclidean_warping(n):
    g = mg.solve_warping(mg.constant(0), n, 10)
    assert np.allclose(g.h, g.r, rtol=1e-12, atol=0)
    assert np.allclose(g.h_prime, 1.0, rtol=1e-12)
    assert np.allclose(g.V[1:], g.omega * g.r[1:] ** n / n, rtol=1e-10)


def test_pinched_ratio_matches_independent_integrator():
    H = mg.exp_decay(1, 1)
    g = mg.solve_warping(H, 2, 10)
    ratio = g.h[-1] / math.sinh(10.0)
    oracle = dop853_ratio(lambda r: 1 + math.exp(-r), 10.0)
    assert ratio > 1
    assert ratio == pytest.approx(oracle, rel=1e-8)
    far = mg.solve_warping(H, 2, 20).pinch_constant
    assert far == pytest.approx(dop853_ratio(lambda r: 1 + math.exp(-r), 20.0), rel=1e-8)
    # the ratio only creeps up by about the integral of zeta beyond r = 10
    assert 0 < far - ratio < 2 * ratio * math.exp(-10.0)


def test_constant_curvature_warping():
    g = mg.solve_warping(mg.constant(4.0), 2, 8)
    exact = np.log(np.sinh(2 * g.r[1:]) / 2)
    assert np.max(np.abs(g.log_h[1:] - exact)) < 1e-9


def test_negative_curvature_profile_rejected():
    with pytest.raises(InvalidProfile):
        mg.solve_warping(mg.wigner(10.0, 0.5), 2, 10)
    with pytest.raises(InvalidProfile):
        mg.constant(-1)


def test_sturm_comparison_and_volume(exp2):
    r = exp2.r[1:]
    assert np.all(exp2.log_h[1:] >= mg.log_sinh(r))
    assert np.all(np.diff(exp2.v[1:]) > 0)
    assert np.all(np.diff(exp2.V) > 0)
    assert np.all(np.diff(exp2.V, 2) > 0)
    # V is the integral of v
    r20 = exp2.r[exp2.r <= 20]
    v20 = exp2.v[: r20.size]
    v20[0] = 0.0
    assert simpson(v20, x=r20) == pytest.approx(exp2.V[r20.size - 1], rel=1e-7)


def test_refinement_self_consistency():
    p = mg.exp_decay(1, 1)
    g1 = mg.build_geometry(p, 3, 12, dr=0.05)
    g2 = mg.build_geometry(p, 3, 12, dr=0.025)
    assert np.max(np.abs(g1.log_h[1:] - g2.log_h[2::2])) < 1e-9
    assert np.max(np.abs(g1.log_V[1:] - g2.log_V[2::2])) < 1e-9
    assert np.max(np.abs(g1.log_green[1:] - g2.log_green[2::2])) < 1e-9
    assert np.max(np.abs(g1.zeta - g2.zeta[::2])) < 1e-10


# ---------------------------------------------------------------- Green kernel

@pytest.mark.parametrize("n", [3, 4, 5])
def test_euclidean_green(n):
    g = mg.build_geometry(mg.constant(0), n, 10)
    r = g.r[1:]
    exact = r ** (2 - n) / ((n - 2) * mg.sphere_area(n))
    assert np.max(np.abs(g.green[1:] / exact - 1)) < 1e-9


def test_hyperbolic_green_closed_forms(hyp2, hyp3):
    r = hyp2.r[1:]
    assert np.max(np.abs(hyp2.green[1:] / (log_coth_half(r) / (2 * np.pi)) - 1)) < 1e-8
    assert np.max(np.abs(hyp3.green[1:] / (stable_coth_minus_one(r) / (4 * np.pi)) - 1)) < 1e-8


def test_hyperbolic_green_against_quadrature(hyp2):
    for r in (0.5, 3.0, 9.0):
        val, _ = quad(lambda s: 1 / (2 * np.pi * np.sinh(s)), r, 60.0, epsrel=1e-12)
        i = np.searchsorted(hyp2.r, r)
        assert hyp2.green[i] == pytest.approx(val, rel=1e-8)


def test_green_decay_and_product(exp2):
    assert np.all(np.diff(exp2.log_green[1:]) < 0)
    C = mg.green_decay_constant(exp2)
    assert np.isfinite(C) and C > 0
    sel = exp2.r >= 1
    prod = np.exp(exp2.log_v[sel] + exp2.log_green[sel])
    # v G increases towards 1/(n-1) = 1 for n = 2, so it stays bounded
    assert np.all(np.isfinite(prod)) and prod.max() <= 1.0 + 1e-9
    assert np.all(np.diff(prod) >= -1e-12)


def test_nonparabolicity():
    assert mg.check_nonparabolic(mg.solve_warping(mg.constant(1), 2, 5))
    assert not mg.check_nonparabolic(mg.solve_warping(mg.constant(0), 2, 5))
    assert mg.check_nonparabolic(mg.solve_warping(mg.constant(0), 3, 5))
    with pytest.raises(ParabolicModel):
        mg.green_kernel_model(mg.solve_warping(mg.constant(0), 2, 5))


def test_inverse_green_round_trip(hyp3, exp2):
    for g in (hyp3, exp2):
        r = g.r[2:]
        back = mg.inverse_green(g, g.green[2:])
        assert np.max(np.abs(back / r - 1)) < 1e-6
    rr = mg.inverse_green(hyp3, (stable_coth_minus_one(2.0)) / (4 * np.pi))
    assert rr == pytest.approx(2.0, abs=1e-8)


def test_inverse_green_tail_and_range(exp2):
    gs = [1e-20, 1e-25, 1e-30]
    rs = [mg.inverse_green(exp2, x) for x in gs]
    assert all(r > exp2.r_max for r in rs)
    assert rs[0] < rs[1] < rs[2]
    with pytest.raises(OutOfRange):
        mg.inverse_green(exp2, 10 * exp2.green[1])


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=0.2, max_value=19.8))
def test_inverse_green_off_grid(r):
    g = _HYP3
    val = stable_coth_minus_one(r) / (4 * np.pi)
    assert mg.inverse_green(g, val) == pytest.approx(r, rel=1e-6)


_HYP3 = mg.build_geometry(mg.constant(1), 3, 20)


# ---------------------------------------------------------------- potential

def test_potential_closed_form_n2(hyp2):
    s = hyp2.r[1:]
    exact = 0.25 / np.sinh(s) ** 2
    assert np.max(np.abs(hyp2.a[1:] / exact - 1)) < 1e-8
    i = np.searchsorted(hyp2.r, 5.0)
    assert hyp2.a[i] == pytest.approx(0.25 / math.sinh(5) ** 2, rel=1e-9)


def test_potential_vanishes_for_hyperbolic_n3(hyp3):
    assert np.max(np.abs(hyp3.a[1:])) < 1e-12


def test_potential_matches_definition_at_moderate_radius():
    # direct evaluation of the defining combination, fine away from cancellation
    g = mg.build_geometry(mg.exp_decay(1, 1), 4, 10)
    s = g.r[20:100]
    n = g.n
    phi = g.phi[20:100]
    H = g.profile.evaluate(s)
    direct = (n - 1) ** 2 / 4 + ((n - 1) * phi) ** 2 / 4 - 0.5 * ((n - 1) * H + (n - 1) * (n - 2) * phi ** 2)
    assert np.max(np.abs(g.a[20:100] - direct)) < 1e-10


def test_potential_small_for_pinched_n3():
    g = mg.build_geometry(mg.exp_decay(1, 1), 3, 25)
    a20 = mg.schrodinger_potential(g, 20.0)
    assert abs(a20) < 1e-3
    # with n = 3 the potential is -(H-1) exactly
    assert a20 == pytest.approx(-math.exp(-20.0), rel=1e-9)


def test_potential_decay_sup_non_increasing(exp2):
    a = np.abs(exp2.a[1:])
    tail_sup = np.maximum.accumulate(a[::-1])[::-1]
    assert np.all(np.diff(tail_sup) <= 0)
    assert tail_sup[-1] < 1e-15


def test_potential_singular_origin(hyp2):
    with pytest.raises(SingularOrigin):
        mg.schrodinger_potential(hyp2, 1e-4)


# ---------------------------------------------------------------- comparison

def test_comparison_hyperbolic(hyp3):
    c = mg.comparison_functions(hyp3)
    assert np.max(np.abs(c["zeta"])) < 1e-14
    assert c["pinch_constant"] == pytest.approx(1.0, abs=1e-9)


def test_comparison_pinched(exp2):
    c = mg.comparison_functions(exp2)
    assert np.all(c["zeta"][1:] > 0)
    assert c["zeta_tail"] < 1e-6
    # the tail bound zeta(s) <= integral of H - 1 over [s, inf) = e^{-s}
    assert np.all(exp2.zeta[1:] <= np.exp(-exp2.r[1:]))
    lo, hi = c["sandwich"]
    assert 0 < lo <= hi < np.inf
    assert c["pinch_constant"] == pytest.approx(math.exp(c["zeta_integral"][-1]))


def test_zeta_matches_phi_minus_coth():
    g = mg.solve_warping(mg.exp_decay(1, 1), 3, 6)
    r = g.r[1:]
    assert np.max(np.abs(g.zeta[1:] - (g.phi[1:] - 1 / np.tanh(r)))) < 1e-9


def test_comparison_refuses_slow_profile():
    g = mg.solve_warping(mg.power_decay(1, 1), 2, 200)
    with pytest.raises(InvalidProfile):
        mg.comparison_functions(g)
    # the integral of zeta, log(h/sinh), keeps growing like log r
    r = g.r
    I = g.log_h[1:] - mg.log_sinh(r[1:])
    i50, i100, i200 = (np.searchsorted(r[1:], x) for x in (50, 100, 199.9))
    d1, d2 = I[i100] - I[i50], I[i200] - I[i100]
    assert d1 > 0.3 and d2 == pytest.approx(d1, rel=0.1)


def test_not_pinching_detected():
    prof = mg.tabulated([0, 1, 2, 100], [0.5, 0.5, 0.5, 0.5])
    object.__setattr__(prof, "asymptotic_class", mg.AsymptoticClass.L1_INTEGRABLE)
    g = mg.solve_warping(prof, 2, 10)
    with pytest.raises(NotPinching):
        mg.comparison_functions(g)


# ---------------------------------------------------------------- Ricci, Brooks

@pytest.mark.parametrize("n", [2, 3, 4])
def test_ricci_model_values(n):
    g = mg.solve_warping(mg.constant(1), n, 10)
    rad, tan = mg.ricci_eigenvalues(g, np.array([0.5, 2.0, 7.3]))
    assert np.allclose(rad, -(n - 1))
    assert np.allclose(tan, -(n - 1), atol=1e-8)
    e = mg.solve_warping(mg.constant(0), n, 10)
    rad, tan = mg.ricci_eigenvalues(e, np.array([0.5, 2.0, 7.3]))
    assert np.allclose(rad, 0) and np.allclose(tan, 0, atol=1e-8)
    with pytest.raises(SingularOrigin):
        mg.ricci_eigenvalues(g, 0.0)


def test_ricci_pinched_two_resolutions():
    p = mg.exp_decay(1, 1)
    vals = [mg.ricci_eigenvalues(mg.solve_warping(p, 3, 6, dr=dr), 2.0) for dr in (0.05, 0.025)]
    assert vals[0][0] == pytest.approx(-2 * (1 + math.exp(-2)))
    assert vals[0][1] == pytest.approx(vals[1][1], rel=1e-7)
    # tangential value against a direct DOP853 evaluation of the formula
    sol = solve_ivp(lambda r, y: [y[1], (1 + math.exp(-r)) * y[0]], (0, 2), [0, 1],
                    method="DOP853", rtol=1e-13, atol=1e-16)
    h, hp = sol.y[:, -1]
    H = 1 + math.exp(-2)
    assert vals[0][1] == pytest.approx(-2 * H + (H + (1 - hp ** 2) / h ** 2), rel=1e-8)


def test_brooks_bounds():
    assert mg.brooks_upper_bound(mg.solve_warping(mg.constant(1), 3, 40)) == pytest.approx(1.0, abs=1e-6)
    assert mg.brooks_upper_bound(mg.solve_warping(mg.constant(0), 3, 40)) == 0.0
    assert mg.brooks_upper_bound(mg.solve_warping(mg.exp_decay(1, 1), 2, 40)) == pytest.approx(0.25, abs=0.01)


def test_brooks_no_plateau_on_short_grid():
    with pytest.raises(NoPlateau):
        mg.brooks_upper_bound(mg.solve_warping(mg.constant(1), 3, 2))


def test_table_columns(hyp3):
    t = mg.table(hyp3)
    assert t.shape == (hyp3.r.size, 8)
    assert np.allclose(t[1:, 1], np.sinh(hyp3.r[1:]), rtol=1e-10)
