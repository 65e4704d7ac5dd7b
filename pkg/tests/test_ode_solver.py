import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebsphere import ode_solver as od
from ebsphere.errors import LimitCheckError, ModeError, ShootingError, ValidationError
from ebsphere.model import ModelParams, lambda_critical, lambda_of_b
from oracles import CHMY_S_STAR, DU0_CYL_C1


@pytest.fixture(scope="module")
def cyl(p2):
    return od.solve_cylindrical(1.0, p2)


@pytest.fixture(scope="module")
def chmy():
    return od.chmy_solve(ModelParams.planar(0.5, 1), 1.0)


def test_compact_initial_data(profile_b1):
    i0 = int(np.argmin(np.abs(profile_b1.t)))
    assert profile_b1.u[i0] == -1.0 and profile_b1.du[i0] == 0.0
    assert profile_b1.lam == lambda_of_b(1.0, profile_b1.params)


def test_compact_even(profile_b1):
    u = profile_b1.u
    assert np.max(np.abs(u - u[::-1])) < 1e-12


def test_compact_slopes(p2):
    prof = od.shoot_compact(1.0, p2, T=8.0)
    assert abs(prof.du[0] - 2) <= 1e-5
    assert abs(prof.du[-1] + 2) <= 1e-5


def test_compact_short_T_fails(p2):
    with pytest.raises(ShootingError):
        od.shoot_compact(1.0, p2, T=2.0)


def test_compact_needs_even_N():
    with pytest.raises(ModeError):
        od.shoot_compact(1.0, ModelParams.compact(1.0, 3))


def test_conserved_defect_b1(p2):
    assert od.conserved_defect(od.shoot_compact(1.0, p2, T=8.0)) <= 1e-8


def test_conserved_defect_zero_at_origin(profile_b1):
    p = profile_b1.params
    a, lam = p.alpha, profile_b1.lam
    val = -4 * p.half_N ** 2 + math.exp(2 * a * (-1 - math.exp(-1))) / (lam * a)
    assert abs(val) < 1e-14


@given(st.floats(0.3, 4.0))
@settings(max_examples=8, deadline=None)
def test_first_integral_property(b):
    prof = od.shoot_compact(b, ModelParams.compact(1.0, 2), T=8.0)
    assert od.conserved_defect(prof) <= 1e-8


def test_recover_lambda(p2):
    for b in (0.5, 1.0):
        assert od.recover_lambda(b, p2) == pytest.approx(lambda_of_b(b, p2), rel=1e-6)


def test_cylindrical_derivative(cyl):
    assert cyl.meta["du0_expected"] == pytest.approx(DU0_CYL_C1, abs=1e-15)
    assert cyl.meta["du0_defect"] <= 1e-8
    assert cyl.lam == lambda_critical(cyl.params)


def test_cylindrical_left_slope(cyl):
    i = int(np.argmin(np.abs(cyl.t + 10)))
    assert abs(cyl.du[i] - 2) <= 1e-6


def test_cylindrical_monotone(cyl):
    assert np.all(cyl.u < 0)
    assert np.all(np.diff(cyl.u) > 0)
    assert np.all((cyl.du > 0) & (cyl.du < 2))


def test_cylindrical_envelopes(cyl):
    lo, hi = od.cylindrical_envelopes(cyl)
    pos = cyl.t >= 0
    assert np.all(lo[pos] <= -cyl.u[pos] * (1 + 1e-12))
    assert np.all(-cyl.u[pos] <= hi[pos] * (1 + 1e-12))
    i5 = int(np.argmin(np.abs(cyl.t - 5)))
    assert lo[i5] < -cyl.u[i5] < hi[i5]


def test_cylindrical_second_order(cyl):
    assert od.second_order_crosscheck(cyl) < 1e-8


def test_cylindrical_translation(p2):
    """Autonomous ODE: the c=2 solution is a time shift of the c=1 solution."""
    c1 = od.solve_cylindrical(1.0, p2)
    c2 = od.solve_cylindrical(2.0, p2)
    # c1 reaches -2 at t* < 0
    tstar = float(np.interp(-2.0, c1.u, c1.t))
    tt = np.linspace(-4, 4, 41)
    a = np.interp(tt + tstar, c1.t, c1.u)
    b = np.interp(tt, c2.t, c2.u)
    # linear interpolation on a 1e-3 lattice dominates the difference
    assert np.max(np.abs(a - b)) < 2e-6


def test_cylindrical_metric_asymptote(cyl):
    geo = od.profile_geometry(cyl)
    tail = np.array(geo["g_minus_gC_over_u2"])
    assert abs(tail[-1] - geo["g_minus_gC_over_u2_limit"]) < 0.05
    assert geo["asymptotic_circumference"] == pytest.approx(geo["cylinder_circumference"], rel=1e-3)


def test_limit_profile_values():
    assert od.w_infinity(0.0) == 0.0
    assert od.w_infinity(1.0) == pytest.approx(-0.8675616609, abs=1e-9)


def test_limit_profile_decreasing(p2):
    rep = od.limit_profile_w([2, 4, 6, 8], p2)
    d = rep["sup_deviation"]
    assert all(y < x for x, y in zip(d, d[1:]))


def test_limit_profile_rejects_unsorted(p2):
    with pytest.raises(ValidationError):
        od.limit_profile_w([4, 2], p2)


def test_limit_profile_flags_non_monotone(p2, monkeypatch):
    # a profile that ignores b gives deviations growing with b
    real = od._integrate_compact
    monkeypatch.setattr(od, "_integrate_compact", lambda b, lam, params, T, step: real(2.0, lam, params, T, step))
    with pytest.raises(LimitCheckError):
        od.limit_profile_w([2, 4], p2)


def test_chmy_s_star(chmy):
    s, prof = chmy
    assert s == pytest.approx(CHMY_S_STAR, abs=2e-5)
    assert abs(prof.u[-1]) <= 1e-3
    assert np.all(prof.u < 0)


def test_chmy_start_series(chmy):
    s, prof = chmy
    r0 = prof.r[0]
    assert prof.u[0] - 2 * math.log(r0) - s == pytest.approx(-prof.meta["start_correction"], abs=1e-13)


def test_chmy_flux_and_curvature(chmy):
    geo = od.profile_geometry(chmy[1])
    assert geo["flux_defect"] <= 1e-2
    assert abs(geo["total_scalar_curvature"] - math.pi) <= 2e-2


def test_chmy_decay(chmy):
    d = od.chmy_decay_checks(chmy[1])
    for k in (1, 2, 4):
        assert d[f"u_faster_than_r^-{k}"] and d[f"du_faster_than_r^-{k}"]


def test_chmy_mode_and_bracket(p2):
    with pytest.raises(ModeError):
        od.chmy_solve(p2)
    with pytest.raises(ShootingError):
        od.chmy_solve(ModelParams.planar(0.5, 1), s_range=(5.0, 6.0))


def test_compact_geometry(profile_b1):
    geo = od.profile_geometry(profile_b1)
    assert geo["gauss_bonnet_defect"] <= 1e-3
    assert geo["volume"] > 8 * math.pi
    # the central circle sits where u = -b: 2 pi sqrt(rho(0))
    rho0 = math.exp(2 * 0.5 * (-1 - math.exp(-1))) / profile_b1.lam
    assert geo["central_circumference"] == pytest.approx(2 * math.pi * math.sqrt(rho0), rel=1e-12)


def test_central_circumference_small_b(p2):
    # 2 pi sqrt(2 N') for every b at alpha = 1/2; equals 2 pi e^{-a} sqrt(N e) here
    geo = od.profile_geometry(od.shoot_compact(0.05, p2, T=14.0))
    assert geo["central_circumference"] == pytest.approx(2 * math.pi * math.sqrt(2), rel=1e-10)
    assert 2 * math.pi * math.exp(-0.5) * math.sqrt(2 * math.e) == pytest.approx(8.8858, abs=1e-4)


def test_profile_export(tmp_path, profile_b1):
    p = profile_b1.to_csv(tmp_path / "p.csv")
    head = p.read_text().splitlines()[0]
    assert head.split(",")[1:] == ["u", "u_prime"]
    j = json.loads(profile_b1.to_json(tmp_path / "p.json").read_text())
    assert j["kind"] == "compact" and j["lambda"] == profile_b1.lam
