"""The twelve acceptance criteria, one test each, at their stated tolerances.

Every criterion prints one ``ACCEPTANCE <k>: PASS|FAIL`` line (collected again in
the terminal summary).  Tests labelled ``<k>-sub`` are supplementary checks on
the part of the N=4 branch where solutions exist; they never replace the
criterion itself.
"""

import math
import time

import numpy as np
import pytest

from ebsphere import diagnostics as dg
from ebsphere import ode_solver as od
from ebsphere import pde_solver as pde
from ebsphere.errors import EBError
from ebsphere.model import Divisor, ModelParams, lambda_critical, lambda_of_b
from ebsphere.sphere_grid import ScalarField, build_grid, higgs_data
from oracles import DU0_CYL_C1, V_PHI_ROOTS4
from conftest import symmetric_solution

P2 = ModelParams.compact(1.0, 2)
P4 = ModelParams.compact(1.0, 4)
LC4 = lambda_critical(P4)
BRANCH_LAMBDAS = [LC4 / 2, LC4 / 4, LC4 / 8, LC4 / 16]


@pytest.fixture(scope="module")
def literal_branch(grid128):
    """The branch of criterion 8, exactly as stated; (path or None, error text, seconds)."""
    t0 = time.perf_counter()
    try:
        path = pde.maximal_branch(BRANCH_LAMBDAS, Divisor.roots_of_unity(4), grid128, P4)
        return path, "", time.perf_counter() - t0
    except EBError as exc:
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


@pytest.fixture(scope="module")
def sym256(profile_b1):
    return symmetric_solution(build_grid(256, 1.2), profile_b1, P2)


@pytest.fixture(scope="module")
def low_volume128(sym128):
    return pde.volume_constrained_solve(28.0, sym128[0])


# ------------------------------------------------------------------ 1-4: ODE


def test_criterion_01_first_integral(verdict):
    rows, ok = [], True
    for b in (0.5, 1.0, 2.0):
        t0 = time.perf_counter()
        prof = od.shoot_compact(b, P2, T=8.0, step=1e-3)
        d = od.conserved_defect(prof)
        dt = time.perf_counter() - t0
        ok &= d <= 1e-8 and dt < 1.0
        rows.append(f"b={b}: defect {d:.2e} in {dt:.2f}s")
    verdict("1", ok, "; ".join(rows))


def test_criterion_02_lambda_recovery(verdict):
    t0 = time.perf_counter()
    errs = [abs(od.recover_lambda(b, P2) / lambda_of_b(b, P2) - 1) for b in (0.5, 1.0, 2.0)]
    dt = time.perf_counter() - t0
    verdict("2", max(errs) <= 1e-6 and dt < 10, f"max rel error {max(errs):.2e}, {dt:.1f}s")


def test_criterion_03_dissolving_ode_limit(verdict):
    t0 = time.perf_counter()
    rep = od.limit_profile_w([2, 4, 6, 8], P2, T=3.0)
    dt = time.perf_counter() - t0
    d = rep["sup_deviation"]
    ok = all(y < x for x, y in zip(d, d[1:])) and d[-1] <= 5e-3 and dt < 5
    verdict("3", ok, f"deviations {[f'{x:.2e}' for x in d]}, {dt:.2f}s")


def test_criterion_04_cylindrical(verdict):
    t0 = time.perf_counter()
    prof = od.solve_cylindrical(1.0, P2, T_minus=10.0, T_plus=10.0)
    dt = time.perf_counter() - t0
    d0 = abs(prof.meta["du0_fd"] - DU0_CYL_C1)
    lo, hi = od.cylindrical_envelopes(prof)
    pos = (prof.t >= 0) & (prof.t <= 10)
    env = bool(np.all(lo[pos] <= -prof.u[pos] * (1 + 1e-12)) and np.all(-prof.u[pos] <= hi[pos] * (1 + 1e-12)))
    left = abs(prof.du[np.argmin(np.abs(prof.t + 10))] - 2)
    ok = d0 <= 1e-8 and env and left <= 1e-6 and dt < 1
    verdict("4", ok, f"|u'(0) - formula| {d0:.1e}, envelopes {env}, |u'(-10) - 2| {left:.1e}, {dt:.2f}s")


# ------------------------------------------------------------------ 5-7: PDE vs ODE and identities


def test_criterion_05_pde_vs_ode(verdict, profile_b1, grid128):
    t0 = time.perf_counter()
    sol, guess = symmetric_solution(grid128, profile_b1, P2)
    dt = time.perf_counter() - t0
    g = grid128
    e128 = float(np.max(np.abs(sol.v.values - guess.values)[:, g.active]))
    s256, g256 = symmetric_solution(build_grid(256, 1.2), profile_b1, P2)
    a = s256.grid.active
    e256 = float(np.max(np.abs(s256.v.values - g256.values)[:, a]))
    ratio = e128 / e256
    ok = e128 <= 5e-3 and 3.0 <= ratio <= 5.0 and dt < 120
    verdict("5", ok, f"sup error 128^2 {e128:.2e}, 256^2 {e256:.2e}, ratio {ratio:.2f}, {dt:.1f}s at 128^2")


def _all_solutions(sym128, roots_branch_128, low_volume128):
    return [sym128[0], low_volume128, *roots_branch_128]


def test_criterion_06_gauss_bonnet(verdict, sym64, sym128, sym256, roots_branch_128, low_volume128, grid64):
    sols = _all_solutions(sym128, roots_branch_128, low_volume128)
    defects = [dg.gauss_bonnet(s)["gauss_bonnet_defect"] for s in sols]
    ref = [dg.gauss_bonnet(s[0])["gauss_bonnet_defect"] for s in (sym64, sym128, sym256)]
    top = roots_branch_128[0]
    coarse = pde.newton_solve(pde.singular_limit_guess(higgs_data(top.divisor, grid64), top.lam, P4), top.lam,
                              higgs_data(top.divisor, grid64), P4)
    r64 = dg.gauss_bonnet(coarse)["gauss_bonnet_defect"]
    ok = max(defects) <= 1e-2 and ref[0] > ref[1] > ref[2] and r64 > defects[2]
    verdict("6", ok, f"defects at 128^2 {[f'{d:.1e}' for d in defects]}; symmetric 64/128/256 "
                     f"{[f'{d:.1e}' for d in ref]}; roots lam_c/4 64/128 {r64:.1e}/{defects[2]:.1e}")


def test_criterion_07_flux(verdict, sym128, roots_branch_128, low_volume128):
    sols = _all_solutions(sym128, roots_branch_128, low_volume128)
    flux = [dg.flux_identities(s) for s in sols]
    worst = max(f["flux_defect_rel"] for f in flux)
    # the two forms are algebraically equivalent: disagreement at roundoff relative to tau*Vol
    agree = max(f["form_disagreement"] / (s.params.tau * s.volume) for f, s in zip(flux, sols))
    verdict("7", worst <= 1e-2 and agree <= 1e-12, f"worst flux defect {worst:.1e}, form disagreement {agree:.1e}")


# ------------------------------------------------------------------ 8, 9, 11: the N=4 maximal branch


def _branch_certificates(path, cone):
    sols = list(path)
    g = sols[0].grid
    vmono = all(np.all(b.v.values[:, g.active] > a.v.values[:, g.active]) for a, b in zip(sols, sols[1:]))
    volmono = all(b.volume > a.volume for a, b in zip(sols, sols[1:]))
    lv = [s.lam * s.volume for s in sols]
    gaps = [(cone.volume - x) / cone.volume for x in lv]
    toward = all(y > x for x, y in zip(lv, lv[1:])) and all(x <= cone.volume for x in lv)
    shrinking = all(y < x for x, y in zip(gaps, gaps[1:]))
    comp, margin = dg.comparison_check(path, slack=1e-10)
    ok = vmono and volmono and toward and shrinking and comp
    return ok, (f"v-monotone {vmono}, volume-monotone {volmono}, lam*Vol {[f'{x:.4f}' for x in lv]} "
                f"-> V_phi {cone.volume:.6f}, gaps shrinking {shrinking}, comparison {comp} (margin {margin:.1e})")


def test_criterion_08_maximal_branch(verdict, literal_branch, cone128):
    path, err, dt = literal_branch
    oracle_ok = abs(cone128.volume / V_PHI_ROOTS4 - 1) < 1e-5
    if path is None:
        verdict("8", False, f"no solution on the maximal branch at lam_c/2 = {LC4 / 2:.5f} ({err}); "
                            f"the branch folds near lam = 0.073; V_phi quadrature {cone128.volume:.6f} "
                            f"(oracle ok {oracle_ok}); {dt:.1f}s")
    ok, detail = _branch_certificates(path, cone128)
    verdict("8", ok and oracle_ok and dt < 900, detail)


def test_criterion_08_sub_existing_branch(verdict, roots_branch_128, cone128):
    ok, detail = _branch_certificates(roots_branch_128, cone128)
    verdict("8-sub (lam_c/4, /8, /16)", ok, detail)


def _sup_K_ratios(path):
    rep = dg.large_volume_report(path, K_radius=0.5)
    return [r["ratio_sup_K_over_lambda"] for r in rep["steps"]], rep["ratio_factors"]


def test_criterion_09_locality(verdict, literal_branch, roots_branch_128):
    path, err, _ = literal_branch
    if path is not None:
        ratios, factors = _sup_K_ratios(path)
        verdict("9", all(f < 3 for f in factors), f"ratios {ratios}, factors {factors}")
    ratios, factors = _sup_K_ratios(roots_branch_128)
    verdict("9", False, f"branch of criterion 8 unavailable ({err.split(':')[0]}); on lam_c/4, /8, /16 the ratio "
                        f"sup_K|Phi - tau|/lam is {[f'{r:.3f}' for r in ratios]}, factors "
                        f"{[f'{f:.2f}' for f in factors]} (limit 3)")


def test_criterion_09_sub_ratio_bounded(verdict, roots_branch_128):
    ratios, _ = _sup_K_ratios(roots_branch_128)
    ok = all(y < x for x, y in zip(ratios, ratios[1:]))
    verdict("9-sub (sup_K|Phi - tau| <= C lam)", ok, f"ratios non-increasing {[f'{r:.3f}' for r in ratios]}")


def _gh_sequence(path, cone):
    g = path[0].grid
    ex = dg.divisor_exclusion(g, path[0].divisor)
    return [dg.gh_upper_bound(ScalarField(s.lam * s.rho.values, g), cone.density, g, 64, exclude=ex) for s in path]


def _gh_sanity(grid):
    d = ScalarField(np.where(grid.active, 1.0 + 0.3 * np.stack([grid.z.real, -grid.z.imag]), np.nan), grid)
    zero = dg.gh_upper_bound(d, d, grid, 32)
    rep = dg.gh_upper_bound(d, d * 4.0, grid, 32, report=True)
    scaling = rep["gh_upper_bound"] == 0.5 * rep["diameter_1"] and rep["diameter_2"] == 2 * rep["diameter_1"]
    return zero == 0.0, scaling


def test_criterion_11_gh(verdict, literal_branch, roots_branch_128, cone128, grid64):
    zero, scaling = _gh_sanity(grid64)
    path, err, _ = literal_branch
    if path is not None:
        gh = _gh_sequence(path, cone128)
        ok = zero and scaling and all(y < x for x, y in zip(gh, gh[1:]))
        verdict("11", ok, f"gh(a,a)=0 {zero}, x2 law {scaling}, gh along branch {gh}")
    verdict("11", False, f"gh(a,a)=0 {zero}, x2 law {scaling}; branch of criterion 8 unavailable "
                         f"({err.split(':')[0]}), monotone decrease along it cannot be evaluated")


def test_criterion_11_sub_existing_branch(verdict, roots_branch_128, cone128, grid64):
    zero, scaling = _gh_sanity(grid64)
    gh = _gh_sequence(roots_branch_128, cone128)
    ok = zero and scaling and all(y < x for x, y in zip(gh, gh[1:]))
    verdict("11-sub (lam_c/4, /8, /16)", ok, f"gh(a,a)=0 {zero}, x2 law {scaling}, "
                                             f"gh {[f'{x:.4f}' for x in gh]} (metrication {dg.METRICATION_REL:.3f} rel)")


# ------------------------------------------------------------------ 10: CHMY


def test_criterion_10_chmy(verdict):
    t0 = time.perf_counter()
    s, prof = od.chmy_solve(ModelParams.planar(0.5, 1), 1.0, r0=1e-3, r_max=50.0, tol=1e-3)
    geo = od.profile_geometry(prof)
    dec = od.chmy_decay_checks(prof, 25.0, 50.0, kappas=(4,))
    dt = time.perf_counter() - t0
    curv = abs(geo["total_scalar_curvature"] - math.pi)
    ok = geo["flux_defect"] <= 1e-2 and curv <= 2e-2 and dec["u_faster_than_r^-4"] and dt < 30
    verdict("10", ok, f"s* {s:.7f}, flux defect {geo['flux_defect']:.1e}, |curvature - pi| {curv:.1e}, "
                      f"u(50)/u(25) {dec['u_ratio']:.3f} < 1/16, {dt:.1f}s")


# ------------------------------------------------------------------ 12: equivariance


def _roots_solution(grid, lam, scale=1.0, v_init=None):
    hd = higgs_data(Divisor.roots_of_unity(4), grid, scale=scale)
    guess = pde.singular_limit_guess(hd, lam, P4) if v_init is None else v_init
    return pde.newton_solve(guess, lam, hd, P4)


def _rotation_defect(sol):
    v, n = sol.v.values, sol.grid.n
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    m = sol.grid.active
    rotA = v[0][n - 1 - j, i]   # z -> i z
    rotB = v[1][j, n - 1 - i]   # w -> -i w
    return max(float(np.max(np.abs(rotA - v[0])[m])), float(np.max(np.abs(rotB - v[1])[m])))


def test_criterion_12_equivariance(verdict, grid128):
    c, lam = 10.0, LC4 / 4
    sol = _roots_solution(grid128, lam)
    g = grid128
    rot = _rotation_defect(sol)
    # gauge: c Phi0 with v_init - log c at the same temper, as the invariant is stated
    try:
        same = _roots_solution(g, lam, scale=c, v_init=sol.v - math.log(c))
    except EBError as exc:
        verdict("12", False, f"same lam with c Phi0 (c={c:g}): {type(exc).__name__}: {exc}; "
                             f"the shifted field solves the gauged equation only at lam c^(-2 a tau) = "
                             f"{lam * c ** (-2 * P4.alpha * P4.tau):.6f}; rotation by pi/2 {rot:.1e}")
    shift = float(np.max(np.abs((same.v.values - sol.v.values)[:, g.active] + math.log(c))))
    dphi = float(np.max(np.abs((same.Phi.values - sol.Phi.values)[:, g.active])))
    dvol = abs(same.volume / sol.volume - 1)
    ok = shift <= 1e-8 and dphi <= 1e-8 and dvol <= 1e-8 and rot <= 1e-8
    verdict("12", ok, f"same lam: |v' - v + log c| {shift:.2e}, |Phi' - Phi| {dphi:.2e}, rel dVol {dvol:.2e}; "
                      f"rotation by pi/2 {rot:.1e}")


def test_criterion_12_sub_gauge_law(verdict, grid128):
    """With lam' = lam c^{-2 a tau} the shifted field solves the gauged equation; geometry is identical."""
    c, lam = 10.0, LC4 / 4
    g = grid128
    sol = _roots_solution(g, lam)
    lam_c = lam * c ** (-2 * P4.alpha * P4.tau)
    new = _roots_solution(g, lam_c, scale=c, v_init=sol.v - math.log(c))
    shift = float(np.max(np.abs((new.v.values - sol.v.values)[:, g.active] + math.log(c))))
    dphi = float(np.max(np.abs((new.Phi.values - sol.Phi.values)[:, g.active])))
    drho = float(np.max(np.abs(new.rho.values / sol.rho.values - 1)[:, g.active]))
    dvol = abs(new.volume / sol.volume - 1)
    # at fixed volume the bordered solve lands on the same geometry as well
    fixed = pde.volume_constrained_solve(sol.volume, new)
    dfix = float(np.max(np.abs((fixed.Phi.values - sol.Phi.values)[:, g.active])))
    rot = _rotation_defect(sol)
    ok = max(shift, dphi, drho, dvol, dfix, rot) <= 1e-8
    verdict("12-sub (lam' = lam c^(-2 a tau))", ok,
            f"shift {shift:.1e}, Phi {dphi:.1e}, rho {drho:.1e}, Vol {dvol:.1e}, fixed-volume Phi {dfix:.1e}, "
            f"temper ratio {new.lam / sol.lam:.6f}, rotation {rot:.1e}")
