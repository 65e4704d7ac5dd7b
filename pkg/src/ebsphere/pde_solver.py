"""Newton solver for Delta v = (1/lam)(tau - Phi0 e^v) e^{2 a tau v - 2 a Phi0 e^v} - 2N on P^1.

Unknowns are the values of v at every active node of both charts.  Owned
rows carry the discretized PDE, interface rows the cross-chart
interpolation constraint, and the coupled system is solved at once with a
sparse LU factorization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (AdmissibilityError, BranchIdentityError, ConfigurationError,
                     LinearAlgebraError, SolverError, ValidationError)
from .model import (Divisor, ModelParams, admissible_lower_bound, classify_divisor,
                    lambda_critical)
from .sphere_grid import HiggsData, ScalarField, SphereGrid, higgs_data, integrate, laplacian_matrix

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_VOL_TOL = 1e-8
MAX_HALVINGS = 20


def _laplacian_owned(values: np.ndarray, grid: SphereGrid) -> np.ndarray:
    # neighbour differences first: keeps roundoff at eps*|grad v|/h instead of eps*|v|/h^2
    c = values[:, 1:-1, 1:-1]
    lap = np.full(values.shape, np.nan)
    lap[:, 1:-1, 1:-1] = (
        ((values[:, 2:, 1:-1] - c) + (values[:, :-2, 1:-1] - c))
        + ((values[:, 1:-1, 2:] - c) + (values[:, 1:-1, :-2] - c))
    ) / (grid.h * grid.h)
    return -0.5 * (1 + grid.absz ** 2) ** 2 * lap


def _rhs_parts(v, phi0, lam, params: ModelParams):
    a, tau = params.alpha, params.tau
    Phi = phi0 * np.exp(v)
    E = 2 * a * tau * v - 2 * a * Phi
    eE = np.exp(E)
    rhs = (tau - Phi) * eE / lam - 2 * params.N
    drhs = eE / lam * (-Phi + (tau - Phi) * (2 * a * tau - 2 * a * Phi))
    return rhs, drhs, eE


@dataclass
class _System:
    """Discrete operator for one (grid, Higgs background, params)."""

    grid: SphereGrid
    higgs: HiggsData
    params: ModelParams

    def __post_init__(self):
        g = self.grid
        self.phi0 = g.to_vector(np.where(g.active, self.higgs.phi0.values, np.nan))
        self.owned_ids = g.owned_ids
        self.iface_ids = g.interface_ids
        L = laplacian_matrix(g)
        I = sp.csr_matrix(
            (np.ones(len(self.iface_ids)), (self.iface_ids, self.iface_ids)), shape=(g.size, g.size)
        )
        Pfull = sp.csr_matrix((g.interp.data, g.interp.indices, g.interp.indptr), shape=g.interp.shape)
        rows = sp.csr_matrix(
            (np.ones(len(self.iface_ids)), (self.iface_ids, np.arange(len(self.iface_ids)))),
            shape=(g.size, len(self.iface_ids)),
        )
        self.base = (L + I - rows @ Pfull).tocsc()
        self.owned_mask = np.zeros(g.size, dtype=bool)
        self.owned_mask[self.owned_ids] = True
        self.wq = g.to_vector(g.weights)

    def residual(self, vec, lam):
        g = self.grid
        vals = g.from_vector(vec)
        lap = g.to_vector(_laplacian_owned(np.nan_to_num(vals), g))
        rhs, drhs, eE = _rhs_parts(vec, self.phi0, lam, self.params)
        res = np.empty_like(vec)
        o = self.owned_mask
        res[o] = lap[o] - rhs[o]
        res[self.iface_ids] = vec[self.iface_ids] - g.interp @ vec
        return res, rhs, drhs, eE

    def jacobian(self, drhs):
        d = np.where(self.owned_mask, -drhs, 0.0)
        return (self.base + sp.diags(d, format="csc")).tocsc()

    def volume(self, eE, lam):
        return math.fsum(self.wq * eE) / lam


def _factor(J):
    try:
        return spla.splu(J)
    except RuntimeError as exc:
        raise LinearAlgebraError(f"Jacobian factorization failed: {exc}") from None


@dataclass(eq=False)
class EBSolutionCompact:
    v: ScalarField
    lam: float
    params: ModelParams
    divisor: Divisor
    higgs: HiggsData
    residual_norm: float
    tol: float
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def grid(self) -> SphereGrid:
        return self.v.grid

    @cached_property
    def Phi(self) -> ScalarField:
        """State function Phi0 e^v (exactly 0 at divisor nodes)."""
        return ScalarField(self.higgs.phi0.values * np.exp(self.v.values), self.grid, "Phi")

    @cached_property
    def rho(self) -> ScalarField:
        """Conformal factor of the metric relative to w0: (1/lam) e^{2 a tau v - 2 a Phi}."""
        a, t = self.params.alpha, self.params.tau
        return ScalarField(np.exp(2 * a * t * self.v.values - 2 * a * self.Phi.values) / self.lam,
                           self.grid, "rho")

    @cached_property
    def volume(self) -> float:
        return integrate(self.rho)

    def solvability_defect(self) -> float:
        """|int (1/lam)(tau - Phi) e^{...} w0 - 4 pi N| / (4 pi N)."""
        t, N = self.params.tau, self.params.N
        val = integrate((self.Phi * -1.0 + t) * self.rho)
        return abs(val - 4 * math.pi * N) / (4 * math.pi * N)

    def summary(self) -> dict:
        return {
            "lambda": self.lam, "tau": self.params.tau, "N": self.params.N,
            "alpha": self.params.alpha, "divisor": self.divisor.to_records(),
            "residual_norm": self.residual_norm, "volume": self.volume,
            "temper": self.lam, "iterations": self.iterations,
            "resolution": self.grid.n, "R_c": self.grid.R_c, "gauge_scale": self.higgs.scale,
        }


@dataclass
class ContinuationPath:
    solutions: list = field(default_factory=list)
    parameter: str = "lambda"
    values: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    complete: bool = True
    message: str = ""

    def __len__(self):
        return len(self.solutions)

    def __iter__(self):
        return iter(self.solutions)

    def __getitem__(self, k):
        return self.solutions[k]

    def append(self, sol, value, diag=None):
        if self.values:
            prev = self.values[-1]
            if not (value != prev and (len(self.values) < 2 or
                                       (value - prev) * (prev - self.values[-2]) > 0)):
                raise ValidationError("continuation parameter must be strictly monotone")
        self.solutions.append(sol)
        self.values.append(value)
        self.diagnostics.append(diag or {})


def residual(v: ScalarField, lam: float, higgs: HiggsData, grid: SphereGrid, params: ModelParams) -> ScalarField:
    """Delta v - RHS(v) at owned nodes; interface nodes carry the interpolation defect."""
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    if not np.all(np.isfinite(v.values[:, grid.active])):
        raise ValidationError("v must be finite at all active nodes")
    sysm = _System(grid, higgs, params)
    res, *_ = sysm.residual(v.vector(), lam)
    return ScalarField(grid.from_vector(res), grid, "residual")


def _check_bound(sol_vec, sysm, params):
    Phi = sysm.phi0 * np.exp(sol_vec)
    worst = float(np.max(Phi))
    if not worst < params.tau:
        raise SolverError(f"converged iterate violates Phi < tau (max Phi = {worst!r})", last_iterate=sol_vec)
    return worst


def newton_solve(v_init: ScalarField, lam: float, higgs: HiggsData, params: ModelParams,
                 tol: float = DEFAULT_TOL, max_iter: int = 50, damping: str = "backtrack",
                 _system: _System | None = None) -> EBSolutionCompact:
    """Damped Newton iteration at fixed temper lam.

    ``damping`` is "backtrack" (halve the step until the residual sup-norm
    drops, at most 20 times) or "none".
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    if not tol > 0 or max_iter < 1:
        raise ConfigurationError("tol must be positive and max_iter >= 1")
    if damping not in ("backtrack", "none"):
        raise ConfigurationError(f"unknown damping schedule {damping!r}")
    params.require_compact()
    grid = v_init.grid
    sysm = _system or _System(grid, higgs, params)
    x = v_init.vector().copy()
    if not np.all(np.isfinite(x)):
        raise ValidationError("initial guess must be finite at all active nodes")
    res, _, drhs, _ = sysm.residual(x, lam)
    rn = float(np.max(np.abs(res)))
    history = [rn]
    it = 0
    while rn > tol:
        if it >= max_iter:
            raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {rn:.3e})",
                              last_iterate=ScalarField(grid.from_vector(x), grid, "v"), history=history)
        lu = _factor(sysm.jacobian(drhs))
        dx = -lu.solve(res)
        if not np.all(np.isfinite(dx)):
            raise LinearAlgebraError("Jacobian solve produced non-finite values")
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            xt = x + step * dx
            with np.errstate(over="ignore", invalid="ignore"):
                rt, _, dt, _ = sysm.residual(xt, lam)
            rtn = float(np.max(np.abs(rt))) if np.all(np.isfinite(rt)) else np.inf
            if damping == "none" or rtn < rn:
                break
            step *= 0.5
        else:
            raise SolverError(f"line search failed at iteration {it} (residual {rn:.3e})",
                              last_iterate=ScalarField(grid.from_vector(x), grid, "v"), history=history)
        x, res, drhs, rn = xt, rt, dt, rtn
        history.append(rn)
        it += 1
        log.debug("newton it=%d step=%.3g residual=%.3e", it, step, rn)
    _check_bound(x, sysm, params)
    return EBSolutionCompact(
        v=ScalarField(grid.from_vector(x), grid, "v"), lam=float(lam), params=params,
        divisor=higgs.divisor, higgs=higgs, residual_norm=rn, tol=tol, iterations=it, history=history,
    )


def singular_limit_guess(higgs: HiggsData, lam: float, params: ModelParams) -> ScalarField:
    """log tau - log(Phi0 + lam tau): large-volume profile mollified near the zeros."""
    t = params.tau
    return higgs.phi0.map(lambda P: math.log(t) - np.log(P + lam * t), "v_init")


def dissolving_guess(grid: SphereGrid, lam: float, params: ModelParams) -> ScalarField:
    """Constant v with e^{2 a tau v} = 2 N lam / tau (round metric of volume close to the lower bound)."""
    a, t = params.alpha, params.tau
    return ScalarField.constant(grid, math.log(2 * params.N * lam / t) / (2 * a * t), "v_init")


def ode_transfer_guess(profile, higgs: HiggsData, params: ModelParams) -> ScalarField:
    """v(z) = u(log|z|) - log Phi0 for the divisor N'*0 + N'*inf (either chart, u is even).

    Written as (u(t) - 2N' t) + 2N' log(1 + |z|^2) - log(scale), which stays
    finite at z = 0 and uses the linear asymptote of u outside the sampled range.
    """
    from scipy.interpolate import CubicHermiteSpline

    Np = params.half_N
    t, u, up = np.asarray(profile.t), np.asarray(profile.u), np.asarray(profile.du)
    spline = CubicHermiteSpline(t, u - 2 * Np * t, up - 2 * Np)
    grid = higgs.phi0.grid
    vals = np.full((2, grid.n, grid.n), np.nan)
    r = grid.absz[grid.active]
    with np.errstate(divide="ignore"):
        tt = -np.abs(np.log(r))      # v is invariant under t -> -t; fold onto t <= 0
    core = spline(np.clip(tt, t[0], 0.0))   # u - 2N't is flat to exponential accuracy below t[0]
    v = core + 2 * Np * np.log1p(np.exp(tt) ** 2) - math.log(higgs.scale)
    for c in (0, 1):
        vals[c][grid.active] = v
    return ScalarField(vals, grid, "v_init")


def maximal_branch(lambda_list, divisor: Divisor, grid: SphereGrid, params: ModelParams,
                   tol: float = DEFAULT_TOL, max_iter: int = 60, lambda_fraction: float = 1.0,
                   higgs: HiggsData | None = None, resume: ContinuationPath | None = None,
                   on_step=None) -> ContinuationPath:
    """Maximal solutions for a descending list of tempers.

    Solves at the smallest lam from the mollified singular profile, then
    continues upward in lam with warm starts.  The returned path is ordered
    like ``lambda_list`` (descending lam).  Raises BranchIdentityError if v is
    not pointwise decreasing in lam or the volume is not decreasing in lam.
    """
    lams = [float(x) for x in lambda_list]
    if not lams or any(l <= 0 for l in lams):
        raise ValidationError("lambda_list must contain positive values")
    if any(b >= a for a, b in zip(lams, lams[1:])):
        raise ValidationError("lambda_list must be strictly descending")
    lc = lambda_critical(params)
    if lams[0] > lambda_fraction * lc:
        raise ValidationError(f"first lambda {lams[0]} exceeds {lambda_fraction} * lambda_c = {lambda_fraction * lc}")
    classify_divisor(divisor, params)
    higgs = higgs or higgs_data(divisor, grid)
    sysm = _System(grid, higgs, params)

    done = {}
    if resume is not None:
        for s, lv in zip(resume.solutions, resume.values):
            done[lv] = s
    order = sorted(lams)   # ascending: smallest first
    sols = {}
    prev = None
    for lam in order:
        if lam in done:
            sol = done[lam]
        else:
            guess = singular_limit_guess(higgs, lam, params) if prev is None else prev.v
            sol = newton_solve(guess, lam, higgs, params, tol=tol, max_iter=max_iter, _system=sysm)
            if on_step is not None:
                on_step(sol)
        sols[lam] = sol
        prev = sol
    path = ContinuationPath(parameter="lambda")
    for lam in lams:
        s = sols[lam]
        path.append(s, lam, {"iterations": s.iterations, "residual": s.residual_norm, "volume": s.volume})
    certify_maximal(path)
    return path


def certify_maximal(path: ContinuationPath) -> dict:
    """Branch signature for a path ordered by descending lam."""
    worst_v = np.inf
    for big, small in zip(path.solutions, path.solutions[1:]):
        g = big.grid
        a = small.v.values[:, g.active] - big.v.values[:, g.active]
        m = float(np.min(a))
        worst_v = min(worst_v, m)
        if not m > 0:
            raise BranchIdentityError(
                f"v not pointwise decreasing in lambda between {small.lam} and {big.lam} (min gap {m:.3e})")
        if not small.volume > big.volume:
            raise BranchIdentityError(
                f"volume not decreasing in lambda: Vol({small.lam})={small.volume} <= Vol({big.lam})={big.volume}")
    return {"min_v_gap": worst_v}


class _Bordered:
    def __init__(self, sysm: _System, V_target: float):
        self.s, self.V = sysm, V_target

    def evaluate(self, x, mu):
        lam = math.exp(mu)
        res, rhs, drhs, eE = self.s.residual(x, lam)
        vol = self.s.volume(eE, lam)
        return res, rhs, drhs, eE, vol

    def merit(self, res, vol):
        return max(float(np.max(np.abs(res))), abs(vol - self.V) / self.V)


def volume_constrained_solve(V_target: float, seed: EBSolutionCompact, tol: float = DEFAULT_TOL,
                             vol_tol: float = DEFAULT_VOL_TOL, max_iter: int = 60,
                             _system: _System | None = None) -> EBSolutionCompact:
    """Solve for (v, lam) with Vol = V_target, by Newton on the bordered system.

    The temper enters as mu = log lam.  Each step eliminates the border with
    two solves against the same LU factorization.
    """
    params = seed.params
    Vmin = admissible_lower_bound(params)
    if not V_target > Vmin:
        raise AdmissibilityError(f"V_target={V_target} must exceed the admissible bound {Vmin}")
    grid, higgs = seed.grid, seed.higgs
    sysm = _system or _System(grid, higgs, params)
    B = _Bordered(sysm, V_target)
    a2 = 2 * params.alpha * params.tau
    x, mu = seed.v.vector().copy(), math.log(seed.lam)
    res, rhs, drhs, eE, vol = B.evaluate(x, mu)
    merit = B.merit(res, vol)
    history, it, dVdmu = [merit], 0, float("nan")

    def converged(res, vol):
        return float(np.max(np.abs(res))) <= tol and abs(vol - V_target) / V_target <= vol_tol

    while True:
        lam = math.exp(mu)
        lu = _factor(sysm.jacobian(drhs))
        Fmu = np.where(sysm.owned_mask, rhs + 2 * params.N, 0.0)
        Phi = sysm.phi0 * np.exp(x)
        gvec = sysm.wq * eE * (a2 - 2 * params.alpha * Phi) / lam
        a = -lu.solve(res)
        b = -lu.solve(Fmu)
        dVdmu = float(-vol + gvec @ b)   # total derivative of the volume along the solution curve
        if converged(res, vol):
            break
        if it >= max_iter:
            raise SolverError(f"bordered Newton did not converge in {max_iter} iterations (merit {merit:.3e})",
                              last_iterate=ScalarField(grid.from_vector(x), grid, "v"), history=history)
        dmu = (V_target - vol - gvec @ a) / dVdmu
        dx = a + b * dmu
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                out = B.evaluate(x + step * dx, mu + step * dmu)
            m = B.merit(out[0], out[4]) if np.all(np.isfinite(out[0])) and math.isfinite(out[4]) else np.inf
            if m < merit:
                break
            step *= 0.5
        else:
            raise SolverError(f"bordered line search failed (merit {merit:.3e})",
                              last_iterate=ScalarField(grid.from_vector(x), grid, "v"), history=history)
        x, mu = x + step * dx, mu + step * dmu
        res, rhs, drhs, eE, vol = out
        merit = m
        history.append(merit)
        it += 1
    _check_bound(x, sysm, params)
    sol = EBSolutionCompact(
        v=ScalarField(grid.from_vector(x), grid, "v"), lam=math.exp(mu), params=params,
        divisor=seed.divisor, higgs=higgs, residual_norm=float(np.max(np.abs(res))), tol=tol,
        iterations=it, history=history,
    )
    sol.dlogV_dloglam = dVdmu / vol
    return sol


def continuation_volume(V_start: float, V_end: float, steps: int, seed: EBSolutionCompact,
                        schedule: str = "geometric", tol: float = DEFAULT_TOL,
                        vol_tol: float = DEFAULT_VOL_TOL, max_iter: int = 60) -> ContinuationPath:
    """Warm-started volume continuation; a failed step returns the partial path marked incomplete."""
    if int(steps) != steps or steps < 1:
        raise ConfigurationError(f"steps must be a positive integer, got {steps}")
    Vmin = admissible_lower_bound(seed.params)
    for V in (V_start, V_end):
        if not V > Vmin:
            raise AdmissibilityError(f"volume {V} must exceed the admissible bound {Vmin}")
    if schedule == "geometric":
        targets = np.geomspace(V_start, V_end, steps + 1)
    elif schedule == "linear":
        targets = np.linspace(V_start, V_end, steps + 1)
    else:
        raise ConfigurationError(f"unknown schedule {schedule!r}")
    sysm = _System(seed.grid, seed.higgs, seed.params)
    path = ContinuationPath(parameter="volume")
    cur = seed
    for V in targets:
        try:
            cur = volume_constrained_solve(float(V), cur, tol=tol, vol_tol=vol_tol,
                                           max_iter=max_iter, _system=sysm)
        except SolverError as exc:
            path.complete = False
            path.message = f"step V={V:.6g} failed: {exc}"
            log.warning(path.message)
            return path
        slope = getattr(cur, "dlogV_dloglam", float("nan"))
        path.append(cur, float(V), {"lambda": cur.lam, "iterations": cur.iterations,
                                    "dlogV_dloglam": slope})
        # a sign change of the volume slope along the curve signals a fold
        if len(path) > 1:
            prev = path.diagnostics[-2]["dlogV_dloglam"]
            if np.sign(prev) != np.sign(slope):
                path.diagnostics[-1]["fold_detected"] = True
    return path
