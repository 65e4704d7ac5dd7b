"""Geometric post-processing of compact solutions.

All densities below are conformal factors relative to w0, so a metric with
density rho has area form rho * w0 = rho * 2/(1+|z|^2)^2 dx dy in either chart.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from scipy.special import roots_jacobi

from .errors import (BranchIdentityError, CheckpointError, ConsistencyError, SamplingError,
                     StabilityError, ValidationError)
from .model import INF, Divisor, ModelParams, StabilityClass, admissible_lower_bound, classify_divisor, cone_angles
from .pde_solver import ContinuationPath, EBSolutionCompact
from .sphere_grid import (ScalarField, SphereGrid, divisor_points_in_chart, flat_gradient, fs_density,
                          higgs_data, integrate, smooth_step, write_json)


def fs_distance(z, p):
    """Fubini-Study distance between points of P^1 (area 2 pi sphere); inf allowed."""
    z = np.asarray(z, dtype=complex)
    if p is INF:
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(np.isfinite(z), 1.0 / np.abs(z), 0.0)
    else:
        p = complex(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(np.isfinite(z), np.abs(z - p) / np.abs(1 + np.conj(p) * z), 1.0 / abs(p) if p != 0 else np.inf)
    return math.sqrt(2.0) * np.arctan(q)


def distance_to_divisor(grid: SphereGrid, divisor: Divisor) -> np.ndarray:
    pts = grid.sphere_points()
    d = np.full(pts.shape, np.inf)
    for p in divisor.points:
        d = np.minimum(d, fs_distance(pts, p))
    return d


def state_function(sol: EBSolutionCompact) -> ScalarField:
    return sol.Phi


def volume_and_temper(sol: EBSolutionCompact, rtol: float = 1e-6):
    """(Vol, temper) where temper = (1/Vol) int e^{2 a tau v - 2 a Phi} w0 must reproduce sol.lam."""
    a, t = sol.params.alpha, sol.params.tau
    vol = integrate(sol.rho)
    e = sol.v.map(lambda v: np.exp(2 * a * t * v - 2 * a * sol.Phi.values))
    temper = integrate(e) / vol
    if abs(temper - sol.lam) / sol.lam > rtol:
        raise ConsistencyError(f"temper {temper} disagrees with lambda {sol.lam}")
    return vol, temper


def flux_identities(sol: EBSolutionCompact) -> dict:
    """Defects of int Phi dvol = tau Vol - 4 pi N and (1/2) int (tau - Phi) dvol = 2 pi N."""
    t, N = sol.params.tau, sol.params.N
    vol = sol.volume
    int_phi = integrate(sol.Phi * sol.rho)
    int_flux = 0.5 * integrate((sol.Phi * -1.0 + t) * sol.rho)
    d1 = abs(int_phi - (t * vol - 4 * math.pi * N))
    d2 = abs(int_flux - 2 * math.pi * N)
    return {
        "int_phi_dvol": int_phi, "total_flux": int_flux,
        "phi_form_defect": d1, "phi_form_defect_rel": d1 / (4 * math.pi * N),
        "flux_defect": d2, "flux_defect_rel": d2 / (2 * math.pi * N),
        # the two identities differ by a factor 2 exactly
        "form_disagreement": abs(0.5 * d1 - d2),
    }


def _grad_phi_sq_over_phi(sol: EBSolutionCompact, order: int = 4) -> np.ndarray:
    """|grad Phi|^2_flat / Phi on owned nodes, smooth through the zeros.

    With Phi = Phi0 e^v:  e^v [ |grad Phi0|^2/Phi0 + 2 <grad Phi0, grad v> + Phi0 |grad v|^2 ],
    where the first term is the analytic limit-aware value stored in the Higgs data.
    """
    g = sol.grid
    hd = sol.higgs
    vx, vy = flat_gradient(np.where(g.active, sol.v.values, 0.0), g.h, order)
    gv = vx + 1j * vy
    P0 = hd.phi0.values
    gP0 = np.where(hd.singular, 0.0, P0 * np.nan_to_num(hd.grad_log))
    cross = 2 * np.real(gP0 * np.conj(gv))
    val = np.exp(sol.v.values) * (hd.G + cross + P0 * np.abs(gv) ** 2)
    return np.where(g.owned, val, np.nan)


def curvature_fields(sol: EBSolutionCompact, disc_tol: float = 1e-6):
    """(S_g, S_k) with S_g = a |grad Phi|_g^2 / Phi + a (tau - Phi)^2 and S_k = a tau (tau - Phi) e^{-2 a Phi}."""
    g = sol.grid
    a, t = sol.params.alpha, sol.params.tau
    Phi = sol.Phi.values
    dens = sol.rho.values * fs_density(g.z)          # flat conformal factor of the metric
    Sg = a * _grad_phi_sq_over_phi(sol) / dens + a * (t - Phi) ** 2
    Sg = g.fill_interface(np.where(g.active, np.nan_to_num(Sg), np.nan))
    Sk = a * t * (t - Phi) * np.exp(-2 * a * Phi)
    Sk = np.where(g.active, Sk, np.nan)
    if np.nanmin(Sg) < -disc_tol:
        raise ConsistencyError(f"S_g reaches {np.nanmin(Sg):.3e} < -{disc_tol}")
    if np.nanmin(Sk) < 0 or np.nanmax(Sk) > a * t * t * (1 + 1e-15):
        raise ConsistencyError("S_k outside [0, a tau^2]")
    return ScalarField(Sg, g, "S_g"), ScalarField(Sk, g, "S_k")


def gauss_bonnet(sol: EBSolutionCompact) -> dict:
    """int S_g dvol, integrated as a |grad Phi|^2_flat/Phi dx dy + a (tau - Phi)^2 rho w0."""
    g = sol.grid
    a, t = sol.params.alpha, sol.params.tau
    grad_term = a * _grad_phi_sq_over_phi(sol) / fs_density(g.z)
    pot = a * (t - sol.Phi.values) ** 2 * sol.rho.values
    f = g.fill_interface(np.where(g.active, np.nan_to_num(grad_term + pot), np.nan))
    total = integrate(ScalarField(f, g))
    return {"gauss_bonnet_total": total,
            "gauss_bonnet_defect": abs(total - 4 * math.pi) / (4 * math.pi)}


# ------------------------------------------------------------------ cone metric

@dataclass(eq=False)
class ConeMetricData:
    density: ScalarField        # rho_hat relative to w0, nan at divisor nodes
    betas: list
    volume: float
    meta: dict = field(default_factory=dict)


def cone_density(phi0, params: ModelParams):
    a, t = params.alpha, params.tau
    with np.errstate(divide="ignore"):
        return t ** (2 * a * t) * math.exp(-2 * a * t) * np.power(phi0, -2 * a * t)


def cone_metric(divisor: Divisor, params: ModelParams, grid: SphereGrid, eps: float | None = None,
                n_radial: int = 48, n_angular: int = 64) -> ConeMetricData:
    """Flat cone metric rho_hat = tau^{2 a tau} e^{-2 a tau} Phi0^{-2 a tau} and its total volume.

    The volume splits with a smooth cutoff chi around each zero: the grid
    integrates rho_hat (1 - chi), and each disk |z - p| < eps is done in polar
    coordinates with Gauss-Jacobi nodes for the factor r^{1 - 4 a tau n} and a
    periodic trapezoid rule in the angle, applied to the full smooth remainder.
    """
    params.require_compact()
    if classify_divisor(divisor, params) is not StabilityClass.STABLE:
        raise StabilityError("cone metric needs a stable divisor (integrability 2 n_j < N)")
    betas = cone_angles(divisor, params)
    # default 10 h, capped so coarse grids keep the disks apart
    eps = min(10 * grid.h, 0.4) if eps is None else float(eps)
    hd = higgs_data(divisor, grid)
    rho_hat = cone_density(hd.phi0.values, params)
    rho_hat = np.where(hd.singular | ~grid.active[None], np.nan, rho_hat)

    # zeros, each handled in the chart where it has modulus <= 1
    zeros = []
    for p, m in divisor.entries:
        if p is not INF and abs(p) <= 1:
            zeros.append((0, complex(p), m))
        else:
            zeros.append((1, 0j if p is INF else 1.0 / p, m))
    if eps >= 0.5 * min([1.0] + [abs(p1 - p2) for c1, p1, _ in zeros for c2, p2, _ in zeros
                                  if c1 == c2 and p1 != p2]):
        raise ValidationError("cutoff disks overlap; reduce eps")

    def chi(r):
        return 1.0 - smooth_step((r - 0.5 * eps) / (0.5 * eps))

    cut = np.zeros((2, grid.n, grid.n))
    for c, p, _ in zeros:
        cut[c] += chi(np.abs(grid.z - p))
        # the same disk seen from the other chart
        q = 1.0 / p if p != 0 else None
        if q is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                zz = np.where(grid.z == 0, np.inf, 1.0 / np.where(grid.z == 0, 1, grid.z))
            cut[1 - c] += np.where(np.isfinite(zz), chi(np.abs(zz - p)), 0.0)
    outer = np.where(cut >= 1.0, 0.0, rho_hat * (1.0 - cut))
    grid_part = integrate(ScalarField(np.where(grid.active, np.nan_to_num(outer), np.nan), grid))

    a, t = params.alpha, params.tau
    pre = t ** (2 * a * t) * math.exp(-2 * a * t)
    N = divisor.total
    disk_parts = []
    for c, p, m in zeros:
        kexp = 4 * a * t * m                  # rho_hat ~ r^{-kexp}
        beta = 1.0 - kexp                     # Jacobi weight exponent of r^{1 - kexp}
        xj, wj = roots_jacobi(n_radial, 0.0, beta)
        r = 0.5 * eps * (1 + xj)
        wr = wj * (0.5 * eps) ** (1 + beta)
        th = 2 * math.pi * np.arange(n_angular) / n_angular
        R, TH = np.meshgrid(r, th, indexing="ij")
        zq = p + R * np.exp(1j * TH)
        # smooth remainder: Phi0 / r^{2m} without the zero at p
        pts, mults, const = _chart_factor_list(divisor, c)
        logrest = math.log(const) - N * np.log1p(np.abs(zq) ** 2)
        for p2, m2 in zip(pts, mults):
            if p2 != p:
                logrest = logrest + m2 * np.log(np.abs(zq - p2) ** 2)
        smooth = pre * np.exp(-2 * a * t * logrest) * fs_density(zq) * chi(R)
        disk_parts.append(float(np.sum(wr[:, None] * smooth) * (2 * math.pi / n_angular)))
    V = grid_part + sum(disk_parts)
    dens = ScalarField(rho_hat, grid, "rho_hat")
    return ConeMetricData(dens, betas, V, {"eps": eps, "grid_part": grid_part, "disk_parts": disk_parts})


def _chart_factor_list(divisor: Divisor, chart: int):
    from .sphere_grid import _chart_factors
    return _chart_factors(divisor, divisor.total, chart)


def comparison_check(branch: ContinuationPath, slack: float = 1e-10, strict: bool = False):
    """Nodewise e^{2 a tau v_top - 2 a tau} <= lam rho_lam <= rho_hat along a maximal branch.

    v_top is the solution with the largest lam on the branch.  Returns
    (ok, worst_margin); a negative margin means a violation.  With ``strict``
    a violation raises BranchIdentityError instead.
    """
    sols = list(branch.solutions)
    if not sols:
        raise ValidationError("empty branch")
    top = max(sols, key=lambda s: s.lam)
    p = top.params
    a, t = p.alpha, p.tau
    g = top.grid
    off = g.active[None] & ~top.higgs.singular
    lower = np.exp(2 * a * t * top.v.values - 2 * a * t)
    rho_hat = cone_density(top.higgs.phi0.values, p)
    worst = np.inf
    for s in sols:
        mid = s.lam * s.rho.values
        m1 = (mid - lower + slack * np.maximum(1.0, np.abs(lower)))[off]
        fin = off & np.isfinite(rho_hat)
        m2 = (rho_hat - mid + slack * np.maximum(1.0, np.abs(rho_hat)))[fin]
        worst = min(worst, float(np.min(m1)), float(np.min(m2)))
    ok = worst >= 0
    if strict and not ok:
        raise BranchIdentityError(f"comparison inequality violated (margin {worst:.3e})")
    return ok, worst


# ------------------------------------------------------------------ GH upper bound

_STENCIL16 = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1),
              (2, 1), (2, -1), (-2, 1), (-2, -1), (1, 2), (1, -2), (-1, 2), (-1, -2)]
# largest angle between neighbouring stencil directions is atan(1/2); a straight
# segment between two of them is overestimated by at most 1/cos(half that angle)
METRICATION_REL = 1.0 / math.cos(0.5 * math.atan(0.5)) - 1.0


@dataclass(eq=False)
class _Graph:
    nodes: list            # (chart, i, j)
    zpos: np.ndarray       # sphere z-coordinate of each node
    edges: np.ndarray      # (E, 2) node ids
    elen: np.ndarray       # Euclidean length in z-coordinates times 1 (FS factor applied later)
    zmid: np.ndarray       # z-coordinate of the edge endpoints, (E, 2)


def _graph_nodes(grid: SphereGrid, keep: np.ndarray):
    absz = grid.absz
    masks = [grid.active & (absz <= 1.0) & keep[0], grid.active & (absz < 1.0) & keep[1]]
    ids = -np.ones((2, grid.n, grid.n), dtype=np.int64)
    nodes = []
    for c in (0, 1):
        ii, jj = np.nonzero(masks[c])
        ids[c][ii, jj] = len(nodes) + np.arange(len(ii))
        nodes.extend((c, i, j) for i, j in zip(ii, jj))
    return masks, ids, nodes


def _build_graph_structure(grid: SphereGrid, keep: np.ndarray):
    masks, ids, nodes = _graph_nodes(grid, keep)
    pts = grid.sphere_points()
    zpos = np.array([pts[c, i, j] for c, i, j in nodes])
    E = []
    n = grid.n
    for c in (0, 1):
        ii, jj = np.nonzero(masks[c])
        for di, dj in _STENCIL16:
            i2, j2 = ii + di, jj + dj
            ok = (i2 >= 0) & (i2 < n) & (j2 >= 0) & (j2 < n)
            i2c, j2c = np.clip(i2, 0, n - 1), np.clip(j2, 0, n - 1)
            ok &= masks[c][i2c, j2c]
            a = ids[c][ii[ok], jj[ok]]
            b = ids[c][i2c[ok], j2c[ok]]
            sel = a < b
            E.append(np.stack([a[sel], b[sel]], axis=1))
    # cross-chart edges near the equator |z| = 1, matched in z-coordinates
    A = [k for k, (c, _, _) in enumerate(nodes) if c == 0 and abs(zpos[k]) > 1 - 3 * grid.h]
    B = [k for k, (c, _, _) in enumerate(nodes) if c == 1 and abs(zpos[k]) < 1 + 4 * grid.h]
    if A and B:
        za = np.array([[zpos[k].real, zpos[k].imag] for k in A])
        zb = np.array([[zpos[k].real, zpos[k].imag] for k in B])
        tree = cKDTree(zb)
        hits = tree.query_ball_point(za, r=2.3 * grid.h)
        cross = [(A[x], B[y]) for x, ys in enumerate(hits) for y in ys]
        if cross:
            E.append(np.array(cross, dtype=np.int64))
    edges = np.concatenate(E)
    return nodes, zpos, edges


def _edge_lengths(grid, nodes, zpos, edges, density):
    """Chart-distance times the mean of sqrt(rho * fs) over the endpoints (in z-coordinates)."""
    vals = np.array([density.values[c, i, j] for c, i, j in nodes])
    # in z-coordinates the FS factor is fs_density(z) for nodes of either chart
    with np.errstate(invalid="ignore"):
        fac = np.sqrt(vals * np.where(np.isfinite(zpos), fs_density(np.where(np.isfinite(zpos), zpos, 0)), 0.0))
    za, zb = zpos[edges[:, 0]], zpos[edges[:, 1]]
    ca = [nodes[k][0] for k in edges[:, 0]]
    cb = [nodes[k][0] for k in edges[:, 1]]
    same = np.array(ca) == np.array(cb)
    # same-chart edges: measure in that chart's own coordinate
    lens = np.empty(len(edges))
    chart_coord = np.array([grid.z[i, j] for _, i, j in nodes])
    wfac = np.sqrt(vals) * np.sqrt(fs_density(chart_coord))
    lens[same] = np.abs(chart_coord[edges[same, 0]] - chart_coord[edges[same, 1]]) * \
        0.5 * (wfac[edges[same, 0]] + wfac[edges[same, 1]])
    lens[~same] = np.abs(za[~same] - zb[~same]) * 0.5 * (fac[edges[~same, 0]] + fac[edges[~same, 1]])
    return lens


def farthest_point_samples(zpos: np.ndarray, count: int) -> list:
    """Deterministic farthest-point sampling in the Fubini-Study distance."""
    count = min(count, len(zpos))
    chosen = [0]
    d = fs_distance(zpos, zpos[0] if np.isfinite(zpos[0]) else INF)
    for _ in range(count - 1):
        k = int(np.argmax(d))
        chosen.append(k)
        d = np.minimum(d, fs_distance(zpos, zpos[k] if np.isfinite(zpos[k]) else INF))
    return chosen


def _sample_distances(grid, nodes, zpos, edges, density, samples):
    lens = _edge_lengths(grid, nodes, zpos, edges, density)
    if not np.all(np.isfinite(lens)) or np.any(lens <= 0):
        raise SamplingError("density must be finite and positive on all graph nodes")
    m = len(nodes)
    G = sp.coo_matrix((lens, (edges[:, 0], edges[:, 1])), shape=(m, m)).tocsr()
    D = dijkstra(G, directed=False, indices=samples)[:, samples]
    if not np.all(np.isfinite(D)):
        raise SamplingError("sample graph is disconnected")
    return D


def gh_upper_bound(density1: ScalarField, density2: ScalarField, grid: SphereGrid | None = None,
                   sample_count: int = 64, exclude: np.ndarray | None = None, report: bool = False):
    """Half the maximal distortion between graph distances of two conformal densities.

    Nodes in ``exclude`` (bool (2, n, n), e.g. nodes next to cone points) are
    removed from the graph.  With ``report`` a dict including the metrication
    error estimate is returned instead of the bare number.
    """
    grid = density1.grid if grid is None else grid
    keep = np.ones((2, grid.n, grid.n), dtype=bool) if exclude is None else ~exclude
    nodes, zpos, edges = _build_graph_structure(grid, keep)
    samples = farthest_point_samples(zpos, sample_count)
    D1 = _sample_distances(grid, nodes, zpos, edges, density1, samples)
    D2 = D1 if density2 is density1 else _sample_distances(grid, nodes, zpos, edges, density2, samples)
    bound = 0.5 * float(np.max(np.abs(D1 - D2)))
    if not report:
        return bound
    diam = max(float(D1.max()), float(D2.max()))
    return {"gh_upper_bound": bound, "samples": len(samples), "diameter_1": float(D1.max()),
            "diameter_2": float(D2.max()), "metrication_error": METRICATION_REL * diam,
            "metrication_rel": METRICATION_REL}


def divisor_exclusion(grid: SphereGrid, divisor: Divisor, radius_nodes: float = 2.0) -> np.ndarray:
    """Nodes within ``radius_nodes`` lattice spacings (chart coordinates) of a zero."""
    out = np.zeros((2, grid.n, grid.n), dtype=bool)
    for c in (0, 1):
        for p, _ in divisor_points_in_chart(divisor, c):
            out[c] |= np.abs(grid.z - p) <= radius_nodes * grid.h * (1 + 1e-9)
    return out


# ------------------------------------------------------------------ reports

def dissolving_report(path: ContinuationPath) -> dict:
    """Per-step quantities along a path toward the lower volume bound."""
    rows = []
    for s in path.solutions:
        g = s.grid
        Phi = s.Phi
        vol = s.volume
        px, py = flat_gradient(Phi.values, g.h)
        dens = s.rho.values * fs_density(g.z)
        grad_g = np.sqrt((px ** 2 + py ** 2) / dens)
        mean = vol / (2 * math.pi)
        dev = np.abs(s.rho.values / mean - 1.0)
        rows.append({
            "volume": vol, "temper": s.lam, "sup_phi": Phi.sup(),
            "int_phi_dvol": integrate(Phi * s.rho),
            "sup_grad_phi_g": float(np.nanmax(grad_g[:, g.owned])),
            "sup_density_deviation": float(np.nanmax(dev[:, g.active])),
        })
    flags = []
    if len(rows) >= 2:
        for key in ("sup_phi", "temper"):
            seq = [r[key] for r in rows]
            if not all(b < a for a, b in zip(seq, seq[1:])):
                flags.append(f"{key} not strictly decreasing")
    return {"steps": rows, "lower_bound": admissible_lower_bound(path.solutions[0].params) if rows else None,
            "flags": flags}


def large_volume_report(branch: ContinuationPath, K_radius: float = 0.5,
                        cone: ConeMetricData | None = None) -> dict:
    """lam Vol against V_(phi), locality of Phi - tau on K, and flux concentration near the zeros."""
    sols = sorted(branch.solutions, key=lambda s: -s.lam)      # descending lam
    first = sols[0]
    g, D, p = first.grid, first.divisor, first.params
    cone = cone or cone_metric(D, p, g)
    dist = distance_to_divisor(g, D)
    K = g.active[None] & (dist >= K_radius)
    near = g.active[None] & (dist < K_radius)
    rows = []
    for s in sols:
        lv = s.lam * s.volume
        supK = float(np.max(np.abs(s.Phi.values - p.tau)[K]))
        flux_dens = 0.5 * (p.tau - s.Phi.values) * s.rho.values
        inside = integrate(ScalarField(np.where(near, flux_dens, 0.0), g))
        rows.append({
            "lambda": s.lam, "volume": s.volume, "lambda_volume": lv,
            "gap_to_cone_volume": cone.volume - lv, "rel_gap": (cone.volume - lv) / cone.volume,
            "sup_K_phi_minus_tau": supK, "ratio_sup_K_over_lambda": supK / s.lam,
            "flux_fraction_near_zeros": inside / (2 * math.pi * p.N),
        })
    lv = [r["lambda_volume"] for r in rows]
    gaps = [r["rel_gap"] for r in rows]
    ratios = [r["ratio_sup_K_over_lambda"] for r in rows]
    return {
        "steps": rows, "cone_volume": cone.volume, "K_radius": K_radius,
        "lambda_volume_increasing": all(b > a for a, b in zip(lv, lv[1:])),
        "below_cone_volume": all(x <= cone.volume for x in lv),
        "gap_shrinking": all(b < a for a, b in zip(gaps, gaps[1:])),
        "ratio_factors": [max(a, b) / min(a, b) for a, b in zip(ratios, ratios[1:])],
    }


def diagnose(sol: EBSolutionCompact) -> dict:
    vol, temper = volume_and_temper(sol)
    gb = gauss_bonnet(sol)
    fl = flux_identities(sol)
    Sg, Sk = curvature_fields(sol)
    return {
        "volume": vol, "temper": temper, "lambda": sol.lam,
        "admissible_lower_bound": admissible_lower_bound(sol.params),
        **gb, **fl,
        "S_g_min": Sg.inf(), "S_g_max": Sg.sup(), "S_k_min": Sk.inf(), "S_k_max": Sk.sup(),
        "sup_phi": sol.Phi.sup(), "residual_norm": sol.residual_norm,
        "solvability_defect": sol.solvability_defect(),
        "resolution": sol.grid.n, "R_c": sol.grid.R_c,
    }


def write_report_json(report: dict, path) -> Path:
    return write_json(report, path)


def write_steps_csv(rows: list, path) -> Path:
    path = Path(path)
    if not rows:
        raise ValidationError("no rows to write")
    keys = list(rows[0].keys())
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow(r)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from None
    return path
