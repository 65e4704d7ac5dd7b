"""Two-chart stereographic discretization of P^1.

Chart A uses the coordinate z, chart B the coordinate w = 1/z.  Both charts
carry the same square lattice over [-L, L]^2; nodes with |z| <= L are active.
A node is *owned* by its chart when |z| < r_own = (R_c + 1/R_c)/2, otherwise
it is an *interface* node whose value is slaved (bicubic interpolation) to
the other chart.  Every point of the sphere lies in the owned part of at
least one chart since 1/r_own < r_own.

The Fubini-Study form is w0 = 2 dx dy / (1 + |z|^2)^2 (total area 2 pi) in
either chart.  Quadrature blends the charts with a smooth partition of unity
supported on |z| <= R_c, so the weighted sum is a trapezoid rule for a
compactly supported smooth integrand.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CheckpointError, ConfigurationError, ValidationError
from .model import INF, Divisor

MIN_RESOLUTION = 16
R_C_RANGE = (1.05, 2.0)
# active disk = R_c + PAD * h, enough room for 5-point and bicubic stencils
PAD = 3

CHECKPOINT_MAGIC = b"EBSF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIId")


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        f0 = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        y = 1.0 - x
        f1 = np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)
    return f0 / (f0 + f1)


def chart_blend(absz, R_c):
    """Partition-of-unity weight of a chart at coordinate modulus |z|.

    Equals 1 for |z| <= 1/R_c and 0 for |z| >= R_c; the value at |z| plus the
    value at 1/|z| is 1.
    """
    ell = math.log(R_c)
    with np.errstate(divide="ignore"):
        x = (np.log(np.asarray(absz, dtype=float)) + ell) / (2 * ell)
    return 1.0 - smooth_step(x)


def fs_density(z):
    """Flat density of the Fubini-Study form: 2 / (1 + |z|^2)^2."""
    return 2.0 / (1.0 + np.abs(z) ** 2) ** 2


def _lagrange4(s):
    """Cubic Lagrange weights on nodes -1, 0, 1, 2 at offset s in [0, 1)."""
    return np.stack([
        -s * (s - 1) * (s - 2) / 6.0,
        (s + 1) * (s - 1) * (s - 2) / 2.0,
        -(s + 1) * s * (s - 2) / 2.0,
        (s + 1) * s * (s - 1) / 6.0,
    ], axis=-1)


@dataclass(eq=False)
class SphereGrid:
    resolution: int
    R_c: float
    L: float
    h: float
    coords: np.ndarray            # 1D lattice coordinates
    z: np.ndarray                 # complex chart coordinate, (n, n), index [i, j] -> x_i + i y_j
    active: np.ndarray            # bool (n, n)
    owned: np.ndarray             # bool (n, n)
    interface: np.ndarray         # bool (n, n)
    weights: np.ndarray           # (2, n, n) quadrature weights, zero off the support
    index: np.ndarray             # (2, n, n) global unknown index, -1 if inactive
    interp: sp.csr_matrix = field(repr=False)   # interface rows <- all active values
    interface_ids: np.ndarray = field(repr=False)
    owned_ids: np.ndarray = field(repr=False)
    _fill_lu: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.resolution

    @property
    def size(self) -> int:
        return 2 * int(self.active.sum())

    @property
    def r_own(self) -> float:
        return 0.5 * (self.R_c + 1.0 / self.R_c)

    @property
    def absz(self) -> np.ndarray:
        return np.abs(self.z)

    @property
    def fs_weight(self) -> np.ndarray:
        """Per-node Fubini-Study density 2/(1+|z|^2)^2 (same formula in both charts)."""
        return fs_density(self.z)

    def chart_coord(self, chart: int) -> np.ndarray:
        return self.z

    def sphere_points(self):
        """Complex z-coordinate of every node of both charts (inf for w = 0)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            zb = np.where(self.z == 0, np.inf, 1.0 / np.where(self.z == 0, 1.0, self.z))
        return np.stack([self.z, zb])

    def to_vector(self, values: np.ndarray) -> np.ndarray:
        return values[:, self.active].reshape(-1)

    def from_vector(self, vec: np.ndarray) -> np.ndarray:
        out = np.full((2, self.n, self.n), np.nan)
        m = int(self.active.sum())
        out[0][self.active] = vec[:m]
        out[1][self.active] = vec[m:]
        return out

    def fill_interface(self, values: np.ndarray) -> np.ndarray:
        """Overwrite interface nodes by interpolation from the other chart's owned data."""
        vec = self.to_vector(values).copy()
        P = self.interp
        Po = P[:, self.owned_ids]
        Pi = P[:, self.interface_ids]
        if self._fill_lu is None:
            A = sp.identity(len(self.interface_ids), format="csc") - Pi.tocsc()
            self._fill_lu = spla.splu(A)
        vec[self.interface_ids] = self._fill_lu.solve(Po @ vec[self.owned_ids])
        return self.from_vector(vec)

    def interface_defect(self, values: np.ndarray) -> float:
        vec = self.to_vector(values)
        return float(np.max(np.abs(vec[self.interface_ids] - self.interp @ vec)))

    def evaluate(self, values: np.ndarray, points) -> np.ndarray:
        """Bicubic evaluation of a field at arbitrary points of P^1 (complex z, inf allowed)."""
        pts = np.atleast_1d(np.asarray(points, dtype=complex))
        out = np.empty(pts.shape, dtype=float)
        for k, p in enumerate(pts):
            if not np.isfinite(p):
                chart, q = 1, 0j
            elif abs(p) <= 1.0:
                chart, q = 0, p
            else:
                chart, q = 1, 1.0 / p
            rows, cols, w = self._stencil(q)
            out[k] = float(np.sum(w * values[chart][rows, cols]))
        return out

    def _stencil(self, q: complex):
        sx = (q.real + self.L) / self.h
        sy = (q.imag + self.L) / self.h
        i0, j0 = int(math.floor(sx)), int(math.floor(sy))
        wx, wy = _lagrange4(sx - i0), _lagrange4(sy - j0)
        ii = np.arange(i0 - 1, i0 + 3)
        jj = np.arange(j0 - 1, j0 + 3)
        rows, cols = np.meshgrid(ii, jj, indexing="ij")
        return rows, cols, np.outer(wx, wy)


def build_grid(resolution: int, R_c: float = 1.2) -> SphereGrid:
    n = int(resolution)
    if n != resolution or n < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be an integer >= {MIN_RESOLUTION}, got {resolution}")
    if not (R_C_RANGE[0] <= R_c <= R_C_RANGE[1]):
        raise ConfigurationError(f"R_c must lie in [{R_C_RANGE[0]}, {R_C_RANGE[1]}], got {R_c}")
    L = R_c / (1.0 - 2.0 * PAD / (n - 1))
    h = 2.0 * L / (n - 1)
    # centred form keeps the lattice exactly symmetric under x -> -x and rotation by pi/2
    coords = h * (np.arange(n) - 0.5 * (n - 1))
    X, Y = np.meshgrid(coords, coords, indexing="ij")
    z = X + 1j * Y
    absz = np.abs(z)
    active = absz <= L * (1 + 1e-12)
    r_own = 0.5 * (R_c + 1.0 / R_c)
    owned = active & (absz < r_own)
    interface = active & ~owned

    blend = np.where(active, chart_blend(absz, R_c), 0.0)
    w1 = blend * fs_density(z) * h * h
    weights = np.stack([w1, w1])

    m = int(active.sum())
    index = np.full((2, n, n), -1, dtype=np.int64)
    index[0][active] = np.arange(m)
    index[1][active] = m + np.arange(m)

    grid = SphereGrid(
        resolution=n, R_c=float(R_c), L=L, h=h, coords=coords, z=z,
        active=active, owned=owned, interface=interface, weights=weights,
        index=index, interp=sp.csr_matrix((0, 2 * m)),
        interface_ids=np.concatenate([index[0][interface], index[1][interface]]),
        owned_ids=np.concatenate([index[0][owned], index[1][owned]]),
    )
    grid.interp = _interface_operator(grid)
    return grid


def _interface_operator(grid: SphereGrid) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for chart in (0, 1):
        other = 1 - chart
        ii, jj = np.nonzero(grid.interface)
        for r, (i, j) in enumerate(zip(ii, jj)):
            q = 1.0 / grid.z[i, j]
            si, sj, w = grid._stencil(q)
            gid = grid.index[other][si, sj]
            if np.any(gid < 0):
                raise ValidationError("interpolation stencil leaves the active disk")
            rows.append(np.full(16, chart * len(ii) + r))
            cols.append(gid.ravel())
            vals.append(w.ravel())
    k = len(grid.interface_ids)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(k, grid.size),
    )


@dataclass(eq=False)
class ScalarField:
    """Values of a function on P^1 at the nodes of both charts."""

    values: np.ndarray
    grid: SphereGrid
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (2, self.grid.n, self.grid.n):
            raise ValidationError(
                f"field shape {self.values.shape} does not match grid ({2}, {self.grid.n}, {self.grid.n})"
            )

    @classmethod
    def from_function(cls, grid: SphereGrid, f, name: str = "") -> "ScalarField":
        """Sample f(z) on both charts; f receives complex z (may be inf at w = 0)."""
        pts = grid.sphere_points()
        vals = np.full((2, grid.n, grid.n), np.nan)
        for c in (0, 1):
            vals[c][grid.active] = f(pts[c][grid.active])
        return cls(vals, grid, name)

    @classmethod
    def constant(cls, grid: SphereGrid, c: float, name: str = "") -> "ScalarField":
        vals = np.full((2, grid.n, grid.n), np.nan)
        vals[:, grid.active] = c
        return cls(vals, grid, name)

    def vector(self) -> np.ndarray:
        return self.grid.to_vector(self.values)

    def copy(self, name=None) -> "ScalarField":
        return ScalarField(self.values.copy(), self.grid, self.name if name is None else name)

    def map(self, fn, name="") -> "ScalarField":
        return ScalarField(fn(self.values), self.grid, name)

    def owned_values(self) -> np.ndarray:
        return self.values[:, self.grid.owned]

    def sup(self) -> float:
        return float(np.nanmax(self.values[:, self.grid.active]))

    def inf(self) -> float:
        return float(np.nanmin(self.values[:, self.grid.active]))

    def __add__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.values + o, self.grid)

    def __sub__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.values - o, self.grid)

    def __mul__(self, other):
        o = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.values * o, self.grid)

    __rmul__ = __mul__


def _check(field_: ScalarField, grid: SphereGrid):
    if field_.grid is not grid and (
        field_.grid.resolution != grid.resolution or field_.grid.R_c != grid.R_c
    ):
        raise ValidationError("field belongs to a different grid")


def integrate(field_: ScalarField, grid: SphereGrid | None = None, flat: bool = False) -> float:
    """Integral of the field against w0, or against dx dy when ``flat`` (chart densities).

    Summation runs in a fixed order (chart A then B, row-major) for reproducibility.
    """
    grid = field_.grid if grid is None else grid
    _check(field_, grid)
    w = grid.weights
    if flat:
        w = w / np.where(grid.active, fs_density(grid.z), 1.0)
    vals = np.where(w > 0, field_.values, 0.0)
    return float(math.fsum((w * vals).ravel()))


def five_point(values: np.ndarray, h: float) -> np.ndarray:
    """Flat 5-point Laplacian on the interior of each (n, n) slab; NaN on the frame."""
    out = np.full(values.shape, np.nan)
    c = values[..., 1:-1, 1:-1]
    out[..., 1:-1, 1:-1] = (
        values[..., 2:, 1:-1] + values[..., :-2, 1:-1]
        + values[..., 1:-1, 2:] + values[..., 1:-1, :-2] - 4 * c
    ) / (h * h)
    return out


def laplacian_fs(field_: ScalarField, grid: SphereGrid | None = None, fill: bool = True) -> ScalarField:
    """Delta_{w0} v = -(1/2)(1+|z|^2)^2 (v_xx + v_yy).

    Evaluated at owned nodes; interface nodes are then filled by interpolation
    unless ``fill`` is false (they are NaN then).
    """
    grid = field_.grid if grid is None else grid
    _check(field_, grid)
    lap = five_point(field_.values, grid.h)
    fac = -0.5 * (1 + grid.absz ** 2) ** 2
    out = np.where(grid.owned, fac * lap, np.nan)
    if fill:
        out = grid.fill_interface(np.where(grid.active, np.nan_to_num(out), np.nan))
    return ScalarField(out, grid, "laplacian")


def laplacian_matrix(grid: SphereGrid) -> sp.csr_matrix:
    """Sparse Delta_{w0} rows for owned nodes (global column indexing), zero rows elsewhere."""
    n = grid.n
    fac = -0.5 * (1 + grid.absz ** 2) ** 2 / (grid.h ** 2)
    rows, cols, vals = [], [], []
    ii, jj = np.nonzero(grid.owned)
    for c in (0, 1):
        g = grid.index[c]
        centre = g[ii, jj]
        f = fac[ii, jj]
        rows.append(centre); cols.append(centre); vals.append(-4 * f)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rows.append(centre); cols.append(g[ii + di, jj + dj]); vals.append(f)
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    return M


def flat_gradient(values: np.ndarray, h: float, order: int = 2):
    """Central-difference (d/dx, d/dy) per chart, NaN where the stencil leaves the lattice.

    ``order`` is 2 (3-point) or 4 (5-point stencil).
    """
    gx = np.full(values.shape, np.nan)
    gy = np.full(values.shape, np.nan)
    if order == 2:
        gx[..., 1:-1, :] = (values[..., 2:, :] - values[..., :-2, :]) / (2 * h)
        gy[..., :, 1:-1] = (values[..., :, 2:] - values[..., :, :-2]) / (2 * h)
    elif order == 4:
        gx[..., 2:-2, :] = (8 * (values[..., 3:-1, :] - values[..., 1:-3, :])
                            - (values[..., 4:, :] - values[..., :-4, :])) / (12 * h)
        gy[..., :, 2:-2] = (8 * (values[..., :, 3:-1] - values[..., :, 1:-3])
                            - (values[..., :, 4:] - values[..., :, :-4])) / (12 * h)
    else:
        raise ValidationError("order must be 2 or 4")
    return gx, gy


@dataclass(eq=False)
class HiggsData:
    """Background |phi|^2_{h0} and its logarithm, with analytic derivatives.

    ``grad_log`` stores d/dx + i d/dy of log Phi0 (complex), ``G`` stores the
    smooth quantity |grad Phi0|^2 / Phi0 including its limit at the zeros.
    """

    phi0: ScalarField
    u0: ScalarField
    singular: np.ndarray
    grad_log: np.ndarray
    G: np.ndarray
    divisor: Divisor
    scale: float = 1.0

    def __iter__(self):
        yield self.phi0
        yield self.u0


def _chart_factors(divisor: Divisor, N: int, chart: int):
    """(points, mults, extra) for Phi0 in the given chart.

    Chart A: prod |z - p|^{2n} (1+|z|^2)^{-N}.  Chart B: |w|^{2 n_inf} prod |1 - p w|^{2n} (1+|w|^2)^{-N},
    i.e. zeros at 1/p (p != 0) and at w = 0 for p = inf, with the constant prod |p|^{2n}.
    """
    pts, mults, const = [], [], 1.0
    for p, m in divisor.entries:
        if chart == 0:
            if p is INF:
                continue
            pts.append(p); mults.append(m)
        else:
            if p is INF:
                pts.append(0j); mults.append(m)
            elif p == 0:
                continue
            else:
                pts.append(1.0 / p); mults.append(m); const *= abs(p) ** (2 * m)
    return pts, mults, const


def higgs_data(divisor: Divisor, grid: SphereGrid, scale: float = 1.0) -> HiggsData:
    """Phi0 = |phi|^2_{h0} for the monic section with divisor D (times ``scale``)."""
    N = divisor.total
    tol = 1e-12 * grid.h
    phi0 = np.full((2, grid.n, grid.n), np.nan)
    u0 = np.full((2, grid.n, grid.n), np.nan)
    glog = np.full((2, grid.n, grid.n), np.nan, dtype=complex)
    G = np.full((2, grid.n, grid.n), np.nan)
    singular = np.zeros((2, grid.n, grid.n), dtype=bool)
    z = grid.z[grid.active]
    for c in (0, 1):
        pts, mults, const = _chart_factors(divisor, N, c)
        q = 1 + np.abs(z) ** 2
        logp = np.log(scale * const) - N * np.log(q)
        g = -2 * N * z / q
        sing = np.zeros(z.shape, dtype=bool)
        for p, m in zip(pts, mults):
            d = z - p
            hit = np.abs(d) <= tol
            sing |= hit
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = logp + m * np.log(np.abs(d) ** 2)
                g = g + np.where(hit, 0, 2 * m / np.conj(np.where(hit, 1, d)))
        P = np.exp(logp)
        P[sing] = 0.0
        with np.errstate(invalid="ignore"):
            Gc = P * np.abs(g) ** 2
        # limit at a zero: 4 * (rest of the product) for a simple zero, 0 for higher order
        for k in np.nonzero(sing)[0]:
            Gc[k] = 0.0
            for p, m in zip(pts, mults):
                if abs(z[k] - p) <= tol and m == 1:
                    rest = scale * const / (1 + abs(z[k]) ** 2) ** N
                    for p2, m2 in zip(pts, mults):
                        if p2 != p:
                            rest *= abs(z[k] - p2) ** (2 * m2)
                    Gc[k] = 4 * rest
        g[sing] = np.nan
        phi0[c][grid.active] = P
        u0[c][grid.active] = np.where(sing, -np.inf, logp)
        glog[c][grid.active] = g
        G[c][grid.active] = Gc
        singular[c][grid.active] = sing
    return HiggsData(
        phi0=ScalarField(phi0, grid, "Phi0"), u0=ScalarField(u0, grid, "u0"),
        singular=singular, grad_log=glog, G=G, divisor=divisor, scale=float(scale),
    )


def divisor_points_in_chart(divisor: Divisor, chart: int) -> list:
    """Zeros as (chart coordinate, multiplicity) for the given chart."""
    pts, mults, _ = _chart_factors(divisor, divisor.total, chart)
    return list(zip(pts, mults))


# ---------------------------------------------------------------- I/O

def write_field_csv(field_: ScalarField, path) -> Path:
    """Rows ``chart,i,j,x,y,value`` for every active node."""
    g = field_.grid
    path = Path(path)
    ii, jj = np.nonzero(g.active)
    try:
        with open(path, "w") as fh:
            fh.write("chart,i,j,x,y,value\n")
            for c in (0, 1):
                for i, j in zip(ii, jj):
                    fh.write(f"{c},{i},{j},{g.coords[i]!r},{g.coords[j]!r},{field_.values[c, i, j]!r}\n")
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from None
    return path


def write_field_binary(field_: ScalarField, path) -> Path:
    """Header ``<4sIId`` (magic, version, resolution, R_c) then 2*n*n little-endian float64."""
    g = field_.grid
    path = Path(path)
    vals = np.where(g.active, field_.values, np.nan).astype("<f8")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, g.n, g.R_c))
            fh.write(vals.tobytes(order="C"))
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from None
    return path


def read_field_binary(path, grid: SphereGrid | None = None) -> ScalarField:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n, R_c = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    expected = _HEADER.size + 2 * n * n * 8
    if len(raw) != expected:
        raise CheckpointError(f"{path}: payload size {len(raw)} != {expected}")
    if grid is None:
        grid = build_grid(n, R_c)
    elif grid.n != n or grid.R_c != R_c:
        raise CheckpointError(f"{path}: checkpoint grid ({n}, {R_c}) does not match ({grid.n}, {grid.R_c})")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(2, n, n).astype(float)
    return ScalarField(vals, grid)


def write_json(obj, path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from None
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not JSON serializable: {type(o)}")
