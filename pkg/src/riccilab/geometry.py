"""Discretized reduced-symmetry geometries.

Three models are supported, each reduced to a low-dimensional grid by
symmetry:

* ``euclidean_radial``: flat R^n truncated at ``r_max``, radial coordinate
  r in [0, r_max], warp phi(r) = r.  Cells near the far boundary behave
  as Dirichlet (evolved densities are required to stay below 1e-12 of
  their max there, checked at runtime by the solvers).
* ``sphere_radial``: the round sphere S^n of radius a, polar coordinate
  psi in [0, pi], warp phi(psi) = a sin(psi), radial stretch beta = a.
* ``flat_torus_conformal``: 2-d torus [0, Lx) x [0, Ly) with metric
  g = exp(2 v) g_flat.

Radial grids are cell-centered (nodes at (j + 1/2) h), so no node sits at
a pole; fields extend evenly across poles and the warp extends oddly.
Quadrature is the midpoint rule against the analytic volume density,
which for smooth even integrands is superalgebraically accurate (all odd
derivatives of r^{n-1} f vanish at the pole, Euler-Maclaurin).  Balls are
closed: ``d <= rho``.

Basepoints are restricted to fixed-point sets of the symmetry: the poles
on radial models ("pole", and "antipode" on the sphere), and grid nodes
(ix, iy) or ridges ("ridge", ix) on the torus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

EUCLIDEAN = "euclidean_radial"
SPHERE = "sphere_radial"
TORUS = "flat_torus_conformal"
KINDS = (EUCLIDEAN, SPHERE, TORUS)

MIN_RESOLUTION = 16


class GeometryError(ValueError):
    """Invalid geometry configuration or non-smooth profile."""


def sphere_area(n: int) -> float:
    """Surface area of the unit (n-1)-sphere, 2 pi^{n/2} / Gamma(n/2)."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


@dataclass(frozen=True)
class GeometryModel:
    kind: str
    dimension: int
    resolution: int
    r_max: Optional[float] = None
    radius: Optional[float] = None
    periods: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"geometry.kind: unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.dimension < 2:
            raise GeometryError(f"geometry.dimension: n >= 2 required, got {self.dimension}")
        if self.resolution < MIN_RESOLUTION:
            raise GeometryError(
                f"geometry.resolution: at least {MIN_RESOLUTION} nodes required, got {self.resolution}")
        if self.kind == EUCLIDEAN:
            if self.r_max is None or self.r_max <= 0:
                raise GeometryError("geometry.r_max: positive truncation radius required")
        elif self.kind == SPHERE:
            if self.radius is None or self.radius <= 0:
                raise GeometryError("geometry.radius: positive radius required")
        elif self.kind == TORUS:
            if self.dimension != 2:
                raise GeometryError("geometry.dimension: the conformal torus model is 2-d")
            if self.periods is None or min(self.periods) <= 0:
                raise GeometryError("geometry.periods: positive fundamental-domain lengths required")


@dataclass(frozen=True)
class Grid:
    """Node coordinates, quadrature weights and boundary flags."""

    model: GeometryModel
    coords: np.ndarray          # radial: (N,) cell centers; torus: (2,) object -> use axes
    spacing: float
    faces: Optional[np.ndarray] = None        # radial: (N+1,) cell faces
    axes: Optional[tuple[np.ndarray, np.ndarray]] = None   # torus node coordinates per axis
    spacing_y: Optional[float] = None

    @property
    def n_nodes(self) -> int:
        if self.model.kind == TORUS:
            return self.axes[0].size * self.axes[1].size
        return self.coords.size

    @property
    def shape(self) -> tuple:
        if self.model.kind == TORUS:
            return (self.axes[0].size, self.axes[1].size)
        return (self.coords.size,)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MetricSlice:
    """One time-slice of the flow.

    ``volume_density`` is the metric volume element per unit coordinate
    measure (already including the angular factor omega_{n-1} on radial
    models), so integration is ``sum(field * volume_density) * coord_cell``.
    ``weights`` caches that product.  ``scalar_curvature`` is cached at
    construction and must agree with :func:`scalar_curvature` to roundoff.
    """

    grid: Grid
    time: float
    warp: Optional[np.ndarray] = None          # radial phi at nodes (length units)
    warp_faces: Optional[np.ndarray] = None    # radial phi at faces
    radial_scale: float = 1.0                  # beta (ds = beta dx along the radial coordinate)
    conf: Optional[np.ndarray] = None          # torus conformal exponent v
    volume_density: np.ndarray = None
    scalar_curvature: np.ndarray = None
    weights: np.ndarray = field(default=None, repr=False)
    conductances: np.ndarray = field(default=None, repr=False)  # radial faces / unused on torus

    @property
    def model(self) -> GeometryModel:
        return self.grid.model

    @property
    def dimension(self) -> int:
        return self.grid.model.dimension


def _radial_grid(model: GeometryModel, span: float) -> Grid:
    n = model.resolution
    h = span / n
    faces = np.linspace(0.0, span, n + 1)
    coords = 0.5 * (faces[:-1] + faces[1:])
    return Grid(model=model, coords=_freeze(coords), spacing=h, faces=_freeze(faces))


def _torus_grid(model: GeometryModel) -> Grid:
    nx = ny = model.resolution
    lx, ly = model.periods
    hx, hy = lx / nx, ly / ny
    ax = np.arange(nx) * hx
    ay = np.arange(ny) * hy
    return Grid(model=model, coords=_freeze(ax), spacing=hx,
                axes=(_freeze(ax), _freeze(ay)), spacing_y=hy)


def _radial_curvature(phi: np.ndarray, beta: float, n: int, h: float,
                      closed: bool, max_second_difference: Optional[float] = None) -> np.ndarray:
    """Warped-product scalar curvature from the profile.

    R = (n-1) [ (n-2) (1 - phi'^2)/phi^2 - 2 phi''/phi ] with arclength
    derivatives (phi' = d phi / (beta dx)).  The spherical term is a 0/0
    ratio at a pole: phi^2 ~ psi^2 there, so the O(h^2) error of a
    second-order phi' stencil would be amplified to O(1) at the first
    nodes.  phi' therefore uses a fourth-order stencil (with odd ghost
    extension across poles, which is exact for a smooth pole closure),
    keeping the max-node error O(h^2) uniformly.
    """
    if not np.all(np.isfinite(phi)):
        raise GeometryError("metric profile contains non-finite values")
    if np.any(phi <= 0):
        raise GeometryError("warp factor must be positive at interior nodes")
    # two ghosts per side: odd extension across poles, linear extrapolation at an open end
    if closed:
        right = np.array([-phi[-1], -phi[-2]])
    else:
        right = np.array([2 * phi[-1] - phi[-2], 3 * phi[-1] - 2 * phi[-2]])
    ext = np.concatenate(([-phi[1], -phi[0]], phi, right))
    c = ext[2:-2]  # == phi
    d1 = (-ext[4:] + 8 * ext[3:-1] - 8 * ext[1:-3] + ext[:-4]) / (12.0 * h * beta)
    d2 = (ext[3:-1] - 2.0 * c + ext[1:-3]) / (h * beta) ** 2
    if max_second_difference is not None and np.max(np.abs(d2)) > max_second_difference:
        raise GeometryError(
            f"profile second difference {np.max(np.abs(d2)):.3e} exceeds bound {max_second_difference:.3e}")
    kappa_rad = -d2 / phi
    kappa_sph = (1.0 - d1 ** 2) / phi ** 2
    return (n - 1) * ((n - 2) * kappa_sph + 2.0 * kappa_rad)


def _torus_laplacian0(v: np.ndarray, hx: float, hy: float) -> np.ndarray:
    return ((np.roll(v, -1, 0) - 2 * v + np.roll(v, 1, 0)) / hx ** 2
            + (np.roll(v, -1, 1) - 2 * v + np.roll(v, 1, 1)) / hy ** 2)


def _radial_conductances(phi_faces: np.ndarray, beta: float, h: float, n: int,
                         omega: float, closed: bool) -> np.ndarray:
    """Face conductances for the radial Laplacian, moment corrected.

    The plain finite-volume choice omega phi_f^{n-1} / (beta h) leaves an
    O(h^2/r^2) defect in the discrete Laplacian of the squared distance,
    which pumps kernel second moments logarithmically near a pole.  For
    n = 3 and n = 4 the conductance is corrected so that the discrete
    Laplacian of r^2 telescopes to exactly 2n on a flat profile (the
    correction is an O(h^2) relative perturbation away from poles).
    """
    bh = beta * h
    if n == 3:
        q = phi_faces ** 2 - bh ** 2 / 4.0
    elif n == 4:
        q = phi_faces ** 3 - (bh ** 2 / 2.0) * phi_faces
    else:
        q = phi_faces ** (n - 1)
    c = omega * np.clip(q, 0.0, None) / (beta * h)
    c = c.copy()
    c[0] = 0.0
    if closed:
        c[-1] = 0.0
    return c


def euclidean_slice(grid: Grid, t: float = 0.0) -> MetricSlice:
    n = grid.model.dimension
    omega = sphere_area(n)
    phi = grid.coords.copy()
    phi_faces = grid.faces.copy()
    dens = omega * phi ** (n - 1)
    curv = np.zeros_like(phi)
    cond = _radial_conductances(phi_faces, 1.0, grid.spacing, n, omega, closed=False)
    return MetricSlice(grid=grid, time=t, warp=_freeze(phi), warp_faces=_freeze(phi_faces),
                       radial_scale=1.0, volume_density=_freeze(dens),
                       scalar_curvature=_freeze(curv),
                       weights=_freeze(dens * grid.spacing), conductances=_freeze(cond))


def sphere_slice(grid: Grid, a: float, t: float = 0.0) -> MetricSlice:
    if a <= 0:
        raise GeometryError(f"sphere radius must stay positive, got {a}")
    n = grid.model.dimension
    omega = sphere_area(n)
    psi = grid.coords
    phi = a * np.sin(psi)
    phi_faces = a * np.sin(grid.faces)
    dens = omega * phi ** (n - 1) * a
    curv = np.full_like(psi, n * (n - 1) / a ** 2)
    cond = _radial_conductances(np.abs(phi_faces), a, grid.spacing, n, omega, closed=True)
    return MetricSlice(grid=grid, time=t, warp=_freeze(phi), warp_faces=_freeze(phi_faces),
                       radial_scale=a, volume_density=_freeze(dens),
                       scalar_curvature=_freeze(curv),
                       weights=_freeze(dens * grid.spacing), conductances=_freeze(cond))


def torus_slice(grid: Grid, v: np.ndarray, t: float = 0.0) -> MetricSlice:
    v = np.asarray(v, dtype=float)
    if v.shape != grid.shape:
        raise GeometryError(f"conformal exponent shape {v.shape} != grid shape {grid.shape}")
    if not np.all(np.isfinite(v)):
        raise GeometryError("conformal exponent contains non-finite values")
    hx, hy = grid.spacing, grid.spacing_y
    e2v = np.exp(2.0 * v)
    curv = -2.0 * _torus_laplacian0(v, hx, hy) / e2v
    return MetricSlice(grid=grid, time=t, conf=_freeze(v),
                       volume_density=_freeze(e2v),
                       scalar_curvature=_freeze(curv),
                       weights=_freeze(e2v * hx * hy))


def build_geometry(model: GeometryModel) -> tuple[Grid, MetricSlice]:
    """Build the grid and the canonical initial slice of a model."""
    if model.kind == EUCLIDEAN:
        grid = _radial_grid(model, model.r_max)
        return grid, euclidean_slice(grid)
    if model.kind == SPHERE:
        grid = _radial_grid(model, math.pi)
        return grid, sphere_slice(grid, model.radius)
    grid = _torus_grid(model)
    return grid, torus_slice(grid, np.zeros(grid.shape))


def scalar_curvature(slc: MetricSlice, max_second_difference: Optional[float] = None) -> np.ndarray:
    """Recompute the scalar curvature field from the stored profile."""
    model = slc.model
    if model.kind == TORUS:
        return torus_slice(slc.grid, slc.conf, slc.time).scalar_curvature
    return _radial_curvature(np.asarray(slc.warp), slc.radial_scale, model.dimension,
                             slc.grid.spacing, closed=(model.kind == SPHERE),
                             max_second_difference=max_second_difference)


def check_field(slc: MetricSlice, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != slc.grid.shape:
        raise GeometryError(f"field shape {f.shape} != grid shape {slc.grid.shape}")
    if not np.all(np.isfinite(f)):
        raise GeometryError("field contains non-finite values")
    return f


def integrate(slc: MetricSlice, f: np.ndarray) -> float:
    """Quadrature of a node field against the slice volume measure dg."""
    f = check_field(slc, f)
    return float(np.sum(f * slc.weights))


def total_volume(slc: MetricSlice) -> float:
    return float(np.sum(slc.weights))


# ---------------------------------------------------------------------------
# basepoints and distances

POLE = "pole"
ANTIPODE = "antipode"


def resolve_basepoint(slc: MetricSlice, point):
    """Normalize a basepoint spec; raises on unsupported points.

    Radial models accept "pole" (and "antipode" on the sphere).  The torus
    accepts node tuples (ix, iy) and ridges ("ridge", ix).
    """
    kind = slc.model.kind
    if kind in (EUCLIDEAN, SPHERE):
        if point == POLE:
            return POLE
        if point == ANTIPODE and kind == SPHERE:
            return ANTIPODE
        raise GeometryError(f"basepoint {point!r} not representable on {kind} (poles only)")
    if isinstance(point, tuple) and len(point) == 2 and point[0] == "ridge":
        ix = int(point[1]) % slc.grid.shape[0]
        return ("ridge", ix)
    if isinstance(point, tuple) and len(point) == 2:
        nx, ny = slc.grid.shape
        return (int(point[0]) % nx, int(point[1]) % ny)
    raise GeometryError(f"basepoint {point!r} not representable on the torus")


def _wrap(d: np.ndarray, period: float) -> np.ndarray:
    return (d + 0.5 * period) % period - 0.5 * period


def _torus_segment_length(slc: MetricSlice, x0, y0, dx, dy, samples: int = 64) -> float:
    """Conformal length of the straight flat segment from (x0,y0) with offset (dx,dy).

    Documented approximation: the flat-shortest representative corrected by
    the conformal factor sampled along it (exact when v is constant).
    """
    s = (np.arange(samples) + 0.5) / samples
    xs = x0 + s * dx
    ys = y0 + s * dy
    v = _bilinear_periodic(slc.conf, xs, ys, slc.grid)
    return float(np.mean(np.exp(v)) * math.hypot(dx, dy))


def _bilinear_periodic(f: np.ndarray, xs: np.ndarray, ys: np.ndarray, grid: Grid) -> np.ndarray:
    nx, ny = f.shape
    hx, hy = grid.spacing, grid.spacing_y
    fx = xs / hx
    fy = ys / hy
    ix = np.floor(fx).astype(int)
    iy = np.floor(fy).astype(int)
    tx = fx - ix
    ty = fy - iy
    ix %= nx
    iy %= ny
    ix1 = (ix + 1) % nx
    iy1 = (iy + 1) % ny
    return ((1 - tx) * (1 - ty) * f[ix, iy] + tx * (1 - ty) * f[ix1, iy]
            + (1 - tx) * ty * f[ix, iy1] + tx * ty * f[ix1, iy1])


def distance_field(slc: MetricSlice, basepoint) -> np.ndarray:
    """Geodesic distance from the basepoint to every node.

    Radial models: exact arclength along the ray.  Torus: conformal-corrected
    straight flat segments (see ``_torus_segment_length``); ridge basepoints
    measure the flat wrapped x-distance only.
    """
    bp = resolve_basepoint(slc, basepoint)
    kind = slc.model.kind
    if kind == EUCLIDEAN:
        return slc.grid.coords.copy()
    if kind == SPHERE:
        psi = slc.grid.coords
        if bp == POLE:
            return slc.radial_scale * psi
        return slc.radial_scale * (math.pi - psi)
    ax, ay = slc.grid.axes
    lx = slc.model.periods[0]
    if bp[0] == "ridge":
        dx = _wrap(ax - ax[bp[1]], lx)
        return np.repeat(np.abs(dx)[:, None], ay.size, axis=1)
    ly = slc.model.periods[1]
    x0, y0 = ax[bp[0]], ay[bp[1]]
    dxs = _wrap(ax - x0, lx)[:, None, None]
    dys = _wrap(ay - y0, ly)[None, :, None]
    s = ((np.arange(16) + 0.5) / 16)[None, None, :]
    shape3 = (ax.size, ay.size, 16)
    xs = np.broadcast_to(x0 + s * dxs, shape3)
    ys = np.broadcast_to(y0 + s * dys, shape3)
    v = _bilinear_periodic(slc.conf, xs.ravel(), ys.ravel(), slc.grid).reshape(shape3)
    return np.mean(np.exp(v), axis=2) * np.hypot(dxs[:, :, 0], dys[:, :, 0])


def radial_distance(slc: MetricSlice, p, q) -> float:
    """Geodesic distance between two grid-representable points.

    Radial models require at least one point to be a pole; the other may be
    a pole name or a radial coordinate (float).  Torus points are nodes.
    """
    kind = slc.model.kind
    if kind in (EUCLIDEAN, SPHERE):
        names = {POLE, ANTIPODE} if kind == SPHERE else {POLE}
        if p in names and q in names:
            if p == q:
                return 0.0
            return math.pi * slc.radial_scale
        if q in names and p not in names:
            p, q = q, p
        if p not in names:
            raise GeometryError("radial models support distances from a pole only")
        x = float(q)
        span = slc.grid.faces[-1]
        if not 0.0 <= x <= span:
            raise GeometryError(f"radial coordinate {x} outside [0, {span}]")
        d = x if p == POLE else span - x
        return d * (slc.radial_scale if kind == SPHERE else 1.0)
    bp = resolve_basepoint(slc, p)
    bq = resolve_basepoint(slc, q)
    if bp[0] == "ridge" or bq[0] == "ridge":
        if not (bp[0] == "ridge" and bq[0] == "ridge"):
            raise GeometryError("ridge distances require two ridge points")
        ax = slc.grid.axes[0]
        return float(abs(_wrap(ax[bq[1]] - ax[bp[1]], slc.model.periods[0])))
    ax, ay = slc.grid.axes
    dx = float(_wrap(ax[bq[0]] - ax[bp[0]], slc.model.periods[0]))
    dy = float(_wrap(ay[bq[1]] - ay[bp[1]], slc.model.periods[1]))
    return _torus_segment_length(slc, ax[bp[0]], ay[bp[1]], dx, dy)


@dataclass(frozen=True)
class BallVolume:
    value: float
    clipped: bool


def ball_volume(slc: MetricSlice, center, rho: float) -> BallVolume:
    """Volume of the closed geodesic ball of radius rho about a basepoint.

    Cells partially covered contribute fractionally (linear in the cell),
    so the result is continuous in rho to within one cell.  A radius
    reaching beyond the model is clipped and flagged.
    """
    if rho <= 0:
        raise GeometryError("ball radius must be positive")
    d = distance_field(slc, center)
    kind = slc.model.kind
    if kind in (EUCLIDEAN, SPHERE):
        cell = slc.grid.spacing * (slc.radial_scale if kind == SPHERE else 1.0)
    else:
        cell = slc.grid.spacing
    frac = np.clip((rho - d) / cell + 0.5, 0.0, 1.0)
    clipped = bool(rho > float(np.max(d)) + 0.5 * cell)
    return BallVolume(value=float(np.sum(frac * slc.weights)), clipped=clipped)


def region_ball(slc: MetricSlice, center, rho: float) -> np.ndarray:
    """Boolean node mask of the closed ball, for use as a test-function region."""
    d = distance_field(slc, center)
    mask = d <= rho
    if int(np.sum(mask)) < 4:
        raise GeometryError(f"region of {int(np.sum(mask))} cells too small to resolve (need >= 4)")
    return mask


# ---------------------------------------------------------------------------
# discrete Dirichlet form and Laplacian data

def dirichlet_matrix(slc: MetricSlice):
    """Sparse symmetric K with w^T K w = int |grad w|^2 dg (w zero past open ends).

    K has zero row sums except at the Euclidean truncation boundary, where
    the edge to the zero ghost realizes the Dirichlet condition.
    """
    import scipy.sparse as sp

    kind = slc.model.kind
    if kind in (EUCLIDEAN, SPHERE):
        c = np.asarray(slc.conductances)
        n = slc.grid.coords.size
        interior = c[1:-1]
        diag = np.zeros(n)
        diag[:-1] += interior
        diag[1:] += interior
        diag[0] += c[0]
        diag[-1] += c[-1]
        off = -interior
        return sp.diags([off, diag, off], [-1, 0, 1], format="csr")
    nx, ny = slc.grid.shape
    hx, hy = slc.grid.spacing, slc.grid.spacing_y
    ex = sp.eye(nx, format="csr")
    ey = sp.eye(ny, format="csr")
    dx = sp.diags([2 * np.ones(nx), -np.ones(nx - 1), -np.ones(nx - 1)], [0, 1, -1]).tolil()
    dx[0, -1] = -1
    dx[-1, 0] = -1
    dy = sp.diags([2 * np.ones(ny), -np.ones(ny - 1), -np.ones(ny - 1)], [0, 1, -1]).tolil()
    dy[0, -1] = -1
    dy[-1, 0] = -1
    # 2-d conformal Dirichlet energy is conformally invariant: edge conductance hy/hx resp. hx/hy
    return (sp.kron(dx.tocsr(), ey) * (hy / hx) + sp.kron(ex, dy.tocsr()) * (hx / hy)).tocsr()


def mass_weights(slc: MetricSlice) -> np.ndarray:
    """Flat vector of quadrature weights (the solver's inner-product weights)."""
    return np.asarray(slc.weights).reshape(-1)


def energy_conductances(slc: MetricSlice) -> np.ndarray:
    """Plain face conductances for Dirichlet-energy quadrature on radial models.

    These are the uncorrected omega phi_f^{n-1}/(beta h) face weights (the
    moment-corrected ``slc.conductances`` belong to the heat-flow Laplacian,
    not to energy quadrature).  Face 0 is the pole (zero area); the last
    face is the Dirichlet ghost edge on the Euclidean model and the second
    pole on the sphere.
    """
    if slc.model.kind == TORUS:
        raise GeometryError("energy_conductances is defined for radial models")
    n = slc.model.dimension
    omega = sphere_area(n)
    beta = slc.radial_scale
    c = omega * np.abs(slc.warp_faces) ** (n - 1) / (beta * slc.grid.spacing)
    c = c.copy()
    c[0] = 0.0
    if slc.model.kind == SPHERE:
        c[-1] = 0.0
    return c


def parse_geometry_config(cfg: dict) -> GeometryModel:
    """Build a GeometryModel from a flat key/value mapping.

    Recognized keys: kind, dimension, resolution, r_max, radius, periods.
    Errors name the offending field.
    """
    if "kind" not in cfg:
        raise GeometryError("geometry.kind: missing required field")
    if "dimension" not in cfg:
        raise GeometryError("geometry.dimension: missing required field")
    if "resolution" not in cfg:
        raise GeometryError("geometry.resolution: missing required field")
    periods = cfg.get("periods")
    if periods is not None:
        periods = tuple(float(p) for p in periods)
    return GeometryModel(
        kind=str(cfg["kind"]),
        dimension=int(cfg["dimension"]),
        resolution=int(cfg["resolution"]),
        r_max=None if cfg.get("r_max") is None else float(cfg["r_max"]),
        radius=None if cfg.get("radius") is None else float(cfg["radius"]),
        periods=periods,
    )
