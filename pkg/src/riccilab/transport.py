"""W1 distances, variance, Hn-centers and parabolic-neighborhood membership.

All transport quantities act on measures that share the model's reduced
symmetry: radially symmetric measures about a pole on the radial models
(parametrized by arclength along the ray, where the W1 distance is the
exact 1-d CDF formula), and y-invariant "ridge" measures on the torus
(parametrized by the x-circle with the flat wrapped distance; W1 is the
circular CDF formula with the offset at the weighted median).  Pairs that
do not share the symmetry are rejected loudly.

Variance uses the exact homogeneous-space distance: closed forms on the
flat model (cross terms average to zero over independent angles), an
angular Gauss-Legendre quadrature of the spherical law of cosines on the
sphere, and the wrapped x-distance on the torus quotient.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo
from . import conjugate_heat as ch
from .flow import FlowSpacetime


class TransportError(ValueError):
    pass


MASS_TOL = 1e-6
RIDGE_TOL = 1e-9


def hn_constant(n: int) -> float:
    """H_n = (n - 1) pi^2 / 2 + 4."""
    return (n - 1) * math.pi ** 2 / 2.0 + 4.0


@dataclass
class RadialMeasure:
    """Probability measure on the symmetry quotient of a slice."""

    coords: np.ndarray       # ascending positions (arclength from the pole / x-circle)
    masses: np.ndarray
    periodic: bool = False
    period: Optional[float] = None
    slice_time: Optional[float] = None
    model_kind: Optional[str] = None

    def __post_init__(self):
        if np.any(self.masses < -1e-12):
            raise TransportError("measure has negative mass")
        total = float(np.sum(self.masses))
        if abs(total - 1.0) > MASS_TOL:
            raise TransportError(f"measure mass {total} is not 1 within {MASS_TOL}")
        cdf = np.cumsum(self.masses)
        if np.any(np.diff(cdf) < -1e-12):
            raise TransportError("CDF must be nondecreasing")

    def second_moment(self) -> float:
        if self.periodic:
            raise TransportError("second moment about the pole is a ray-measure quantity")
        return float(np.sum(self.masses * self.coords ** 2))


def from_density(slc: geo.MetricSlice, u: np.ndarray) -> RadialMeasure:
    """Angular reduction of a symmetric density to its quotient measure."""
    u = geo.check_field(slc, u)
    kind = slc.model.kind
    w = np.asarray(slc.weights)
    if kind in (geo.EUCLIDEAN, geo.SPHERE):
        scale = slc.radial_scale if kind == geo.SPHERE else 1.0
        return RadialMeasure(coords=slc.grid.coords * scale, masses=u * w,
                             slice_time=slc.time, model_kind=kind)
    col_dev = np.max(np.abs(u - u.mean(axis=1, keepdims=True)))
    if col_dev > RIDGE_TOL * max(float(np.max(np.abs(u))), 1e-300):
        raise TransportError(
            "torus transport requires y-invariant (ridge) densities; "
            f"column deviation {col_dev:.2e} exceeds tolerance")
    return RadialMeasure(coords=slc.grid.axes[0].copy(), masses=(u * w).sum(axis=1),
                         periodic=True, period=slc.model.periods[0],
                         slice_time=slc.time, model_kind=kind)


def point_measure(template: RadialMeasure, position: float) -> RadialMeasure:
    """Point mass at the given quotient coordinate, on the template's grid."""
    k = int(np.argmin(np.abs(template.coords - position)))
    m = np.zeros_like(template.masses)
    m[k] = 1.0
    return RadialMeasure(coords=template.coords, masses=m, periodic=template.periodic,
                         period=template.period, slice_time=template.slice_time,
                         model_kind=template.model_kind)


def _check_pair(m1: RadialMeasure, m2: RadialMeasure):
    if m1.periodic != m2.periodic:
        raise TransportError("cannot transport between ray and circle measures")
    if m1.coords.shape != m2.coords.shape or not np.allclose(m1.coords, m2.coords, rtol=1e-10):
        raise TransportError("measures live on different slices or grids")


def w1_radial(m1: RadialMeasure, m2: RadialMeasure) -> float:
    """W1 by the 1-d CDF formula (exact for atomic measures on a common ray)."""
    _check_pair(m1, m2)
    if not m1.periodic:
        f1 = np.cumsum(m1.masses)
        f2 = np.cumsum(m2.masses)
        gaps = np.diff(m1.coords)
        return float(np.sum(np.abs(f1[:-1] - f2[:-1]) * gaps))
    h = m1.coords[1] - m1.coords[0]
    if not np.allclose(np.diff(m1.coords), h, rtol=1e-9):
        raise TransportError("circular W1 requires a uniform grid")
    g = np.cumsum(m1.masses - m2.masses)
    theta = np.median(g)
    return float(np.sum(np.abs(g - theta)) * h)


_GL_CACHE: dict = {}
_GL_LOCK = threading.Lock()


def _angular_nodes(n: int, order: int = 48):
    """Gauss-Legendre nodes/weights for the angle between independent directions.

    The angle gamma between two uniform directions on S^{n-1} has density
    proportional to sin^{n-2}(gamma) on [0, pi].
    """
    key = (n, order)
    with _GL_LOCK:
        hit = _GL_CACHE.get(key)
    if hit is not None:
        return hit
    x, w = np.polynomial.legendre.leggauss(order)
    gamma = 0.5 * math.pi * (x + 1.0)
    w = w * 0.5 * math.pi
    dens = np.sin(gamma) ** (n - 2)
    w = w * dens
    w = w / np.sum(w)
    with _GL_LOCK:
        _GL_CACHE[key] = (gamma, w)
    return gamma, w


def _sphere_d2_matrix(slc: geo.MetricSlice, coords_a: np.ndarray,
                      coords_b: np.ndarray) -> np.ndarray:
    """Angular average of squared geodesic distance between latitude spheres."""
    a = slc.radial_scale
    n = slc.model.dimension
    gamma, wg = _angular_nodes(n)
    p1 = coords_a[:, None] / a
    p2 = coords_b[None, :] / a
    amat = np.cos(p1) * np.cos(p2)
    bmat = np.sin(p1) * np.sin(p2)
    out = np.zeros((coords_a.size, coords_b.size))
    for g, w in zip(gamma, wg):
        c = np.clip(amat + bmat * math.cos(g), -1.0, 1.0)
        out += w * np.arccos(c) ** 2
    return out * a ** 2


def _wrap(d, period):
    return (d + 0.5 * period) % period - 0.5 * period


def variance(m1: RadialMeasure, m2: RadialMeasure, slc: geo.MetricSlice) -> float:
    """Var(m1, m2) = double integral of squared distance.

    Exact homogeneous-space distances: on the flat model the angular cross
    term vanishes, so Var = m2(m1) + m2(m2); the sphere uses the law of
    cosines under angular quadrature; the torus uses the wrapped quotient
    distance (the uniform y-direction is a symmetry, excluded by
    convention).
    """
    _check_pair(m1, m2)
    kind = slc.model.kind
    if kind == geo.EUCLIDEAN:
        return m1.second_moment() + m2.second_moment()
    if kind == geo.SPHERE:
        d2 = _sphere_d2_matrix(slc, m1.coords, m2.coords)
        return float(m1.masses @ d2 @ m2.masses)
    d = _wrap(m1.coords[:, None] - m2.coords[None, :], m1.period)
    return float(m1.masses @ (d ** 2) @ m2.masses)


def variance_to_point(m: RadialMeasure, slc: geo.MetricSlice, position: float) -> float:
    """Var(delta_z, m) for z at the given quotient coordinate."""
    kind = slc.model.kind
    if kind == geo.EUCLIDEAN:
        return position ** 2 + m.second_moment()
    if kind == geo.SPHERE:
        d2 = _sphere_d2_matrix(slc, np.array([position]), m.coords)
        return float(d2[0] @ m.masses)
    d = _wrap(position - m.coords, m.period)
    return float(np.sum(d ** 2 * m.masses))


# ---------------------------------------------------------------------------
# Hn-centers


@dataclass(frozen=True)
class HnCenterResult:
    z: float                  # quotient coordinate of the center
    var: float
    hn: float
    gap: float
    var_bound_margin: float   # Hn * gap - Var  (>= 0 is the theorem)
    w1_to_center: float
    w1_bound_margin: float    # sqrt(Hn * gap) - W1
    multiplicity: int


def hn_center(flow: FlowSpacetime, basepoint, t0: float, s: float,
              opts: Optional[dict] = None) -> HnCenterResult:
    """Grid minimizer of z -> Var(delta_z, nu_{x0,t0|s}) along the radial ray.

    Symmetry of a pole-based kernel forces the minimizer onto the ray; the
    grid argmin is returned, ties broken toward the pole, with multiplicity
    recorded.  The variance bound Var <= H_n (t0 - s) and its W1 corollary
    are evaluated, not assumed.
    """
    if flow.model.kind == geo.TORUS:
        raise TransportError("Hn-centers need point-concentrating kernels; "
                             "torus ridge kernels live on the quotient and are excluded")
    if s >= t0:
        raise TransportError(f"Hn-center needs s < t0, got s={s}, t0={t0}")
    opts = opts or {}
    kflow = ch.heat_kernel_flow(flow, basepoint, t0, s,
                                width_cells=opts.get("width_cells", 4.0),
                                dt=opts.get("dt"), sample_times=(s,))
    slc = flow.slice_at(s)
    nu = from_density(slc, kflow.density_at(s))
    if slc.model.kind == geo.EUCLIDEAN:
        vals = nu.coords ** 2 + nu.second_moment()
    else:
        vals = _sphere_d2_matrix(slc, nu.coords, nu.coords) @ nu.masses
    k = int(np.argmin(vals))
    vmin = float(vals[k])
    mult = int(np.sum(vals <= vmin * (1 + 1e-12) + 1e-300))
    n = flow.model.dimension
    hn = hn_constant(n)
    gap = t0 - s
    w1c = w1_radial(point_measure(nu, nu.coords[k]), nu)
    return HnCenterResult(z=float(nu.coords[k]), var=vmin, hn=hn, gap=gap,
                          var_bound_margin=hn * gap - vmin,
                          w1_to_center=w1c,
                          w1_bound_margin=math.sqrt(hn * gap) - w1c,
                          multiplicity=mult)


# ---------------------------------------------------------------------------
# ladders, P*-membership, concentration


@dataclass(frozen=True)
class TransportLadder:
    rows: tuple            # (s, w1, var)
    min_w1_margin: float
    passed: bool


def w1_monotonicity_check(flow: FlowSpacetime, d1: ch.DensityFlow, d2: ch.DensityFlow,
                          times=None, tol: float = 1e-4) -> TransportLadder:
    """s -> W1(nu1|s, nu2|s) must be nondecreasing in s along a common ladder."""
    if times is None:
        common = sorted(set(np.round(d1.times, 10)) & set(np.round(d2.times, 10)))
        times = [float(t) for t in common]
    if len(times) < 2:
        raise TransportError("need at least two common stored times")
    rows = []
    for s in times:
        slc = flow.slice_at(s)
        n1 = from_density(slc, d1.density_at(s))
        n2 = from_density(slc, d2.density_at(s))
        rows.append((float(s), w1_radial(n1, n2), variance(n1, n2, slc)))
    w1s = np.array([r[1] for r in rows])
    margin = float(np.min(np.diff(w1s))) if w1s.size > 1 else 0.0
    return TransportLadder(rows=tuple(rows), min_w1_margin=margin,
                           passed=bool(margin >= -tol))


@dataclass(frozen=True)
class PStarResult:
    member: bool
    w1: float
    threshold: float
    boundary_case: bool
    reason: str


def pstar_contains(flow: FlowSpacetime, center, t0: float, big_a: float,
                   t_minus: float, t_plus: float, query, t: float,
                   opts: Optional[dict] = None) -> PStarResult:
    """Strict W1 membership of (query, t) in P*(center, t0 | A, -T-, T+).

    Both kernels are pulled back to the reference time t0 - T-; a basepoint
    whose time equals the reference time contributes a delta measure.
    """
    if big_a < 0 or t_minus < 0 or t_plus < 0:
        raise TransportError("A, T-, T+ must be nonnegative")
    a, b = flow.interval
    t_ref = t0 - t_minus
    if t < t_ref - 1e-12 or t > t0 + t_plus + 1e-12 or t < a - 1e-12 or t > b + 1e-12:
        return PStarResult(member=False, w1=math.inf, threshold=big_a,
                           boundary_case=False,
                           reason=f"time {t} outside the window [{t_ref}, {t0 + t_plus}]")
    opts = opts or {}

    def measure_of(bp, tb):
        slc_ref = flow.slice_at(t_ref)
        if tb <= t_ref + 1e-12:
            d = geo.distance_field(slc_ref, bp)
            template = from_density(slc_ref, np.ones(slc_ref.grid.shape)
                                    / geo.total_volume(slc_ref))
            if slc_ref.model.kind in (geo.EUCLIDEAN, geo.SPHERE):
                pos = 0.0 if bp == geo.POLE else float(np.max(template.coords)) \
                    if bp == geo.ANTIPODE else None
            else:
                pos = float(slc_ref.grid.axes[0][geo.resolve_basepoint(slc_ref, bp)[1]])
            if pos is None:
                raise TransportError(f"cannot place a delta at basepoint {bp!r}")
            return point_measure(template, pos)
        k = ch.heat_kernel_flow(flow, bp, tb, t_ref,
                                width_cells=opts.get("width_cells", 4.0),
                                dt=opts.get("dt"), sample_times=(t_ref,))
        return from_density(slc_ref, k.density_at(t_ref))

    w1 = w1_radial(measure_of(center, t0), measure_of(query, t))
    boundary = abs(w1 - big_a) <= 1e-12 * max(1.0, big_a)
    member = bool(w1 < big_a) and not boundary
    reason = "strict W1 inequality holds" if member else (
        "tie at the threshold" if boundary else "W1 distance at or above the threshold")
    return PStarResult(member=member, w1=w1, threshold=big_a,
                       boundary_case=boundary, reason=reason)


@dataclass(frozen=True)
class ConcentrationReport:
    tail: float
    bound: float
    margin: float
    passed: bool
    z: float


def concentration_check(flow: FlowSpacetime, basepoint, t: float, s: float,
                        big_a: float, tol: float = 1e-9,
                        opts: Optional[dict] = None) -> ConcentrationReport:
    """Tail bound nu_{x,t|s}(M minus B_s(z, A)) <= 2 exp(-A^2/20) at the Hn-center.

    Preconditions: unit time gap (t - s = 1) and A > 10 sqrt(H_n).
    """
    n = flow.model.dimension
    hn = hn_constant(n)
    if big_a <= 10.0 * math.sqrt(hn):
        raise TransportError(f"concentration claim needs A > 10 sqrt(H_n) = {10 * math.sqrt(hn):.3f}")
    if abs((t - s) - 1.0) > 1e-9:
        raise TransportError("concentration check uses the unit time gap normalization")
    hc = hn_center(flow, basepoint, t, s, opts=opts)
    opts = opts or {}
    kflow = ch.heat_kernel_flow(flow, basepoint, t, s,
                                width_cells=opts.get("width_cells", 4.0),
                                dt=opts.get("dt"), sample_times=(s,))
    slc = flow.slice_at(s)
    nu = from_density(slc, kflow.density_at(s))
    tail = _tail_mass_outside_ball(slc, nu, hc.z, big_a)
    bound = 2.0 * math.exp(-big_a ** 2 / 20.0)
    return ConcentrationReport(tail=tail, bound=bound, margin=bound + tol - tail,
                               passed=bool(tail <= bound + tol), z=hc.z)


def _tail_mass_outside_ball(slc: geo.MetricSlice, m: RadialMeasure, z: float,
                            radius: float) -> float:
    """Mass of the symmetric measure outside the metric ball B(z, radius)."""
    kind = slc.model.kind
    if kind == geo.EUCLIDEAN and abs(z) < 1e-12:
        return float(np.sum(m.masses[m.coords > radius]))
    if kind == geo.EUCLIDEAN:
        gamma, wg = _angular_nodes(slc.model.dimension)
        d2 = (z ** 2 + m.coords[:, None] ** 2
              - 2.0 * z * m.coords[:, None] * np.cos(gamma)[None, :])
        frac_out = (d2 > radius ** 2) @ wg
        return float(np.sum(m.masses * frac_out))
    if kind == geo.SPHERE:
        gamma, wg = _angular_nodes(slc.model.dimension)
        a = slc.radial_scale
        pz = z / a
        p = m.coords[:, None] / a
        c = np.clip(math.cos(pz) * np.cos(p) + math.sin(pz) * np.sin(p) * np.cos(gamma)[None, :],
                    -1.0, 1.0)
        d = a * np.arccos(c)
        frac_out = (d > radius) @ wg
        return float(np.sum(m.masses * frac_out))
    d = np.abs(_wrap(m.coords - z, m.period))
    return float(np.sum(m.masses[d > radius]))
