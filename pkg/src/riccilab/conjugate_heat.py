"""Conjugate heat flows along a Ricci flow.

A conjugate heat flow solves -du/dt - Lap_{g_t} u + R_{g_t} u = 0 backward
in time with unit mass.  The discrete stepper is built as the exact adjoint
of the forward heat theta-step with respect to the per-slice volume weights:
if the forward step t_k -> t_{k+1} is v_{k+1} = A^{-1} B v_k with
A = I + dt theta L, B = I - dt (1-theta) L and L the (negative) weighted
Laplacian at the evaluation time, then

    u_k = W_k^{-1} B^T A^{-T} W_{k+1} u_{k+1}.

Because the Laplacian annihilates constants, this conserves the discrete
mass sum(u w) to solver roundoff at every step; the R u term and the volume
change of the continuum equation are realized exactly through the weight
ratio (d/dt dg = -R dg along the flow).  theta = 1/2 (trapezoid) gives
second order; near-delta terminal data takes a few implicit-Euler startup
substeps (Rannacher smoothing) to damp unresolved modes.

Kernel approximation: a normalized compact bump of width ``width_cells``
grid cells at the basepoint, assigned to the moment-matched origin time
t_0 - sigma_0 with sigma_0 = (second moment)/(2n), so the discrete kernel
carries the same mass and second moment as the exact kernel at gap sigma_0.
On the grid, "sqrt(u) smooth" is vacuous; u >= 0 and support containment
are what is enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from . import geometry as geo
from .flow import FlowSpacetime, FlowError

DENSITY_FLOOR_RATIO = 1e-30
MASS_TOL = 1e-6
BOUNDARY_RATIO = 1e-10


class ConjugateHeatError(RuntimeError):
    """Solver contract violation (mass drift, negative data, boundary leak)."""


@dataclass
class DensityFlow:
    """Time-indexed nonnegative unit-mass densities along a flow."""

    flow: FlowSpacetime
    times: np.ndarray                  # ascending
    densities: list                    # node fields, one per time
    masses: np.ndarray
    terminal_time: float
    basepoint: Optional[object] = None
    base_time: Optional[float] = None  # kernel basepoint time t0 (terminal_time = t0 - origin_shift)
    origin_shift: float = 0.0
    kernel_kind: Optional[str] = None  # "point" | "ridge" | None
    clipped_mass: float = 0.0
    boundary_ratio_max: float = 0.0

    def density_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConjugateHeatError(
                f"time {t} not stored in the density ladder (nearest {self.times[k]})")
        return self.densities[k]

    def mass_at(self, t: float) -> float:
        k = int(np.argmin(np.abs(self.times - t)))
        return float(self.masses[k])


def _build_ladder(flow: FlowSpacetime, t0: float, t1: float, dt: float,
                  sample_times: Sequence[float]) -> np.ndarray:
    knots = [t0, t1]
    knots.extend(float(t) for t in flow.times if t0 < t < t1)
    for t in sample_times:
        if t < t0 - 1e-12 or t > t1 + 1e-12:
            raise FlowError(f"sample time {t} outside solve window [{t0}, {t1}]")
        knots.append(min(max(float(t), t0), t1))
    knots = sorted(set(knots))
    out = [knots[0]]
    for a, b in zip(knots[:-1], knots[1:]):
        if b - a < 1e-12:
            continue
        m = max(1, int(math.ceil((b - a) / dt - 1e-9)))
        out.extend(np.linspace(a, b, m + 1)[1:])
    return np.asarray(out)


def _radial_adjoint_step(flow, ta, tb, u_b, theta):
    """One backward step t_b -> t_a on a radial model (banded solves)."""
    dt = tb - ta
    t_eval = 0.5 * (ta + tb) if theta < 1.0 else ta
    mid = flow.slice_at(t_eval)
    w_mid = np.asarray(mid.weights)
    c = np.asarray(mid.conductances)
    w_a = np.asarray(flow.slice_at(ta).weights)
    w_b = np.asarray(flow.slice_at(tb).weights)
    n = w_mid.size
    # K tridiagonal: diag c_j + c_{j+1}, off -c_{j+1}
    kdiag = c[:-1] + c[1:]
    koff = -c[1:-1]
    # A^T = I + dt*theta*K*W_mid^{-1}
    ab = np.zeros((3, n))
    ab[0, 1:] = dt * theta * koff / w_mid[1:]        # superdiag A^T[j, j+1]
    ab[1, :] = 1.0 + dt * theta * kdiag / w_mid
    ab[2, :-1] = dt * theta * koff / w_mid[:-1]      # subdiag A^T[j+1, j]
    z = sla.solve_banded((1, 1), ab, w_b * u_b)
    if theta < 1.0:
        y = z / w_mid
        ky = np.empty(n)
        ky[:] = kdiag * y
        ky[:-1] += koff * y[1:]
        ky[1:] += koff * y[:-1]
        z = z - dt * (1.0 - theta) * ky
    return z / w_a


class _TorusStepper:
    """Torus steps solve the W^{1/2}-symmetrized system by conjugate gradients."""

    def __init__(self, flow):
        import scipy.sparse as sp
        self.sp = sp
        self.flow = flow
        grid = flow.grid
        self.K = geo.dirichlet_matrix(flow.slice_at(flow.times[0])).tocsr()
        self.shape = grid.shape
        self.guess = None

    def step(self, ta, tb, u_b, theta):
        import scipy.sparse.linalg as spla
        dt = tb - ta
        t_eval = 0.5 * (ta + tb) if theta < 1.0 else ta
        w_mid = geo.mass_weights(self.flow.slice_at(t_eval))
        w_a = geo.mass_weights(self.flow.slice_at(ta))
        w_b = geo.mass_weights(self.flow.slice_at(tb))
        # A^T z = W_b u_b with A^T = I + dt theta K W_mid^{-1}; symmetrize by W_mid^{1/2}
        sq = np.sqrt(w_mid)
        ksym = self.sp.diags(1.0 / sq) @ self.K @ self.sp.diags(1.0 / sq)
        op = self.sp.identity(w_mid.size, format="csr") + (dt * theta) * ksym
        rhs = (w_b * u_b.reshape(-1)) / sq
        zs, info = spla.cg(op, rhs, x0=self.guess, rtol=1e-13, atol=0.0, maxiter=4000)
        if info != 0:
            raise ConjugateHeatError(f"torus step CG failed to converge (info={info})")
        self.guess = zs
        z = zs * sq
        if theta < 1.0:
            z = z - dt * (1.0 - theta) * (self.K @ (z / w_mid))
        return (z / w_a).reshape(self.shape)


def solve_conjugate(flow: FlowSpacetime, terminal: np.ndarray, t1: float, t0: float,
                    dt: Optional[float] = None, theta: float = 0.5,
                    startup_steps: int = 0, sample_times: Sequence[float] = (),
                    mass_tol: float = MASS_TOL, basepoint=None, base_time=None,
                    origin_shift: float = 0.0, kernel_kind: Optional[str] = None,
                    boundary_ratio: float = BOUNDARY_RATIO) -> DensityFlow:
    """Solve the conjugate heat equation backward from t1 to t0.

    ``terminal`` must be nonnegative with unit mass (renormalized exactly
    at entry; more than 0.1% off is an error).  Mass is recorded per slice
    and a drift beyond ``mass_tol`` aborts with diagnostics.  On the
    truncated Euclidean model the density must stay below
    ``boundary_ratio * max(u)`` at the far boundary.
    """
    a, b = flow.interval
    if not (a - 1e-12 <= t0 < t1 <= b + 1e-12):
        raise FlowError(f"solve window [{t0}, {t1}] outside flow interval [{a}, {b}]")
    slc1 = flow.slice_at(t1)
    u = geo.check_field(slc1, terminal).copy()
    if np.min(u) < -1e-12 * max(np.max(u), 0.0) or np.max(u) <= 0:
        raise ConjugateHeatError("terminal data must be nonnegative with positive mass")
    u = np.clip(u, 0.0, None)
    m0 = geo.integrate(slc1, u)
    if abs(m0 - 1.0) > 1e-3:
        raise ConjugateHeatError(f"terminal mass {m0} is not 1 (normalize the data first)")
    u = u / m0

    if dt is None:
        dt = flow.policy.dt
    times = _build_ladder(flow, t0, t1, dt, sample_times)
    is_torus = flow.model.kind == geo.TORUS
    stepper = _TorusStepper(flow) if is_torus else None
    is_euclid = flow.model.kind == geo.EUCLIDEAN

    densities = [u]
    masses = [1.0]
    clipped = 0.0
    bmax = 0.0
    k = len(times) - 1
    step_index = 0
    while k > 0:
        ta, tb = float(times[k - 1]), float(times[k])
        substeps = [(ta, tb, theta)]
        if step_index < startup_steps:
            tm = 0.5 * (ta + tb)
            substeps = [(tm, tb, 1.0), (ta, tm, 1.0)]
        for sa, sb, th in substeps:
            if is_torus:
                u = stepper.step(sa, sb, u, th)
            else:
                u = _radial_adjoint_step(flow, sa, sb, u, th)
        neg = u < 0.0
        if np.any(neg):
            w_a = geo.mass_weights(flow.slice_at(ta)).reshape(u.shape)
            clipped += float(-np.sum(u[neg] * w_a[neg]))
            u = np.clip(u, 0.0, None)
        slc_a = flow.slice_at(ta)
        m = geo.integrate(slc_a, u)
        if abs(m - 1.0) > mass_tol:
            raise ConjugateHeatError(
                f"mass drift |{m} - 1| > {mass_tol} at t={ta} "
                f"(steps done {step_index + 1}, clipped mass {clipped:.3e})")
        if is_euclid:
            ratio = float(u[-1] / max(np.max(u), 1e-300))
            bmax = max(bmax, ratio)
            if ratio > boundary_ratio:
                raise ConjugateHeatError(
                    f"density at the truncation boundary reached {ratio:.2e} of max at t={ta}; "
                    "enlarge r_max for this scenario")
        densities.append(u)
        masses.append(m)
        step_index += 1
        k -= 1

    densities.reverse()
    masses.reverse()
    return DensityFlow(flow=flow, times=times, densities=densities,
                       masses=np.asarray(masses), terminal_time=t1,
                       basepoint=basepoint, base_time=base_time,
                       origin_shift=origin_shift, kernel_kind=kernel_kind,
                       clipped_mass=clipped, boundary_ratio_max=bmax)


# ---------------------------------------------------------------------------
# kernel approximation


def _bump_profile(d: np.ndarray, width: float) -> np.ndarray:
    s = np.clip(d / width, 0.0, 1.0)
    return (1.0 - s ** 2) ** 2


def kernel_terminal(slc: geo.MetricSlice, basepoint, width_cells: float = 4.0):
    """Normalized compact bump at the basepoint plus its moment-matched origin shift."""
    bp = geo.resolve_basepoint(slc, basepoint)
    kind = slc.model.kind
    if kind == geo.SPHERE:
        cell = slc.grid.spacing * slc.radial_scale
    else:
        cell = slc.grid.spacing
    if width_cells < 2.0:
        raise ConjugateHeatError("kernel bump width below two grid cells is not resolvable")
    width = width_cells * cell
    d = geo.distance_field(slc, bp)
    u = _bump_profile(d, width)
    u = u / geo.integrate(slc, u)
    if isinstance(bp, tuple) and bp[0] == "ridge":
        # quotient kernel: x-marginal second moment grows at rate 2t (1-d heat)
        sigma0 = geo.integrate(slc, d ** 2 * u) / 2.0
        kkind = "ridge"
    else:
        n = slc.model.dimension
        sigma0 = geo.integrate(slc, d ** 2 * u) / (2.0 * n)
        kkind = "point"
    return u, sigma0, kkind


def heat_kernel_flow(flow: FlowSpacetime, basepoint, t0: float, t_min: float,
                     width_cells: float = 4.0, dt: Optional[float] = None,
                     sample_times: Sequence[float] = (), use_cache: bool = True,
                     startup_steps: int = 4) -> DensityFlow:
    """Approximate conjugate heat kernel based at (x0, t0), solved down to t_min."""
    bp = geo.resolve_basepoint(flow.slice_at(t0), basepoint)
    key = (bp, round(t0, 12), round(t_min, 12), width_cells, dt, tuple(round(t, 12) for t in sample_times))
    if use_cache:
        with flow._lock:
            hit = flow.kernel_cache.get(key)
        if hit is not None:
            return hit
    slc0 = flow.slice_at(t0)
    u_t, sigma0, kkind = kernel_terminal(slc0, bp, width_cells)
    t1 = t0 - sigma0
    if t_min >= t1:
        raise FlowError(f"kernel window [{t_min}, {t1}] empty (gap below the bump origin shift)")
    dflow = solve_conjugate(flow, u_t, t1, t_min, dt=dt, startup_steps=startup_steps,
                            sample_times=sample_times, basepoint=bp, base_time=t0,
                            origin_shift=sigma0, kernel_kind=kkind)
    if use_cache:
        with flow._lock:
            flow.kernel_cache[key] = dflow
    return dflow


def heat_kernel(flow: FlowSpacetime, basepoint, t0: float, t: float,
                width_cells: float = 4.0, dt: Optional[float] = None) -> np.ndarray:
    """Kernel slice at time t < t0 (see ``heat_kernel_flow``)."""
    if t >= t0:
        raise FlowError(f"kernel requires t < t0, got t={t}, t0={t0}")
    dflow = heat_kernel_flow(flow, basepoint, t0, t, width_cells=width_cells, dt=dt,
                             sample_times=(t,))
    return dflow.density_at(t)


# ---------------------------------------------------------------------------
# potential and Gaussian bounds


@dataclass(frozen=True)
class PotentialField:
    f: np.ndarray
    mask: np.ndarray
    tau: float
    dimension: int


def f_potential(u: np.ndarray, tau: float, n: int,
                floor_ratio: float = DENSITY_FLOOR_RATIO) -> PotentialField:
    """f with u = (4 pi tau)^{-n/2} exp(-f) on the mask {u > floor}."""
    if tau <= 0:
        raise ConjugateHeatError(f"scale tau must be positive, got {tau}")
    u = np.asarray(u, dtype=float)
    floor = floor_ratio * float(np.max(u))
    if floor <= 0:
        raise ConjugateHeatError("density is identically zero")
    mask = u > floor
    f = np.zeros_like(u)
    f[mask] = -np.log(u[mask]) - 0.5 * n * math.log(4.0 * math.pi * tau)
    return PotentialField(f=f, mask=mask, tau=tau, dimension=n)


@dataclass(frozen=True)
class GaussianFitReport:
    c_fit: float
    passed: bool
    n_times: int
    sigma_range: tuple


def kernel_gaussian_bound_check(flow: FlowSpacetime, kernel: DensityFlow,
                                sigma_min: float = 0.05, c_max: float = 1e9,
                                floor_ratio: float = DENSITY_FLOOR_RATIO) -> GaussianFitReport:
    """Fit the smallest C >= 1 with two-sided Gaussian bounds on the kernel,

        C^-1 (4 pi s)^{-n/2} e^{-C d^2/(4s)}  <=  K  <=  C (4 pi s)^{-n/2} e^{-d^2/(4 C s)},

    checked at all stored times with gap s >= sigma_min on the density mask
    (off-mask nodes ignored, so the fit is floor-stable).  The template is
    normalized so the exact flat-space kernel saturates both sides at C = 1;
    a constant for the raw form without the 4 pi and 1/4 factors is
    max(4 C, (4 pi)^{n/2} C).
    """
    if kernel.base_time is None or kernel.kernel_kind != "point":
        raise ConjugateHeatError("gaussian bound fit requires a point-kernel density flow")
    n = flow.model.dimension
    rows = []
    for k, t in enumerate(kernel.times):
        s = kernel.base_time - t
        if s < sigma_min:
            continue
        u = kernel.densities[k]
        mask = u > floor_ratio * np.max(u)
        d = geo.distance_field(flow.slice_at(float(t)), kernel.basepoint)
        rows.append((s, u[mask], d[mask]))
    if not rows:
        raise ConjugateHeatError("no stored kernel times with gap >= sigma_min")
    gnorm = (4.0 * math.pi) ** (-n / 2.0)

    def feasible(c):
        for s, u, d in rows:
            upper = c * gnorm * s ** (-n / 2.0) * np.exp(-d ** 2 / (4.0 * c * s))
            lower = (1.0 / c) * gnorm * s ** (-n / 2.0) * np.exp(-c * d ** 2 / (4.0 * s))
            if np.any(u > upper * (1 + 1e-12)) or np.any(u < lower * (1 - 1e-12)):
                return False
        return True

    if not feasible(c_max):
        return GaussianFitReport(c_fit=math.inf, passed=False, n_times=len(rows),
                                 sigma_range=(rows[0][0], rows[-1][0]))
    lo, hi = 1.0, c_max
    if feasible(lo):
        hi = lo
    while hi - lo > 1e-4 * hi:
        mid = math.sqrt(lo * hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    sigmas = [r[0] for r in rows]
    return GaussianFitReport(c_fit=hi, passed=True, n_times=len(rows),
                             sigma_range=(min(sigmas), max(sigmas)))
