"""Ricci flow evolution on the supported reduced-symmetry models.

The round sphere evolves by the closed form a(t)^2 = a(t_a)^2 - 2(n-1)(t - t_a),
the truncated Euclidean model is static, and the conformal torus evolves by
d v/dt = exp(-2v) Lap0 v.  The torus stepper is a linearly implicit midpoint
scheme (implicit-Euler half-step predictor, then a trapezoid corrector with
the coefficient frozen at the predicted midpoint), second order in dt and
unconditionally stable for the implicit part.

A FlowSpacetime stores the ladder of step times and enough profile data to
reconstruct any slice; ``slice_at`` interpolates linearly in a^2 (exact) for
the sphere and linearly in v for the torus (consistent with the scheme
order).  Blow-up (a^2 hitting zero, or sup|R| past the policy threshold)
truncates the ladder and sets the singular-time flag.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo


class FlowError(ValueError):
    """Invalid flow request (bad span, time outside interval, ...)."""


@dataclass(frozen=True)
class StepPolicy:
    dt: float = 0.02
    safety: float = 0.25          # CFL-type cap: dt <= safety / sup|R|
    max_curvature: float = 1.0e6  # blow-up threshold on sup|R|
    stability_bound: float = 0.5  # allowed relative sup|R| change per step

    def __post_init__(self):
        if self.dt <= 0:
            raise FlowError("policy.dt must be positive")
        if not 0 < self.safety <= 1:
            raise FlowError("policy.safety must lie in (0, 1]")


class FlowSpacetime:
    """Ordered family of metric slices over the achieved time interval."""

    def __init__(self, grid, policy, times, kind_data, singular_time=None):
        self.grid = grid
        self.model = grid.model
        self.policy = policy
        self.times = np.asarray(times, dtype=float)
        self._data = kind_data       # euclid: base slice; sphere: a_sq array; torus: list of v
        self.singular_time = singular_time
        self._slice_cache: dict[float, geo.MetricSlice] = {}
        self.kernel_cache: dict = {}
        self._lock = threading.Lock()

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def _check_time(self, t: float) -> float:
        a, b = self.interval
        if t < a - 1e-12 or t > b + 1e-12:
            raise FlowError(f"time {t} outside achieved interval [{a}, {b}]")
        return min(max(t, a), b)

    def sphere_radius_sq(self, t: float) -> float:
        t = self._check_time(t)
        t0 = self.times[0]
        n = self.model.dimension
        return float(self._data["a_sq0"] - 2.0 * (n - 1) * (t - t0))

    def slice_at(self, t: float) -> geo.MetricSlice:
        """Slice at time t: stored profile, or interpolated in a^2 / v."""
        t = self._check_time(t)
        key = round(t, 12)
        with self._lock:
            cached = self._slice_cache.get(key)
        if cached is not None:
            return cached
        kind = self.model.kind
        if kind == geo.EUCLIDEAN:
            base = self._data["slice"]
            slc = geo.euclidean_slice(self.grid, t) if t != base.time else base
        elif kind == geo.SPHERE:
            a_sq = self.sphere_radius_sq(t)
            if a_sq <= 0:
                raise FlowError(f"slice at t={t} is past the singular time")
            slc = geo.sphere_slice(self.grid, math.sqrt(a_sq), t)
        else:
            vs = self._data["v"]
            k = int(np.searchsorted(self.times, t, side="right")) - 1
            k = min(max(k, 0), len(self.times) - 2) if len(self.times) > 1 else 0
            if abs(t - self.times[k]) < 1e-12 or len(self.times) == 1:
                v = vs[k]
            elif abs(t - self.times[k + 1]) < 1e-12:
                v = vs[k + 1]
            else:
                w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
                v = (1 - w) * vs[k] + w * vs[k + 1]
            slc = geo.torus_slice(self.grid, v, t)
        with self._lock:
            if len(self._slice_cache) > 64:
                self._slice_cache.clear()
            self._slice_cache[key] = slc
        return slc

    def sup_abs_curvature(self, t: float) -> float:
        return float(np.max(np.abs(self.slice_at(t).scalar_curvature)))


def _ladder(t_a: float, t_b: float, dt: float) -> np.ndarray:
    n = max(1, int(math.ceil((t_b - t_a) / dt - 1e-12)))
    return np.linspace(t_a, t_b, n + 1)


def evolve_ricci(initial: geo.MetricSlice, t_span: tuple[float, float],
                 policy: StepPolicy = StepPolicy()) -> FlowSpacetime:
    """Evolve a metric slice over [t_a, t_b]; see the module docstring."""
    t_a, t_b = float(t_span[0]), float(t_span[1])
    if not t_a < t_b:
        raise FlowError(f"flow span must satisfy t_a < t_b, got [{t_a}, {t_b}]")
    kind = initial.model.kind
    grid = initial.grid

    if kind == geo.EUCLIDEAN:
        times = _ladder(t_a, t_b, policy.dt)
        base = geo.euclidean_slice(grid, t_a)
        return FlowSpacetime(grid, policy, times, {"slice": base})

    if kind == geo.SPHERE:
        n = initial.model.dimension
        a_sq0 = initial.radial_scale ** 2
        t_sing = t_a + a_sq0 / (2.0 * (n - 1))
        times = [t_a]
        singular = None
        t = t_a
        while t < t_b - 1e-14:
            a_sq = a_sq0 - 2.0 * (n - 1) * (t - t_a)
            sup_r = n * (n - 1) / a_sq
            dt = min(policy.dt, policy.safety / sup_r, t_b - t)
            a_next = a_sq - 2.0 * (n - 1) * dt
            if a_next <= a_sq0 * 1e-8 or n * (n - 1) / max(a_next, 1e-300) > policy.max_curvature:
                singular = t_sing
                break
            t = t + dt
            times.append(t)
        return FlowSpacetime(grid, policy, np.array(times), {"a_sq0": a_sq0},
                             singular_time=singular)

    # conformal torus
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    hx, hy = grid.spacing, grid.spacing_y
    K = geo.dirichlet_matrix(initial)           # flat Dirichlet matrix, metric independent
    area_w = hx * hy
    v = np.asarray(initial.conf).copy()
    shape = grid.shape
    nn = v.size
    eye = sp.identity(nn, format="csr")

    def lap0(vec):
        return -(K @ vec) / area_w

    times = [t_a]
    vs = [v.copy()]
    singular = None
    t = t_a
    osc_prev = float(np.max(v) - np.min(v))
    prev_sup_r = None
    while t < t_b - 1e-14:
        slc = geo.torus_slice(grid, v.reshape(shape))
        sup_r = float(np.max(np.abs(slc.scalar_curvature)))
        if sup_r > policy.max_curvature:
            singular = t
            break
        if prev_sup_r is not None:
            if abs(sup_r - prev_sup_r) > policy.stability_bound * max(1.0, prev_sup_r):
                raise FlowError("adjacent-slice curvature change exceeds the policy stability bound")
        prev_sup_r = sup_r
        dt = min(policy.dt, policy.safety / max(sup_r, 1e-12), t_b - t)
        vf = v.reshape(-1)
        d_now = np.exp(-2.0 * vf)
        half = eye + (0.5 * dt / area_w) * sp.diags(d_now) @ K
        v_star = spla.spsolve(half.tocsc(), vf)
        d_mid = np.exp(-2.0 * v_star)
        lhs = eye + (0.5 * dt / area_w) * sp.diags(d_mid) @ K
        rhs = vf + 0.5 * dt * d_mid * lap0(vf)
        v_new = spla.spsolve(lhs.tocsc(), rhs).reshape(shape)
        osc = float(np.max(v_new) - np.min(v_new))
        if osc > osc_prev * (1.0 + 1e-9) + 1e-12:
            raise FlowError(f"discrete maximum principle violated: oscillation grew {osc_prev} -> {osc}")
        osc_prev = osc
        v = v_new
        t = t + dt
        times.append(t)
        vs.append(v.copy())
    return FlowSpacetime(grid, policy, np.array(times), {"v": vs}, singular_time=singular)


@dataclass(frozen=True)
class CurvatureBoundReport:
    rows: tuple          # (s, min_R, bound, margin) per checked slice
    passed: bool
    worst_margin: float


def curvature_lower_bound_check(flow: FlowSpacetime, t_min: float = -1.0,
                                tol: float = 1e-6) -> CurvatureBoundReport:
    """Maximum-principle lower bound: min R(s) >= -n/(2 (s - t_min)).

    Reports min_M R + n/(2 (s - t_min)) per stored slice with s > t_min;
    passes iff every margin is >= -tol.
    """
    n = flow.model.dimension
    rows = []
    for s in flow.times:
        if s <= t_min + 1e-12:
            continue
        bound = -n / (2.0 * (s - t_min))
        min_r = float(np.min(flow.slice_at(float(s)).scalar_curvature))
        rows.append((float(s), min_r, bound, min_r - bound))
    if not rows:
        raise FlowError(f"no stored slices after t_min={t_min}")
    worst = min(r[3] for r in rows)
    return CurvatureBoundReport(rows=tuple(rows), passed=bool(worst >= -tol), worst_margin=worst)
