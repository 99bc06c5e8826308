"""Right-hand sides and explicit time integration for the metric flows.

Four right-hand sides are provided: the fixed-tau normalized flow
``-2 Ric + g / tau``, the unnormalized flow ``-2 Ric``, the gauge-fixed
(DeTurck) flow with a reference background, and the coupled potential
equation.  Time stepping is classical RK4 under a parabolic CFL bound; the
tau-flow <-> unnormalized reparametrization translates trajectories between
the two conventions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import entropy, geometry
from .errors import RejectedInputError, StepRejectedError
from .geometry import FrameModel, GridModel

CFL_FACTOR = 0.2


@dataclass(frozen=True)
class FlowState:
    """Immutable snapshot of an evolving geometry.

    ``f`` is the scalar potential (a float on a frame model, a scalar field
    on a grid); ``F`` an optional gauge displacement field.  ``tau`` may be
    ``inf`` for the unnormalized convention.
    """

    t: float
    model: object
    tau: float
    f: Optional[object] = None
    F: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """Time-ordered flow states plus per-sample diagnostics."""

    convention: str
    states: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def append(self, state: FlowState, diag: dict) -> None:
        if self.states and state.t <= self.states[-1].t:
            raise RejectedInputError("trajectory times must be strictly increasing")
        self.states.append(state)
        self.diagnostics.append(diag)

    def metric_series(self) -> np.ndarray:
        """Stacked metric coefficient arrays, leading axis = sample index."""
        return np.stack([_metric_array(s.model) for s in self.states])


def _metric_array(model) -> np.ndarray:
    return model.a if isinstance(model, FrameModel) else model.g


def _with_metric(model, arr, validate=False):
    if isinstance(model, FrameModel):
        return model.with_a(arr)
    return model.with_metric(arr, validate=validate)


class MetricInterpolant:
    """Cubic-in-time interpolant of a trajectory's metric coefficients."""

    def __init__(self, traj: Trajectory):
        times = traj.times
        series = traj.metric_series()
        self._template = traj.states[0].model
        self._shape = series.shape[1:]
        kind = "cubic" if len(times) >= 4 else "linear"
        if kind == "cubic":
            self._spline = CubicSpline(times, series.reshape(len(times), -1), axis=0)
        else:
            self._spline = None
            self._times = times
            self._flat = series.reshape(len(times), -1)
        self.t_min = float(times[0])
        self.t_max = float(times[-1])

    def __call__(self, t: float):
        if self._spline is not None:
            flat = self._spline(np.clip(t, self.t_min, self.t_max))
        else:
            flat = np.array([np.interp(t, self._times, col) for col in self._flat.T])
        return _with_metric(self._template, flat.reshape(self._shape))


# ---------------------------------------------------------------------------
# right-hand sides


def rhs_tau_flow(model, tau: float):
    """Metric velocity -2 Ric(g) + g / tau of the fixed-tau normalized flow."""
    if not (tau > 0):
        raise RejectedInputError("tau must be positive (use rhs_unnormalized for tau = inf)")
    return rhs_unnormalized(model) + _metric_array(model) / tau


def rhs_unnormalized(model):
    """Metric velocity -2 Ric(g) of the unnormalized flow."""
    return -2.0 * geometry.ricci(model)


def deturck_term(m: GridModel, h: GridModel, gamma=None):
    """Gauge correction L_V g with V the reference-background vector field."""
    from .gauge import deturck_vector  # local import: gauge builds on flows' types

    if gamma is None:
        gamma = geometry.christoffel(m)
    v = deturck_vector(m, h, gamma_g=gamma)
    return geometry.lie_derivative_metric(m, v, gamma=gamma)


def rhs_deturck(m: GridModel, h: GridModel, tau: float):
    """Metric velocity of the gauge-fixed flow: -2 Ric + g/tau + L_V g.

    ``tau = inf`` gives the unnormalized variant (no g/tau term).
    """
    gamma = geometry.christoffel(m)
    out = -2.0 * geometry.ricci(m) + deturck_term(m, h, gamma=gamma)
    if np.isfinite(tau):
        out = out + m.g / tau
    return out


def rhs_potential(f, model, tau: float):
    """Scalar velocity -Delta f + |grad f|^2 - R + n / (2 tau)."""
    n = model.n
    if isinstance(model, FrameModel):
        # homogeneous: gradient terms vanish for the constant potential
        return -geometry.scalar_curvature(model) + n / (2.0 * tau)
    gamma = geometry.christoffel(model)
    ginv = geometry.inverse_metric(model)
    df = geometry.partials(model, f)
    grad_sq = np.einsum("...ij,...i,...j->...", ginv, df, df)
    lap = geometry.laplacian_scalar(model, f, gamma=gamma)
    return -lap + grad_sq - geometry.scalar_curvature(model) + n / (2.0 * tau)


def make_metric_rhs(variant: str, tau: float, background: Optional[GridModel] = None) -> Callable:
    """Build a metric-velocity callable for a named flow variant."""
    if variant == "tau":
        return lambda model: rhs_tau_flow(model, tau)
    if variant == "unnormalized":
        return rhs_unnormalized
    if variant == "deturck":
        if background is None:
            raise RejectedInputError("deturck flow needs a reference background")
        return lambda model: rhs_deturck(model, background, tau)
    raise RejectedInputError(f"unknown flow variant {variant!r}")


# ---------------------------------------------------------------------------
# time stepping


def cfl_bound(model) -> float:
    """Parabolic step bound 0.2 h^2 / max eig(g^{-1}); inf for frame ODEs."""
    if isinstance(model, FrameModel):
        return np.inf
    lam_max = np.max(np.linalg.eigvalsh(geometry.inverse_metric(model)))
    h_min = float(np.min(model.spacings))
    return CFL_FACTOR * h_min**2 / float(lam_max)


def step(state: FlowState, metric_rhs: Callable, dt: float,
         couple_f: bool = False, enforce_cfl: bool = True) -> FlowState:
    """One classical RK4 step of the metric (and the potential, if coupled).

    The updated metric is re-validated; a non-SPD result raises
    ``StepRejectedError`` so the caller can halve dt.  When ``couple_f`` is
    set the potential is advanced alongside and then re-normalized to the
    constraint.
    """
    if enforce_cfl and dt > cfl_bound(state.model):
        raise StepRejectedError(f"dt = {dt} exceeds the CFL bound {cfl_bound(state.model):.3e}")
    g0 = _metric_array(state.model)
    f0 = state.f
    if couple_f and f0 is None:
        raise RejectedInputError("coupled stepping requires a potential in the state")

    def rhs(g, f):
        model = _with_metric(state.model, g)
        dg = metric_rhs(model)
        df = rhs_potential(f, model, state.tau) if couple_f else None
        return dg, df

    k1g, k1f = rhs(g0, f0)
    k2g, k2f = rhs(g0 + 0.5 * dt * k1g, f0 + 0.5 * dt * k1f if couple_f else f0)
    k3g, k3f = rhs(g0 + 0.5 * dt * k2g, f0 + 0.5 * dt * k2f if couple_f else f0)
    k4g, k4f = rhs(g0 + dt * k3g, f0 + dt * k3f if couple_f else f0)
    g1 = g0 + (dt / 6.0) * (k1g + 2.0 * k2g + 2.0 * k3g + k4g)
    try:
        model1 = _with_metric(state.model, g1, validate=True)
        if isinstance(model1, FrameModel) and np.any(model1.a <= 0):
            raise RejectedInputError("negative frame coefficient")
    except RejectedInputError as exc:
        raise StepRejectedError(f"step to t = {state.t + dt} left the SPD cone: {exc}") from exc
    f1 = f0
    if couple_f:
        f1 = f0 + (dt / 6.0) * (k1f + 2.0 * k2f + 2.0 * k3f + k4f)
        f1 = entropy.normalize_f(model1, f1, state.tau)
    return FlowState(t=state.t + dt, model=model1, tau=state.tau, f=f1, F=state.F)


def run_flow(model0, variant: str, tau: float, dt: float, t_end: float,
             background: Optional[GridModel] = None, f0=None,
             couple_f: bool = False, sample_every: int = 1,
             record_entropy: bool = False, max_halvings: int = 8) -> Trajectory:
    """Drive ``step`` from t = 0 to ``t_end``, recording states and diagnostics.

    On step rejection dt is halved (up to ``max_halvings``); rejection past
    that limit propagates.  Diagnostics per sample: scalar curvature range,
    metric deviation from the background (if given), and the entropy record
    (if requested on a coupled run).
    """
    metric_rhs = make_metric_rhs(variant, tau, background)
    if couple_f and f0 is None:
        f0 = entropy.constant_potential(model0, tau)
    state = FlowState(t=0.0, model=model0, tau=tau, f=f0)
    traj = Trajectory(convention=variant)
    traj.append(state, _diagnose(state, background, record_entropy))
    n_steps = int(round(t_end / dt))
    i = 0
    while i < n_steps:
        halvings = 0
        sub_dt = dt
        advanced = state
        while True:
            try:
                sub = advanced
                for _ in range(2**halvings):
                    sub = step(sub, metric_rhs, sub_dt, couple_f=couple_f)
                advanced = sub
                break
            except StepRejectedError:
                halvings += 1
                sub_dt *= 0.5
                if halvings > max_halvings:
                    raise
        state = advanced
        i += 1
        if i % sample_every == 0 or i == n_steps:
            traj.append(state, _diagnose(state, background, record_entropy))
    return traj


def _diagnose(state: FlowState, background, record_entropy: bool) -> dict:
    diag = {"t": state.t}
    model = state.model
    R = geometry.scalar_curvature(model)
    diag["scalar_curvature_range"] = (
        [float(R), float(R)] if np.isscalar(R) or np.ndim(R) == 0
        else [float(np.min(R)), float(np.max(R))]
    )
    if background is not None and isinstance(model, GridModel):
        dev = model.g - background.g
        rep = geometry.norms(model, dev, k=1)
        diag["deviation_l2"] = rep.l2
        diag["deviation_sup"] = rep.sup
    if record_entropy and state.f is not None:
        rec = entropy.entropy_record(state)
        diag["entropy"] = {"W": rec.W, "defect_l2": rec.defect_l2}
    return diag


# ---------------------------------------------------------------------------
# reparametrization between the two flow conventions


def reparametrize(traj: Trajectory, tau: float, s_samples=None) -> Trajectory:
    """Translate a tau-flow trajectory to the unnormalized convention.

    Uses ``c(s) = 1 - s/tau``, ``t(s) = -tau log(1 - s/tau)`` and
    ``g~(s) = c(s) g(t(s))`` with cubic interpolation of the metric in t.
    Requires ``s < tau``.
    """
    if traj.convention != "tau":
        raise RejectedInputError("reparametrize expects a tau-flow trajectory")
    interp = MetricInterpolant(traj)
    if s_samples is None:
        s_samples = tau * (1.0 - np.exp(-traj.times / tau))
    s_samples = np.asarray(s_samples, dtype=float)
    if np.any(s_samples >= tau):
        raise RejectedInputError("reparametrization requires s < tau")
    out = Trajectory(convention="unnormalized")
    for s in s_samples:
        c = 1.0 - s / tau
        t = -tau * np.log(c)
        model = interp(t)
        model = _with_metric(model, c * _metric_array(model))
        out.append(FlowState(t=float(s), model=model, tau=np.inf), {"t": float(s)})
    return out


def reparametrize_inverse(traj: Trajectory, tau: float, t_samples=None) -> Trajectory:
    """Translate an unnormalized trajectory back to the tau-flow convention."""
    if traj.convention != "unnormalized":
        raise RejectedInputError("reparametrize_inverse expects an unnormalized trajectory")
    interp = MetricInterpolant(traj)
    if t_samples is None:
        t_samples = -tau * np.log(1.0 - traj.times / tau)
    t_samples = np.asarray(t_samples, dtype=float)
    out = Trajectory(convention="tau")
    for t in t_samples:
        s = tau * (1.0 - np.exp(-t / tau))
        c = 1.0 - s / tau
        model = interp(s)
        model = _with_metric(model, _metric_array(model) / c)
        out.append(FlowState(t=float(t), model=model, tau=tau), {"t": float(t)})
    return out
