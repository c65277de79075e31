"""Fixed-step RK-4 discretization of a velocity field, with trajectory recording.

The step size is fixed on purpose: it keeps the oracle-budget accounting
trivial (4 field evaluations per step) for matched-budget comparisons.
Snapshot diagnostics come from an extra field evaluation at the recorded
state; that evaluation never touches the state's grad_evals counter, so the
counter reflects algorithmic work only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import FilterOutput
from .errors import BilevelFlowError
from .problems import SolverState

__all__ = [
    "IntegratorConfig",
    "StepDiagnostics",
    "Snapshot",
    "Trajectory",
    "rk4_step",
    "integrate",
    "stop_reason",
]

VelocityField = Callable[[SolverState], FilterOutput]

_STAGE_OFFSETS = (0.0, 0.5, 0.5, 1.0)
_COMBINE = (1.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon, optional stopping rules, snapshot stride.

    A zero stopping tolerance disables that rule.
    """

    dt: float
    horizon: float
    stop_velocity_tol: float = 0.0
    stop_kkt_tol: float = 0.0
    record_every: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.dt > self.horizon:
            raise ValueError(f"dt = {self.dt} exceeds horizon = {self.horizon}")
        if self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")


@dataclass(frozen=True)
class StepDiagnostics:
    norm_grad_y_g: float
    h: float
    f_value: float
    lambda_norm: float


@dataclass(frozen=True)
class Snapshot:
    state: SolverState
    output: FilterOutput
    diagnostics: StepDiagnostics


@dataclass
class Trajectory:
    snapshots: list[Snapshot]
    metadata: dict = field(default_factory=dict)

    @property
    def final_state(self) -> SolverState:
        return self.snapshots[-1].state

    def times(self) -> np.ndarray:
        return np.array([s.state.t for s in self.snapshots])

    def norm_grad_y_g(self) -> np.ndarray:
        return np.array([s.diagnostics.norm_grad_y_g for s in self.snapshots])

    def h_values(self) -> np.ndarray:
        return np.array([s.diagnostics.h for s in self.snapshots])

    def f_values(self) -> np.ndarray:
        return np.array([s.diagnostics.f_value for s in self.snapshots])

    def lambda_norms(self) -> np.ndarray:
        return np.array([s.diagnostics.lambda_norm for s in self.snapshots])

    def grad_evals(self) -> np.ndarray:
        return np.array([s.state.grad_evals for s in self.snapshots])

    def xs(self) -> np.ndarray:
        return np.stack([s.state.x for s in self.snapshots])

    def ys(self) -> np.ndarray:
        return np.stack([s.state.y for s in self.snapshots])


def _snapshot(state: SolverState, out: FilterOutput) -> Snapshot:
    return Snapshot(
        state=state,
        output=out,
        diagnostics=StepDiagnostics(
            norm_grad_y_g=out.norm_grad_y_g,
            h=out.h,
            f_value=out.f_value,
            lambda_norm=out.lambda_norm,
        ),
    )


def rk4_step(field: VelocityField, state: SolverState, dt: float) -> SolverState:
    """One classical RK-4 step of (x, y); t advances by dt.

    grad_evals grows by the four stage evaluations.  A field error is
    re-raised with the failing stage recorded on its ``rk4_stage`` attribute.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    outs = []
    evals = 0
    prev: FilterOutput | None = None
    for i, c in enumerate(_STAGE_OFFSETS):
        if i == 0:
            xs, ys = state.x, state.y
        else:
            xs = state.x + (dt * c) * prev.xdot
            ys = state.y + (dt * c) * prev.ydot
        probe = SolverState(xs, ys, state.t + c * dt, state.grad_evals + evals)
        try:
            prev = field(probe)
        except BilevelFlowError as exc:
            exc.rk4_stage = i + 1
            raise
        evals += prev.evals
        outs.append(prev)
    dx = sum(w * o.xdot for w, o in zip(_COMBINE, outs))
    dy = sum(w * o.ydot for w, o in zip(_COMBINE, outs))
    return SolverState(
        x=state.x + (dt / 6.0) * dx,
        y=state.y + (dt / 6.0) * dy,
        t=state.t + dt,
        grad_evals=state.grad_evals + evals,
    )


def stop_reason(
    state: SolverState,
    output: FilterOutput,
    config: IntegratorConfig,
    kkt_residual_fn: Callable[[SolverState], float] | None = None,
) -> str | None:
    """Return "velocity" or "kkt" when a stopping rule fires, else None."""
    if config.stop_velocity_tol > 0:
        speed = float(np.linalg.norm(output.xdot)) + float(np.linalg.norm(output.ydot))
        if speed <= config.stop_velocity_tol:
            return "velocity"
    if config.stop_kkt_tol > 0:
        if kkt_residual_fn is None:
            raise ValueError("stop_kkt_tol is set but no KKT residual function was given")
        if kkt_residual_fn(state) <= config.stop_kkt_tol:
            return "kkt"
    return None


def integrate(
    field: VelocityField,
    state0: SolverState,
    config: IntegratorConfig,
    metadata: dict | None = None,
    kkt_residual_fn: Callable[[SolverState], float] | None = None,
) -> Trajectory:
    """Run RK-4 until t >= horizon or a stopping rule fires.

    The initial and final states are always recorded; intermediate states per
    record_every.  On a field error the exception carries the recorded part
    of the trajectory on its ``partial_trajectory`` attribute.
    """
    meta = dict(metadata or {})
    snaps: list[Snapshot] = []
    state = state0
    n_steps = max(1, math.ceil(config.horizon / config.dt - 1e-9))
    try:
        out = field(state)
    except BilevelFlowError as exc:
        exc.partial_trajectory = Trajectory(snaps, {**meta, "stop_reason": "error"})
        raise
    snaps.append(_snapshot(state, out))
    reason = stop_reason(state, out, config, kkt_residual_fn)
    last_recorded = state

    for k in range(n_steps):
        if reason is not None:
            break
        try:
            state = rk4_step(field, state, config.dt)
            out = field(state)
        except BilevelFlowError as exc:
            exc.partial_trajectory = Trajectory(snaps, {**meta, "stop_reason": "error"})
            raise
        if (k + 1) % config.record_every == 0:
            snaps.append(_snapshot(state, out))
            last_recorded = state
        reason = stop_reason(state, out, config, kkt_residual_fn)

    if last_recorded is not state:
        snaps.append(_snapshot(state, out))
    meta["stop_reason"] = reason if reason is not None else "horizon"
    return Trajectory(snaps, meta)
