"""Runtime convergence certificates evaluated over recorded trajectories.

Each filtered flow comes with an energy that is nonincreasing along exact
trajectories; evaluating it on RK-4 snapshots turns the theory into a
checkable artifact.  Discretization and trapezoid quadrature make exact
monotonicity unattainable, so monotonicity is always asserted with an
explicit per-step slack (ENERGY_SLACK) rather than exactly.

All integral terms use trapezoid quadrature on the snapshot grid, which
matches the integrator's sampling without extra oracle calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .dynamics import surrogate_hypergradient
from .errors import MissingConstant
from .integrator import Trajectory
from .linalg import solve_gram_dual
from .problems import BilevelProblem, SolverState, solve_lower

__all__ = [
    "ENERGY_SLACK",
    "EnergySeries",
    "BoundReport",
    "energy_integral_weight",
    "dual_bound",
    "safe_flow_energy",
    "relaxed_flow_energy",
    "prediction_correction_energy",
    "pc_tracking_envelope",
    "pc_time_average_bound",
    "contraction_deviation",
    "kkt_residual",
    "feasibility_fraction",
]

# Absolute per-step slack for monotonicity checks of discretized energies.
ENERGY_SLACK = 1e-6


@dataclass(frozen=True)
class EnergySeries:
    """Energy values over snapshot times, with the per-term breakdown.

    values = objective_gap + barrier + integral at every index.  The integral
    column is the weighted accumulated quadrature term and is nondecreasing.
    """

    times: np.ndarray
    values: np.ndarray
    objective_gap: np.ndarray
    barrier: np.ndarray
    integral: np.ndarray
    constants: dict

    def violations(self, slack: float = ENERGY_SLACK) -> int:
        """Number of snapshot-to-snapshot increases larger than slack."""
        return int(np.sum(np.diff(self.values) > slack))


@dataclass(frozen=True)
class BoundReport:
    """Two sides of an inequality; checked is False when a constant was absent."""

    lhs: float
    rhs: float
    checked: bool


def _require(problem: BilevelProblem, *symbols: str) -> list[float]:
    values = []
    for sym in symbols:
        val = getattr(problem.constants, sym)
        if val is None:
            raise MissingConstant(sym)
        values.append(float(val))
    return values


def energy_integral_weight(problem: BilevelProblem) -> float:
    """Weight c = mu^2 / (mu^2 + L_yx^2) on the accumulated surrogate norm."""
    mu, lyx = _require(problem, "mu_g", "L_yx_g")
    return mu * mu / (mu * mu + lyx * lyx)


def dual_bound(problem: BilevelProblem, alpha: float, state0: SolverState) -> float:
    """Bound beta on the equality filter's dual norm along the flow.

    beta = (C_yx_g C_x_f + C_yy_g C_y_f + alpha ||grad_y g(x0, y0)||) / mu^2.
    """
    cyx, cxf, cyy, cyf, mu = _require(problem, "C_yx_g", "C_x_f", "C_yy_g", "C_y_f", "mu_g")
    _, gyg, _, _ = problem.lower(state0.x, state0.y)
    return (cyx * cxf + cyy * cyf + alpha * float(np.linalg.norm(gyg))) / (mu * mu)


def _surrogate_norms_sq(trajectory: Trajectory, problem: BilevelProblem) -> np.ndarray:
    out = np.empty(len(trajectory.snapshots))
    for i, snap in enumerate(trajectory.snapshots):
        F = surrogate_hypergradient(problem, snap.state.x, snap.state.y)
        out[i] = float(F @ F)
    return out


def safe_flow_energy(
    trajectory: Trajectory, problem: BilevelProblem, alpha: float, f_ref: float
) -> EnergySeries:
    """Energy f - f_ref + beta ||grad_y g|| + c * integral ||F||^2 for the equality filter."""
    t = trajectory.times()
    c = energy_integral_weight(problem)
    beta = dual_bound(problem, alpha, trajectory.snapshots[0].state)
    gap = trajectory.f_values() - f_ref
    barrier = beta * trajectory.norm_grad_y_g()
    integral = c * cumulative_trapezoid(_surrogate_norms_sq(trajectory, problem), t, initial=0.0)
    return EnergySeries(
        times=t,
        values=gap + barrier + integral,
        objective_gap=gap,
        barrier=barrier,
        integral=integral,
        constants={"beta": beta, "c": c, "f_ref": f_ref},
    )


def relaxed_flow_energy(
    trajectory: Trajectory, problem: BilevelProblem, f_eps_ref: float
) -> EnergySeries:
    """Energy f - f_eps_ref + c * integral ||F||^2 for the relaxed filter."""
    t = trajectory.times()
    c = energy_integral_weight(problem)
    gap = trajectory.f_values() - f_eps_ref
    barrier = np.zeros_like(gap)
    integral = c * cumulative_trapezoid(_surrogate_norms_sq(trajectory, problem), t, initial=0.0)
    return EnergySeries(
        times=t,
        values=gap + integral,
        objective_gap=gap,
        barrier=barrier,
        integral=integral,
        constants={"c": c, "f_ref": f_eps_ref},
    )


def _implicit_values(trajectory: Trajectory, problem: BilevelProblem, lower_tol: float):
    """l(x_k) and grad l(x_k) at snapshot states, via ground truth or inner solves."""
    truth = problem.ground_truth
    ells = np.empty(len(trajectory.snapshots))
    grads = []
    for i, snap in enumerate(trajectory.snapshots):
        x = snap.state.x
        if truth is not None and truth.lower_solution is not None:
            y_star = truth.lower_solution(x)
        else:
            y_star = solve_lower(problem, x, tol=lower_tol)
        f, *_ = problem.upper(x, y_star)
        ells[i] = f
        if truth is not None and truth.implicit_gradient is not None:
            grads.append(np.asarray(truth.implicit_gradient(x), dtype=float))
        else:
            grads.append(surrogate_hypergradient(problem, x, y_star))
    return ells, np.stack(grads)


def prediction_correction_energy(
    trajectory: Trajectory, problem: BilevelProblem, lower_tol: float = 1e-10
) -> EnergySeries:
    """Energy l(x) - l* + (1/2) integral ||grad l||^2 for the tracking flow.

    l is evaluated through the ground-truth lower solution when available and
    through Newton inner solves otherwise.  When the optimal value is unknown
    the series is shifted by l* = 0; monotonicity is unaffected by the shift.
    """
    t = trajectory.times()
    ells, grads = _implicit_values(trajectory, problem, lower_tol)
    truth = problem.ground_truth
    shifted = truth is None or truth.optimal_value is None
    l_ref = 0.0 if shifted else float(truth.optimal_value)
    gap = ells - l_ref
    sq = np.einsum("ij,ij->i", grads, grads)
    integral = 0.5 * cumulative_trapezoid(sq, t, initial=0.0)
    return EnergySeries(
        times=t,
        values=gap + integral,
        objective_gap=gap,
        barrier=np.zeros_like(gap),
        integral=integral,
        constants={"c": 0.5, "f_ref": l_ref, "shifted": shifted},
    )


def pc_tracking_envelope(
    trajectory: Trajectory, problem: BilevelProblem, beta: float, lower_tol: float = 1e-10
) -> float:
    """Max over snapshots of ||y - y*(x)|| relative to its contraction envelope.

    The envelope is (1/mu) ||grad_y g(0)|| exp(-beta t); a return value of at
    most 1 certifies the tracking bound at snapshot resolution.
    """
    (mu,) = _require(problem, "mu_g")
    t = trajectory.times()
    n0 = trajectory.snapshots[0].diagnostics.norm_grad_y_g
    envelope = (n0 / mu) * np.exp(-beta * (t - t[0]))
    truth = problem.ground_truth
    worst = 0.0
    for i, snap in enumerate(trajectory.snapshots):
        x = snap.state.x
        if truth is not None and truth.lower_solution is not None:
            y_star = truth.lower_solution(x)
        else:
            y_star = solve_lower(problem, x, tol=lower_tol)
        dist = float(np.linalg.norm(snap.state.y - y_star))
        if envelope[i] > 0:
            worst = max(worst, dist / envelope[i])
        elif dist > 0:
            worst = np.inf
    return worst


def pc_time_average_bound(
    trajectory: Trajectory, problem: BilevelProblem, beta: float, lower_tol: float = 1e-10
) -> BoundReport:
    """Time-averaged hypergradient bound for the tracking flow.

    lhs = (1/2t) integral ||grad l||^2,
    rhs = (1/t) (l(x0) - l* + M_1^2 ||grad_y g(0)||^2 / (4 beta mu^2)).
    checked is False (rhs = nan) when M_1 or the optimal value is unknown.
    """
    t = trajectory.times()
    span = float(t[-1] - t[0])
    if span <= 0:
        raise ValueError("trajectory spans zero time")
    ells, grads = _implicit_values(trajectory, problem, lower_tol)
    sq = np.einsum("ij,ij->i", grads, grads)
    lhs = 0.5 * float(trapezoid(sq, t)) / span

    m1 = problem.constants.M_1
    mu = problem.constants.mu_g
    truth = problem.ground_truth
    l_star = None if truth is None else truth.optimal_value
    if m1 is None or mu is None or l_star is None:
        return BoundReport(lhs=lhs, rhs=float("nan"), checked=False)
    n0 = trajectory.snapshots[0].diagnostics.norm_grad_y_g
    rhs = (float(ells[0]) - float(l_star) + m1**2 * n0**2 / (4.0 * beta * mu**2)) / span
    return BoundReport(lhs=lhs, rhs=rhs, checked=True)


def contraction_deviation(trajectory: Trajectory, alpha: float) -> float:
    """Max deviation of ||grad_y g(t)|| from exp(-alpha t) decay.

    Relative to the initial norm, floored at unit scale so that trajectories
    started on the manifold (initial norm zero up to rounding) report their
    absolute drift instead of dividing rounding noise by zero.
    """
    t = trajectory.times()
    norms = trajectory.norm_grad_y_g()
    n0 = norms[0]
    predicted = n0 * np.exp(-alpha * (t - t[0]))
    return float(np.max(np.abs(norms - predicted)) / max(n0, 1.0))


def kkt_residual(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> float:
    """Residual of the manifold-constrained stationarity system.

    Uses the least-squares multiplier for the stationarity block and adds
    ||grad_y g||; zero exactly at points satisfying the full system.
    """
    _, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)
    lam = solve_gram_dual(hyx, hyy, hyx @ gx + hyy @ gy)
    rx = gx + hyx.T @ lam
    ry = gy + hyy @ lam
    stationarity = float(np.sqrt(rx @ rx + ry @ ry))
    return stationarity + float(np.linalg.norm(gyg))


def feasibility_fraction(trajectory: Trajectory, eps: float) -> float:
    """Fraction of snapshots with h <= eps^2 + 1e-8."""
    h = trajectory.h_values()
    return float(np.mean(h <= eps**2 + 1e-8))
