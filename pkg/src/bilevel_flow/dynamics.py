"""Velocity fields of the filtered flows and the surrogate hypergradient.

All flows start from the plain gradient flow of the upper objective,

    xdot = -grad_x f,   ydot = -grad_y f,

and differ in how they enforce the lower-level optimality condition
grad_y g(x, y) = 0 (the manifold M):

  equality filter (sgf)    project the velocity onto the affine constraint
                           Hyx xdot + Hyy ydot + alpha * grad_y g = 0,
                           which makes ||grad_y g|| decay like exp(-alpha t).
                           Dual lam is an m-vector from a Gram solve.

  compact filter           same idea applied to the scalar surrogate
                           h = ||grad_y g||^2 with equality constraint
                           grad h . v + alpha h = 0; scalar dual, no m x m
                           inversion, but discontinuous on M (lam := 0 there).

  relaxed filter (rxgf)    inequality version with slack eps:
                           grad h . v + alpha (h - eps^2) <= 0, clipped dual
                           lam = [.]_+ / ||grad h||^2; Lipschitz everywhere
                           and forward-invariant on {h <= eps^2}.

  prediction-correction    xdot = -F(x, y) with F the surrogate hypergradient,
                           ydot = -Hyy^{-1} (beta grad_y g + Hyx xdot), i.e. a
                           Newton contraction plus a term tracking y*(x(t)).

Oracle accounting, used by the matched-budget comparison protocol: one unit
per upper bundle (f, grad_x f, grad_y f), one per lower first-order bundle
(g, grad_y g), one per Hessian block consumed.  Filters and the
prediction-correction flow therefore cost 4 units per evaluation; the raw
gradient flow costs 2 (its lower bundle only feeds diagnostics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConstraint
from .linalg import SpdFactorization, solve_gram_dual, solve_spd
from .problems import BilevelProblem

__all__ = [
    "MANIFOLD_TOL",
    "DENOM_TOL",
    "FilterOutput",
    "BarrierEval",
    "barrier_eval",
    "surrogate_hypergradient",
    "safe_flow_velocity",
    "compact_flow_velocity",
    "relaxed_flow_velocity",
    "prediction_correction_velocity",
    "gradient_flow_velocity",
]

# Branch guards for the scalar filters.  The compact dynamics are genuinely
# discontinuous at h = 0, so the branch must be an explicit, testable cutoff.
MANIFOLD_TOL = 1e-12
DENOM_TOL = 1e-14

_FILTER_EVALS = 4  # upper bundle + lower first-order + two Hessian blocks
_RAW_EVALS = 2     # upper bundle + lower first-order (diagnostics only)


@dataclass(frozen=True)
class FilterOutput:
    """One velocity evaluation plus the diagnostics it computed on the way.

    dual is the filter multiplier: an m-vector for the equality filter, a
    scalar for the compact/relaxed filters, None when there is no filter.
    active reports whether the relaxed inequality (or scalar equality) was
    enforced.  evals counts oracle units per the module convention.
    """

    xdot: np.ndarray
    ydot: np.ndarray
    dual: np.ndarray | float | None
    active: bool
    evals: int
    f_value: float
    norm_grad_y_g: float
    h: float

    @property
    def lambda_norm(self) -> float:
        if self.dual is None:
            return 0.0
        if np.ndim(self.dual) == 0:
            return abs(float(self.dual))
        return float(np.linalg.norm(self.dual))


@dataclass(frozen=True)
class BarrierEval:
    """h = ||grad_y g||^2 and its gradients via the Hessian-block identities."""

    h: float
    grad_x_h: np.ndarray
    grad_y_h: np.ndarray


def barrier_eval(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> BarrierEval:
    _, gyg, hyx, hyy = problem.lower(x, y)
    return BarrierEval(
        h=float(gyg @ gyg),
        grad_x_h=2.0 * (hyx.T @ gyg),
        grad_y_h=2.0 * (hyy @ gyg),
    )


def surrogate_hypergradient(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Hypergradient estimate F(x, y) = grad_x f - Hyx^T v, Hyy v = grad_y f.

    Equals the exact hypergradient grad l(x) when y = y*(x).
    """
    _, gx, gy = problem.upper(x, y)
    _, _, hyx, hyy = problem.lower(x, y)
    v = solve_spd(hyy, gy)
    return gx - hyx.T @ v


def safe_flow_velocity(
    problem: BilevelProblem, x: np.ndarray, y: np.ndarray, alpha: float
) -> FilterOutput:
    """Gradient flow filtered through the m-dimensional equality constraint."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    f, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)
    rhs = hyx @ gx + hyy @ gy - alpha * gyg
    lam = solve_gram_dual(hyx, hyy, rhs)
    return FilterOutput(
        xdot=-gx - hyx.T @ lam,
        ydot=-gy - hyy @ lam,
        dual=lam,
        active=True,
        evals=_FILTER_EVALS,
        f_value=f,
        norm_grad_y_g=float(np.linalg.norm(gyg)),
        h=float(gyg @ gyg),
    )


def compact_flow_velocity(
    problem: BilevelProblem, x: np.ndarray, y: np.ndarray, alpha: float
) -> FilterOutput:
    """Scalar equality filter on h = ||grad_y g||^2; plain gradient flow on M."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    f, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)
    h = float(gyg @ gyg)
    norm_gyg = float(np.linalg.norm(gyg))
    if h <= MANIFOLD_TOL:
        return FilterOutput(-gx, -gy, 0.0, False, _FILTER_EVALS, f, norm_gyg, h)
    ghx = 2.0 * (hyx.T @ gyg)
    ghy = 2.0 * (hyy @ gyg)
    denom = float(ghx @ ghx) + float(ghy @ ghy)
    if denom < DENOM_TOL:
        raise DegenerateConstraint(
            f"h = {h:.3e} off the manifold but ||grad h||^2 = {denom:.3e}"
        )
    lam = (-float(ghx @ gx) - float(ghy @ gy) + alpha * h) / denom
    return FilterOutput(
        xdot=-gx - lam * ghx,
        ydot=-gy - lam * ghy,
        dual=lam,
        active=True,
        evals=_FILTER_EVALS,
        f_value=f,
        norm_grad_y_g=norm_gyg,
        h=h,
    )


def relaxed_flow_velocity(
    problem: BilevelProblem, x: np.ndarray, y: np.ndarray, alpha: float, eps: float
) -> FilterOutput:
    """Halfspace projection enforcing d/dt (h - eps^2) <= -alpha (h - eps^2).

    The clipped dual keeps the field Lipschitz; trajectories started with
    h <= eps^2 stay there.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    f, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)
    h = float(gyg @ gyg)
    norm_gyg = float(np.linalg.norm(gyg))
    ghx = 2.0 * (hyx.T @ gyg)
    ghy = 2.0 * (hyy @ gyg)
    bracket = -float(ghx @ gx) - float(ghy @ gy) + alpha * (h - eps**2)
    if bracket <= 0.0:
        return FilterOutput(-gx, -gy, 0.0, False, _FILTER_EVALS, f, norm_gyg, h)
    denom = float(ghx @ ghx) + float(ghy @ ghy)
    if denom < DENOM_TOL:
        raise DegenerateConstraint(
            f"positive bracket {bracket:.3e} but ||grad h||^2 = {denom:.3e}"
        )
    lam = bracket / denom
    return FilterOutput(
        xdot=-gx - lam * ghx,
        ydot=-gy - lam * ghy,
        dual=lam,
        active=True,
        evals=_FILTER_EVALS,
        f_value=f,
        norm_grad_y_g=norm_gyg,
        h=h,
    )


def prediction_correction_velocity(
    problem: BilevelProblem, x: np.ndarray, y: np.ndarray, beta: float
) -> FilterOutput:
    """Surrogate descent in x; Newton contraction plus drift tracking in y.

    One Hessian factorization serves both the surrogate solve and ydot.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    f, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)
    fac = SpdFactorization(hyy)
    v = fac.solve(gy)
    xdot = -(gx - hyx.T @ v)
    ydot = -fac.solve(beta * gyg + hyx @ xdot)
    return FilterOutput(
        xdot=xdot,
        ydot=ydot,
        dual=None,
        active=False,
        evals=_FILTER_EVALS,
        f_value=f,
        norm_grad_y_g=float(np.linalg.norm(gyg)),
        h=float(gyg @ gyg),
    )


def gradient_flow_velocity(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> FilterOutput:
    """Unfiltered gradient flow; the lower bundle is evaluated for diagnostics."""
    f, gx, gy = problem.upper(x, y)
    _, gyg, _, _ = problem.lower(x, y)
    return FilterOutput(
        xdot=-gx,
        ydot=-gy,
        dual=None,
        active=False,
        evals=_RAW_EVALS,
        f_value=f,
        norm_grad_y_g=float(np.linalg.norm(gyg)),
        h=float(gyg @ gyg),
    )
