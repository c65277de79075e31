"""Bilevel problem oracles and the shipped test problems.

A problem bundles both objectives through derivative oracles:

    upper(x, y) -> (f, grad_x f, grad_y f)
    lower(x, y) -> (g, grad_y g, d2g/dydx [m x n], d2g/dy2 [m x m])

The lower objective must be strongly convex in y, so its optimality set
{grad_y g(x, y) = 0} is the graph of a single-valued map y*(x).  Shipped
problems record the regularity constants their construction makes exact.

Oracles are pure functions of their inputs and may be called concurrently;
returned arrays are owned by the oracle and must not be mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonConvergence, NotPositiveDefinite, SingularHessian
from .linalg import SpdFactorization, conditioned_from_rng

__all__ = [
    "ProblemConstants",
    "GroundTruth",
    "BilevelProblem",
    "SolverState",
    "HypercleaningData",
    "FdReport",
    "make_toy1",
    "make_quadratic_ll",
    "make_hypercleaning",
    "check_derivatives",
    "solve_lower",
]

UpperOracle = Callable[[np.ndarray, np.ndarray], tuple]
LowerOracle = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class ProblemConstants:
    """Regularity constants; any entry may be absent (None).

    mu_g     strong convexity modulus of g(x, .)
    L_yx_g   Lipschitz modulus of x -> grad_y g(x, y)
    C_x_f    bound on ||grad_x f||
    C_y_f    bound on ||grad_y f||
    C_yx_g   Lipschitz modulus of the mixed Hessian block
    C_yy_g   Lipschitz modulus of the lower Hessian
    M_1      surrogate-vs-hypergradient error modulus, user-supplied when known
    """

    mu_g: float | None = None
    L_yx_g: float | None = None
    C_x_f: float | None = None
    C_y_f: float | None = None
    C_yx_g: float | None = None
    C_yy_g: float | None = None
    M_1: float | None = None


@dataclass(frozen=True)
class GroundTruth:
    """Optional known answers used by tests and certificates."""

    lower_solution: Callable[[np.ndarray], np.ndarray] | None = None
    implicit_gradient: Callable[[np.ndarray], np.ndarray] | None = None
    optimal_value: float | None = None


@dataclass(frozen=True)
class BilevelProblem:
    name: str
    dim_upper: int
    dim_lower: int
    upper: UpperOracle
    lower: LowerOracle
    constants: ProblemConstants = ProblemConstants()
    ground_truth: GroundTruth | None = None
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverState:
    """Current point of a flow, with time and oracle-budget bookkeeping."""

    x: np.ndarray
    y: np.ndarray
    t: float = 0.0
    grad_evals: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))


@dataclass(frozen=True)
class HypercleaningData:
    """Generator bookkeeping for the synthetic hyper-cleaning task."""

    train_features: np.ndarray
    train_labels: np.ndarray
    clean_labels: np.ndarray
    corrupt_mask: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray
    classes: int
    reg: float


def make_toy1() -> BilevelProblem:
    """1-D fixture with closed-form everything.

    f(x, y) = (x-1)^2/2 + (y-2)^2/2,  g(x, y) = (y-x)^2/2.
    The lower level makes y track x, so l(x) = f(x, x), grad l(x) = 2x-3,
    and the unique solution is (x*, y*) = (1.5, 1.5) with l* = 0.25.
    """
    hyx = np.array([[-1.0]])
    hyy = np.array([[1.0]])

    def upper(x, y):
        gx = x - 1.0
        gy = y - 2.0
        f = 0.5 * float(gx @ gx) + 0.5 * float(gy @ gy)
        return f, gx, gy

    def lower(x, y):
        r = y - x
        g = 0.5 * float(r @ r)
        return g, r, hyx, hyy

    # The g-Hessian blocks are constant, so their Lipschitz moduli vanish;
    # the f-gradient bounds only enter downstream formulas multiplied by
    # those moduli, which makes zero exact in every place they are used.
    constants = ProblemConstants(
        mu_g=1.0, L_yx_g=1.0, C_x_f=0.0, C_y_f=0.0, C_yx_g=0.0, C_yy_g=0.0, M_1=1.0
    )
    truth = GroundTruth(
        lower_solution=lambda x: np.asarray(x, dtype=float).copy(),
        implicit_gradient=lambda x: 2.0 * np.asarray(x, dtype=float) - 3.0,
        optimal_value=0.25,
    )
    return BilevelProblem("toy1", 1, 1, upper, lower, constants, truth)


def make_quadratic_ll(seed: int, n: int, m: int, cond_max: float) -> BilevelProblem:
    """Sinusoidal-plus-log upper objective over a random quadratic lower level.

    g(x, y) = ||H y - x||^2 / 2 with H square of condition number at most
    cond_max, and f(x, y) = sin(c.x + d.y) + log(||x+y||^2 + 1) with c, d
    standard Gaussian.  cond_max = 1 pins H to the identity, which is handy
    for exact-solve tests; otherwise H = U diag(s) V^T with s log-uniform
    in [1, cond_max].
    """
    if cond_max < 1:
        raise ValueError(f"cond_max must be >= 1, got {cond_max}")
    if m != n:
        raise ValueError(f"H is square: need m == n, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    if cond_max == 1:
        h_mat = np.eye(m)
    else:
        h_mat = conditioned_from_rng(rng, m, cond_max)
    c = rng.standard_normal(n)
    d = rng.standard_normal(m)

    hth = h_mat.T @ h_mat
    hth = 0.5 * (hth + hth.T)
    hyx = -h_mat.T
    sv = np.linalg.svd(h_mat, compute_uv=False)
    hth_fac = SpdFactorization(hth)

    def upper(x, y):
        s = float(c @ x + d @ y)
        w = x + y
        q = float(w @ w) + 1.0
        f = math.sin(s) + math.log(q)
        cs = math.cos(s)
        gw = (2.0 / q) * w
        return f, cs * c + gw, cs * d + gw

    def lower(x, y):
        r = h_mat @ y - x
        g = 0.5 * float(r @ r)
        return g, h_mat.T @ r, hyx, hth

    # mu_g and L_yx_g are exact because the Hessian blocks are constant:
    # d2g/dy2 = H^T H and d2g/dydx = -H^T everywhere.  ||2w/(||w||^2+1)|| <= 1
    # bounds the log term's gradient.
    constants = ProblemConstants(
        mu_g=float(sv[-1] ** 2),
        L_yx_g=float(sv[0]),
        C_x_f=float(np.linalg.norm(c) + 1.0),
        C_y_f=float(np.linalg.norm(d) + 1.0),
        C_yx_g=0.0,
        C_yy_g=0.0,
    )
    truth = GroundTruth(lower_solution=lambda x: hth_fac.solve(h_mat.T @ x))
    extras = {"H": h_mat, "c": c, "d": d}
    return BilevelProblem("quadratic_ll", n, m, upper, lower, constants, truth, extras)


def _softmax_terms(z: np.ndarray, labels: np.ndarray):
    """Per-row cross-entropy losses, loss gradients w.r.t. logits, and probabilities."""
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sz = ez.sum(axis=1)
    p = ez / sz[:, None]
    idx = np.arange(z.shape[0])
    losses = zmax[:, 0] + np.log(sz) - z[idx, labels]
    d = p.copy()
    d[idx, labels] -= 1.0
    return losses, d, p


def make_hypercleaning(
    seed: int,
    n_train: int,
    n_val: int,
    dim: int,
    classes: int,
    corrupt_frac: float,
    reg: float,
) -> BilevelProblem:
    """Synthetic data hyper-cleaning task at desk scale.

    Gaussian class clusters; a fraction of training labels is reassigned to a
    wrong class.  The upper variable x holds one logit per training sample,
    the lower variable y the flattened (dim x classes) classifier weights:

        f(x, y) = mean validation cross-entropy of the classifier y
        g(x, y) = mean_i sigmoid(x_i) * CE_i(y)  +  reg * ||y||^2

    The ridge term makes g strongly convex with mu_g = 2*reg exactly: the
    cross-entropy Hessian is a weighted sum of kron(a a^T, S) blocks whose S
    factors annihilate the all-ones logit direction, so the minimum
    eigenvalue is set by the ridge alone.
    """
    if not 0.0 <= corrupt_frac < 1.0:
        raise ValueError(f"corrupt_frac must lie in [0, 1), got {corrupt_frac}")
    if reg <= 0.0:
        raise ValueError(f"reg must be positive, got {reg}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")

    rng = np.random.default_rng(seed)
    means = 2.0 * rng.standard_normal((classes, dim))

    def sample(count):
        labels = rng.integers(0, classes, size=count)
        feats = means[labels] + rng.standard_normal((count, dim))
        return feats, labels

    train_x, clean_labels = sample(n_train)
    val_x, val_labels = sample(n_val)

    labels = clean_labels.copy()
    mask = np.zeros(n_train, dtype=bool)
    n_corrupt = int(round(corrupt_frac * n_train))
    if n_corrupt > 0:
        idx = rng.choice(n_train, size=n_corrupt, replace=False)
        labels[idx] = (clean_labels[idx] + rng.integers(1, classes, size=n_corrupt)) % classes
        mask[idx] = True

    m = dim * classes
    class_idx = np.arange(classes)

    def upper(x, y):
        z = val_x @ y.reshape(dim, classes)
        losses, dlogit, _ = _softmax_terms(z, val_labels)
        f = float(losses.mean())
        gy = (val_x.T @ dlogit).ravel() / n_val
        return f, np.zeros(n_train), gy

    def lower(x, y):
        z = train_x @ y.reshape(dim, classes)
        losses, dlogit, p = _softmax_terms(z, labels)
        w = 1.0 / (1.0 + np.exp(-x))
        g = float(w @ losses) / n_train + reg * float(y @ y)
        gy = (train_x.T @ (w[:, None] * dlogit)).ravel() / n_train + 2.0 * reg * y
        per_sample = (train_x[:, :, None] * dlogit[:, None, :]).reshape(n_train, m)
        hyx = (w * (1.0 - w) / n_train) * per_sample.T
        # per-sample softmax Hessians S_i = diag(p_i) - p_i p_i^T, weighted by w_i
        s_all = -(p[:, :, None] * p[:, None, :])
        s_all[:, class_idx, class_idx] += p
        s_all *= w[:, None, None]
        # hyy[(j,c),(k,d)] = sum_i a_ij a_ik (w S)_icd / N  +  ridge
        mixed = (train_x[:, :, None] * s_all.reshape(n_train, 1, -1)).reshape(n_train, -1)
        blocks = (train_x.T @ mixed).reshape(dim, dim, classes, classes)
        hyy = np.ascontiguousarray(blocks.transpose(0, 2, 1, 3)).reshape(m, m)
        hyy /= n_train
        hyy = 0.5 * (hyy + hyy.T)
        hyy.flat[:: m + 1] += 2.0 * reg
        return g, gy, hyx, hyy

    # Rigorous bounds: ||p - e_b|| <= sqrt(2), sigmoid' <= 1/4, and grad_x f = 0.
    row_norms = np.linalg.norm(train_x, axis=1)
    constants = ProblemConstants(
        mu_g=2.0 * reg,
        L_yx_g=float(np.sqrt((row_norms**2).sum() / 8.0) / n_train),
        C_x_f=0.0,
        C_y_f=float(math.sqrt(2.0) * np.linalg.norm(val_x, axis=1).sum() / n_val),
    )
    data = HypercleaningData(
        train_features=train_x,
        train_labels=labels,
        clean_labels=clean_labels,
        corrupt_mask=mask,
        val_features=val_x,
        val_labels=val_labels,
        classes=classes,
        reg=reg,
    )
    return BilevelProblem(
        "hypercleaning", n_train, m, upper, lower, constants,
        extras={"hypercleaning": data},
    )


@dataclass(frozen=True)
class FdReport:
    """Max relative finite-difference error per oracle output."""

    grad_x_f: float
    grad_y_f: float
    grad_y_g: float
    hess_yx_g: float
    hess_yy_g: float

    @property
    def max_error(self) -> float:
        return max(self.grad_x_f, self.grad_y_f, self.grad_y_g,
                   self.hess_yx_g, self.hess_yy_g)


def _rel_err(fd: np.ndarray, exact: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(exact))), 1.0)
    return float(np.max(np.abs(fd - exact))) / scale


def check_derivatives(problem: BilevelProblem, point: SolverState, step: float) -> FdReport:
    """Central finite differences of f and g against the oracle derivatives.

    Gradients are differenced from objective values, Hessian blocks from the
    lower-level gradient.  The report is informational; callers decide what
    error level is acceptable.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x, y = point.x, point.y
    n, m = problem.dim_upper, problem.dim_lower
    _, gx, gy = problem.upper(x, y)
    _, gyg, hyx, hyy = problem.lower(x, y)

    fd_gx = np.empty(n)
    fd_hyx = np.empty((m, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        fp, *_ = problem.upper(x + e, y)
        fm, *_ = problem.upper(x - e, y)
        fd_gx[i] = (fp - fm) / (2 * step)
        _, gp, _, _ = problem.lower(x + e, y)
        _, gm, _, _ = problem.lower(x - e, y)
        fd_hyx[:, i] = (gp - gm) / (2 * step)

    fd_gy = np.empty(m)
    fd_gyg = np.empty(m)
    fd_hyy = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = step
        fp, *_ = problem.upper(x, y + e)
        fm, *_ = problem.upper(x, y - e)
        fd_gy[j] = (fp - fm) / (2 * step)
        gvp, gp, _, _ = problem.lower(x, y + e)
        gvm, gm, _, _ = problem.lower(x, y - e)
        fd_gyg[j] = (gvp - gvm) / (2 * step)
        fd_hyy[:, j] = (gp - gm) / (2 * step)

    return FdReport(
        grad_x_f=_rel_err(fd_gx, gx),
        grad_y_f=_rel_err(fd_gy, gy),
        grad_y_g=_rel_err(fd_gyg, gyg),
        hess_yx_g=_rel_err(fd_hyx, hyx),
        hess_yy_g=_rel_err(fd_hyy, hyy),
    )


def solve_lower(
    problem: BilevelProblem,
    x: np.ndarray,
    tol: float,
    max_iters: int = 100,
    y0: np.ndarray | None = None,
) -> np.ndarray:
    """Newton solve of grad_y g(x, .) = 0, with Armijo backtracking on g.

    Raises NonConvergence if ||grad_y g|| > tol after max_iters iterations and
    SingularHessian if a Newton system is not positive definite.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    x = np.asarray(x, dtype=float)
    y = np.zeros(problem.dim_lower) if y0 is None else np.asarray(y0, dtype=float).copy()
    g, gyg, _, hyy = problem.lower(x, y)
    for _ in range(max_iters):
        if np.linalg.norm(gyg) <= tol:
            return y
        try:
            direction = SpdFactorization(hyy).solve(gyg)
        except NotPositiveDefinite as exc:
            raise SingularHessian(
                f"Newton system singular at ||grad_y g|| = {np.linalg.norm(gyg):.3e}"
            ) from exc
        decrement = float(gyg @ direction)
        tau = 1.0
        while True:
            y_new = y - tau * direction
            g_new, gyg_new, _, hyy_new = problem.lower(x, y_new)
            if g_new <= g - 1e-4 * tau * decrement or tau < 1e-12:
                break
            tau *= 0.5
        y, g, gyg, hyy = y_new, g_new, gyg_new, hyy_new
    if np.linalg.norm(gyg) <= tol:
        return y
    raise NonConvergence(
        f"lower solve stalled at ||grad_y g|| = {np.linalg.norm(gyg):.3e} "
        f"after {max_iters} iterations (tol {tol:.1e})"
    )
