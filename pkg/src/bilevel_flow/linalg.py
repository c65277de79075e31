"""Dense SPD kernels used by the velocity filters.

Everything here is deliberately small and dense: the filters need exact
solves of m x m systems at desk scale, and a failed Cholesky factorization
is a diagnostic signal (strong convexity lost) rather than an event to
paper over with a pivoted fallback.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve

from .errors import NotPositiveDefinite

__all__ = [
    "SpdFactorization",
    "solve_spd",
    "solve_gram_dual",
    "random_conditioned",
    "conditioned_from_rng",
]


class SpdFactorization:
    """Cholesky factor L of an SPD matrix A = L L^T, reusable across solves."""

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise NotPositiveDefinite("matrix contains non-finite entries")
        try:
            self._chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(
                f"Cholesky failed on a {a.shape[0]}x{a.shape[0]} matrix"
            ) from exc

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular Cholesky factor."""
        return self._chol

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self._chol.shape[0] == 1:
            # scalar fast path; the 1-D fixtures sit in hot integrator loops
            return b / (self._chol[0, 0] ** 2)
        return cho_solve((self._chol, True), b, check_finite=False)


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A v = b for symmetric positive definite A."""
    return SpdFactorization(a).solve(b)


def solve_gram_dual(hyx: np.ndarray, hyy: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Dual multiplier of the equality filter: (Hyx Hyx^T + Hyy^2) lam = -rhs.

    Hyy must be symmetric; the Gram matrix is SPD whenever Hyy is positive
    definite, which the lower-level strong convexity guarantees.
    """
    hyx = np.asarray(hyx, dtype=float)
    hyy = np.asarray(hyy, dtype=float)
    gram = hyx @ hyx.T + hyy @ hyy
    return SpdFactorization(gram).solve(-np.asarray(rhs, dtype=float))


def conditioned_from_rng(rng: np.random.Generator, m: int, cond_max: float) -> np.ndarray:
    """Draw an m x m matrix with condition number at most cond_max.

    Built as U diag(s) V^T with U, V orthogonal (QR of Gaussians) and
    singular values log-uniform in [1, cond_max].
    """
    if cond_max < 1:
        raise ValueError(f"cond_max must be >= 1, got {cond_max}")
    u, _ = np.linalg.qr(rng.standard_normal((m, m)))
    v, _ = np.linalg.qr(rng.standard_normal((m, m)))
    s = np.exp(rng.uniform(0.0, np.log(cond_max), size=m))
    return (u * s) @ v.T


def random_conditioned(seed: int, m: int, cond_max: float) -> np.ndarray:
    """Seeded wrapper around :func:`conditioned_from_rng`; deterministic per seed."""
    return conditioned_from_rng(np.random.default_rng(seed), m, cond_max)
