"""Squared-exponential covariances and positive-definite factorizations.

Every covariance in the sampler goes through :func:`chol_factor`, which adds
the smallest diagonal jitter (from a geometric ladder) that lets the Cholesky
factorization succeed. The jitter actually used is kept on the returned
:class:`PDMatrix` so that diagnostics can report it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
JITTER_MAX_RETRIES = 6


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a matrix cannot be factored even after jitter escalation."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class KernelParams:
    length_scale: float
    amplitude: float

    def __post_init__(self):
        if not (np.isfinite(self.length_scale) and self.length_scale > 0):
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if not (np.isfinite(self.amplitude) and self.amplitude > 0):
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")


class PDMatrix:
    """A symmetric positive-definite matrix together with its lower Cholesky factor.

    ``factor @ factor.T == matrix + jitter * I`` up to rounding. A PDMatrix
    may carry a scalar ``scale`` so that ``s**2 * M`` is represented without
    copying ``M`` or its factor.
    """

    __slots__ = ("_matrix", "_factor", "_jitter", "scale", "_unit_logdet")

    def __init__(self, matrix, factor, jitter=0.0, scale=1.0, _unit_logdet=None):
        self._matrix = matrix
        self._factor = factor
        self._jitter = float(jitter)
        self.scale = float(scale)
        self._unit_logdet = _unit_logdet

    @property
    def n(self) -> int:
        return self._factor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix if self.scale == 1.0 else self._matrix * self.scale**2

    @property
    def factor(self) -> np.ndarray:
        return self._factor if self.scale == 1.0 else self._factor * self.scale

    @property
    def jitter(self) -> float:
        return self._jitter * self.scale**2

    @property
    def unit_factor(self) -> np.ndarray:
        """Triangular factor before scaling; ``factor == scale * unit_factor``."""
        return self._factor

    def scaled(self, s: float) -> "PDMatrix":
        """Return the factorization of ``s**2 * matrix`` without refactoring."""
        return PDMatrix(self._matrix, self._factor, self._jitter, self.scale * s, self.unit_logdet)

    @property
    def unit_logdet(self) -> float:
        """``log det`` of the unscaled matrix, computed once."""
        if self._unit_logdet is None:
            self._unit_logdet = 2.0 * float(np.sum(np.log(self._factor.diagonal())))
        return self._unit_logdet

    def dense(self) -> np.ndarray:
        """The matrix that was actually factored (input plus jitter)."""
        F = self.factor
        return F @ F.T

    def apply(self, z) -> np.ndarray:
        """``factor @ z``."""
        return self.scale * (self._factor @ z)


class SqrtCovariance:
    """Covariance of the form ``L (U U')^{-1} L'`` with ``L`` and ``U`` lower triangular.

    This is how Gaussian conditionals with precision ``K^{-1} + D`` are
    represented: with ``K = L L'`` the covariance is
    ``L (I + L' D L)^{-1} L'`` and the inner matrix has all eigenvalues at
    least one, so it factors without jitter. ``L U^{-T}`` is a square root
    of the covariance.
    """

    def __init__(self, outer: PDMatrix, inner: PDMatrix):
        self.outer = outer
        self.inner = inner

    @property
    def n(self) -> int:
        return self.outer.n

    @property
    def jitter(self) -> float:
        return self.inner.jitter

    def apply(self, z) -> np.ndarray:
        w = solve_triangular(self.inner.factor, z, lower=True, trans="T", check_finite=False)
        return self.outer.apply(w)

    @property
    def factor(self) -> np.ndarray:
        """Dense square root ``L U^{-T}`` (not triangular)."""
        return self.apply(np.eye(self.n))

    @property
    def matrix(self) -> np.ndarray:
        S = self.factor
        return S @ S.T

    def dense(self) -> np.ndarray:
        return self.matrix


def _check_covariates(X, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D covariate matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite covariate values")
    return X


def sq_dist(X, Xstar=None) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of ``X`` and ``Xstar``."""
    X = _check_covariates(X, "X")
    Xstar = X if Xstar is None else _check_covariates(Xstar, "X*")
    if X.shape[1] != Xstar.shape[1]:
        raise ValueError(
            f"covariate dimension mismatch: X has {X.shape[1]} columns, X* has {Xstar.shape[1]}"
        )
    diff = X[:, None, :] - Xstar[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def se_from_sqdist(d2: np.ndarray, length_scale: float, amplitude: float) -> np.ndarray:
    return amplitude**2 * np.exp(-0.5 * d2 / length_scale**2)


def se_kernel(X, Xstar, params: KernelParams) -> np.ndarray:
    """Squared-exponential covariance matrix between two sets of covariate rows.

    Entry ``(i, j)`` is ``eta**2 * exp(-0.5 * sum_p ((X[i, p] - X*[j, p]) / l)**2)``
    with a single length scale shared by all covariates.

    Parameters
    ----------
    X : (n, P) array
    Xstar : (m, P) array
    params : KernelParams

    Returns
    -------
    (n, m) array
    """
    return se_from_sqdist(sq_dist(X, Xstar), params.length_scale, params.amplitude)


def chol_factor(M, max_retries: int = JITTER_MAX_RETRIES) -> PDMatrix:
    """Cholesky-factor a symmetric matrix, escalating diagonal jitter on failure.

    The first attempt uses no jitter. Retries add ``1e-10 * mean(diag(M))``,
    growing tenfold each time, for at most ``max_retries`` retries.

    Raises
    ------
    NotPositiveDefiniteError
        If every attempt fails; ``.jitter`` holds the last jitter tried.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NotPositiveDefiniteError("matrix has non-finite entries", 0.0)
    scale = abs(float(np.mean(np.diag(M)))) if M.size else 1.0
    if scale == 0.0:
        scale = 1.0
    jitter = 0.0
    for attempt in range(max_retries + 1):
        if attempt > 0:
            jitter = JITTER_START * scale * JITTER_GROWTH ** (attempt - 1)
        A = M if jitter == 0.0 else M + jitter * np.eye(M.shape[0])
        try:
            L = cholesky(A, lower=True, check_finite=False)
        except LinAlgError:
            continue
        return PDMatrix(M, L, jitter)
    raise NotPositiveDefiniteError(
        f"matrix is not positive definite (jitter up to {jitter:.3g} did not help)", jitter
    )


def pd_solve(F: PDMatrix, B) -> np.ndarray:
    """Solve ``(M + jitter I) X = B`` with two triangular solves."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != F.n:
        raise ValueError(f"dimension mismatch: factor is {F.n}x{F.n}, right-hand side has {B.shape[0]} rows")
    L = F.unit_factor
    tmp = solve_triangular(L, B, lower=True, check_finite=False)
    return solve_triangular(L, tmp, lower=True, trans="T", check_finite=False) / F.scale**2


def pd_half_solve(F: PDMatrix, B) -> np.ndarray:
    """Return ``L^{-1} B``; its squared norm is the quadratic form ``B' M^{-1} B``."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != F.n:
        raise ValueError(f"dimension mismatch: factor is {F.n}x{F.n}, right-hand side has {B.shape[0]} rows")
    return solve_triangular(F.unit_factor, B, lower=True, check_finite=False) / F.scale


def pd_logdet(F: PDMatrix) -> float:
    return F.unit_logdet + 2.0 * F.n * math.log(F.scale)
