"""Core numerics: moments, Cholesky factors, Mahalanobis forms, chi-square, PCA.

Covariances use the 1/n divisor throughout. Tools such as ``numpy.cov`` default
to 1/(n-1); multiply by (n-1)/n when comparing against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy.linalg import solve_triangular

RIDGE_SCALE = 1e-6
# Pivots smaller than this (relative to the largest diagonal entry of the
# matrix) are treated as a failed factorization.
_PIVOT_FLOOR = 1e-12

_GAMMA_EPS = 1e-16
_GAMMA_MAXITER = 10_000


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D data matrix, got shape {X.shape}")
    return X


def mean_cov(X) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance (divisor n) of the rows of ``X``."""
    X = _as_matrix(X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite entries in sample")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / n
    cov = 0.5 * (cov + cov.T)
    return mean, cov


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T`` equal to the (possibly ridged) matrix."""

    L: np.ndarray
    logdet: float
    ridge: float = 0.0

    @property
    def ridged(self) -> bool:
        return self.ridge > 0.0

    @property
    def dim(self) -> int:
        return self.L.shape[0]


def _try_cholesky(S: np.ndarray) -> np.ndarray | None:
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(L)
    scale = float(np.max(np.abs(np.diag(S)))) if S.size else 0.0
    if not np.all(np.isfinite(L)) or np.min(d) ** 2 <= _PIVOT_FLOOR * scale:
        return None
    return L


def ridge_amount(S: np.ndarray) -> float:
    p = S.shape[0]
    delta = RIDGE_SCALE * float(np.trace(S)) / p
    if not (delta > 0.0 and math.isfinite(delta)):
        # all-zero scatter: fall back to an absolute ridge
        delta = RIDGE_SCALE
    return delta


def cholesky(S, ridge: bool = True) -> CholeskyFactor:
    """Factor a symmetric matrix, retrying once with a small ridge.

    The ridge is ``1e-6 * trace(S) / p`` added to the diagonal. When ``ridge``
    is False a failed factorization raises immediately.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NotPositiveDefiniteError("not positive definite: non-finite entries")
    L = _try_cholesky(S)
    delta = 0.0
    if L is None and ridge:
        delta = ridge_amount(S)
        L = _try_cholesky(S + delta * np.eye(S.shape[0]))
    if L is None:
        raise NotPositiveDefiniteError("not positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return CholeskyFactor(L=L, logdet=logdet, ridge=delta)


def mahalanobis_sq(x, mu, chol: CholeskyFactor) -> float:
    """(x - mu)^T S^{-1} (x - mu) via a single triangular solve."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.shape != mu.shape or x.ndim != 1 or x.shape[0] != chol.dim:
        raise ValueError(
            f"dimension mismatch: x {x.shape}, mu {mu.shape}, factor {chol.dim}"
        )
    y = solve_triangular(chol.L, x - mu, lower=True, check_finite=False)
    return float(y @ y)


def mahalanobis_sq_batch(X, mu, chol: CholeskyFactor) -> np.ndarray:
    """Row-wise squared Mahalanobis distances of ``X`` (n x k)."""
    X = _as_matrix(X)
    mu = np.asarray(mu, dtype=float)
    if X.shape[1] != chol.dim or mu.shape != (chol.dim,):
        raise ValueError(
            f"dimension mismatch: X {X.shape}, mu {mu.shape}, factor {chol.dim}"
        )
    Y = solve_triangular(chol.L, (X - mu).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Y, Y)


# --- chi-square -----------------------------------------------------------


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) by the power series, good for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAXITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_contfrac(a: float, x: float) -> float:
    # Q(a, x) by the Legendre continued fraction (modified Lentz)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_contfrac(a, x))


def _check_df(df) -> int:
    if isinstance(df, bool) or int(df) != df or df < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {df!r}")
    return int(df)


def chi2_cdf(df: int, x: float) -> float:
    df = _check_df(df)
    x = float(x)
    if not x >= 0:
        raise ValueError(f"chi-square argument must be non-negative, got {x}")
    return regularized_gamma_p(0.5 * df, 0.5 * x)


def _chi2_logpdf(df: int, x: float) -> float:
    k = 0.5 * df
    return (k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k)


def chi2_quantile(df: int, prob: float) -> float:
    """Inverse chi-square CDF.

    Starts from the Wilson-Hilferty approximation and refines with Newton
    steps on the regularized incomplete gamma, falling back to bisection
    whenever a step leaves the current bracket.
    """
    df = _check_df(df)
    prob = float(prob)
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")

    z = NormalDist().inv_cdf(prob)
    v = 2.0 / (9.0 * df)
    x = df * (1.0 - v + z * math.sqrt(v)) ** 3
    if not x > 0:
        # small-x expansion P(a, y) ~ y^a / Gamma(a + 1)
        a = 0.5 * df
        x = 2.0 * math.exp((math.log(prob) + math.lgamma(a + 1.0)) / a)
        x = max(x, 1e-300)

    lo, hi = 0.0, math.inf
    for _ in range(200):
        f = chi2_cdf(df, x) - prob
        if f == 0.0:
            return x
        if f < 0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        step = f / math.exp(_chi2_logpdf(df, x))
        x_new = x - step
        if not (lo < x_new < hi) or not math.isfinite(x_new):
            x_new = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * max(x, 1.0)
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


def cube_root_transform(d2: float) -> float:
    """Cube root of a squared distance; approximately normal for chi-square input."""
    d2 = float(d2)
    if d2 < 0:
        raise ValueError(f"squared distance must be non-negative, got {d2}")
    return d2 ** (1.0 / 3.0)


# --- PCA ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (k, p), orthonormal rows
    explained_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # first entry that is not numerically zero gets a positive sign
    V = V.copy()
    for i, row in enumerate(V):
        tol = 1e-12 * np.max(np.abs(row))
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size and row[nz[0]] < 0:
            V[i] = -row
    return V


def fit_pca(X, k: int) -> PCAModel:
    """Top-``k`` principal components from the eigendecomposition of cov(X)."""
    X = _as_matrix(X)
    n, p = X.shape
    if k < 1 or k > min(n - 1, p):
        raise ValueError(f"k={k} outside [1, min(n-1, p)] = [1, {min(n - 1, p)}]")
    mean, cov = mean_cov(X)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    components = _fix_signs(evecs[:, order].T)
    explained = np.maximum(evals[order], 0.0)
    return PCAModel(mean=mean, components=components, explained_variance=explained)


def pca_project(model: PCAModel, x) -> np.ndarray:
    """Project a vector (or the rows of a matrix) onto the principal axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise ValueError(
            f"dimension mismatch: expected {model.input_dim} features, got {x.shape[-1]}"
        )
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PCAModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y @ model.components + model.mean
