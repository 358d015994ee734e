"""Per-class location/scatter estimators, including FastMCD.

Five strategies are available through :class:`EstimationConfig.method`:

``E1``   identity scatter (plain Euclidean distance)
``E2``   diagonal scatter of per-class variances
``TMD``  one pooled within-class covariance shared by every class
``MD``   per-class maximum-likelihood mean and covariance
``RMD``  per-class minimum covariance determinant (FastMCD)
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numstat import (
    CholeskyFactor,
    chi2_quantile,
    cholesky,
    mahalanobis_sq_batch,
    mean_cov,
)

logger = logging.getLogger(__name__)

METHODS = ("E1", "E2", "TMD", "MD", "RMD")
EXHAUSTIVE_BUDGET = 1_000_000


@dataclass
class EstimationConfig:
    method: str = "MD"
    support_fraction: float | None = None
    restarts: int = 500
    n_best: int = 10
    screening_steps: int = 2
    max_csteps: int = 200
    subsample: int = 600
    seed: int = 0
    ridge: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown estimation method {self.method!r}; expected one of {METHODS}")
        if self.support_fraction is not None and not 0.0 < self.support_fraction <= 1.0:
            raise ValueError("support_fraction must lie in (0, 1]")
        if self.restarts < 1 or self.n_best < 1:
            raise ValueError("restarts and n_best must be positive")

    def support_size(self, n: int, k: int) -> int:
        if self.support_fraction is None:
            return (n + k + 1) // 2
        return int(math.ceil(self.support_fraction * n))


@dataclass(frozen=True, eq=False)
class ClassGaussian:
    label: int
    location: np.ndarray
    scatter: np.ndarray
    chol: CholeskyFactor
    n: int
    fallback: bool = False

    def distances(self, X) -> np.ndarray:
        return mahalanobis_sq_batch(X, self.location, self.chol)


@dataclass(frozen=True, eq=False)
class McdResult:
    location: np.ndarray
    scatter: np.ndarray
    raw_scatter: np.ndarray
    support: np.ndarray
    h: int
    logdet: float
    restarts: int
    consistency: float = 1.0


# --- MCD --------------------------------------------------------------------


def _subset_stats(X: np.ndarray, J: np.ndarray, ridge: bool = True):
    mu, cov = mean_cov(X[J])
    chol = cholesky(cov, ridge=ridge)
    return mu, cov, chol


def _nearest(d2: np.ndarray, h: int) -> np.ndarray:
    # stable ordering by (distance, index)
    order = np.lexsort((np.arange(d2.shape[0]), d2))
    return np.sort(order[:h])


def _cstep(X: np.ndarray, J: np.ndarray, h: int, ridge: bool = True):
    mu, _, chol = _subset_stats(X, J, ridge)
    d2 = mahalanobis_sq_batch(X, mu, chol)
    return _nearest(d2, h), chol.logdet


def c_step(X, J, h: int | None = None, ridge: bool = True) -> np.ndarray:
    """One concentration step: refit on ``J`` and keep the ``h`` closest points."""
    X = np.asarray(X, dtype=float)
    J = np.sort(np.asarray(J, dtype=int))
    if h is None:
        h = J.shape[0]
    return _cstep(X, J, h, ridge)[0]


def _converge(X, J, h, ridge, max_steps):
    """Iterate C-steps until the subset is a fixed point; returns (J, logdet, trace)."""
    _, _, chol = _subset_stats(X, J, ridge)
    logdet = chol.logdet
    trace = [logdet]
    for _ in range(max_steps):
        J_new, _ = _cstep(X, J, h, ridge)
        if np.array_equal(J_new, J):
            break
        new_logdet = _subset_stats(X, J_new, ridge)[2].logdet
        if new_logdet > logdet:
            # rounding-level increase: keep the previous subset
            break
        J, logdet = J_new, new_logdet
        trace.append(logdet)
    return J, logdet, trace


def _initial_subset(X: np.ndarray, h: int, rng: np.random.Generator, ridge: bool):
    n, k = X.shape
    perm = rng.permutation(n)
    size = k + 1
    # grow the elemental start until its covariance is nonsingular
    while True:
        J = np.sort(perm[:size])
        mu, cov = mean_cov(X[J])
        try:
            chol = cholesky(cov, ridge=False)
            break
        except np.linalg.LinAlgError:
            if size >= n:
                chol = cholesky(cov, ridge=ridge)
                break
            size += 1
    d2 = mahalanobis_sq_batch(X, mu, chol)
    return _nearest(d2, h)


def _consistency_factor(X, location, raw_scatter, k, ridge) -> float:
    d2 = mahalanobis_sq_batch(X, location, cholesky(raw_scatter, ridge=ridge))
    return float(np.median(d2)) / chi2_quantile(k, 0.5)


def _finish(X, J, h, logdet, restarts, ridge) -> McdResult:
    k = X.shape[1]
    loc, raw = mean_cov(X[J])
    c = _consistency_factor(X, loc, raw, k, ridge)
    if not c > 0:
        c = 1.0
    return McdResult(
        location=loc,
        scatter=c * raw,
        raw_scatter=raw,
        support=J,
        h=h,
        logdet=logdet,
        restarts=restarts,
        consistency=c,
    )


def fit_mcd(X, config: EstimationConfig | None = None) -> McdResult:
    """FastMCD with random elemental starts.

    Every start is screened with ``config.screening_steps`` C-steps; the
    ``config.n_best`` lowest determinants are iterated to convergence and the
    best fixed point wins. For ``n > config.subsample`` the screening stage
    runs on a random subsample and survivors are carried to the full data.
    """
    config = config or EstimationConfig(method="RMD")
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    h = config.support_size(n, k)
    if h < k + 1:
        raise ValueError(f"subset too small for full-rank covariance (h={h}, k={k})")
    if h > n:
        raise ValueError(f"support size h={h} exceeds n={n}")
    if h == n:
        J = np.arange(n)
        logdet = _subset_stats(X, J, config.ridge)[2].logdet
        return _finish(X, J, h, logdet, 0, config.ridge)

    rng = np.random.default_rng(config.seed)
    if n > config.subsample:
        sub = np.sort(rng.choice(n, size=config.subsample, replace=False))
        hs = max(k + 1, int(math.ceil(h * config.subsample / n)))
    else:
        sub = np.arange(n)
        hs = h
    Xs = X[sub]

    candidates: dict[tuple, float] = {}
    for _ in range(config.restarts):
        J = _initial_subset(Xs, hs, rng, config.ridge)
        for _ in range(config.screening_steps):
            J_next, _ = _cstep(Xs, J, hs, config.ridge)
            if np.array_equal(J_next, J):
                break
            J = J_next
        key = tuple(J.tolist())
        if key not in candidates:
            candidates[key] = _subset_stats(Xs, J, config.ridge)[2].logdet
    best = sorted(candidates.items(), key=lambda kv: (kv[1], kv[0]))[: config.n_best]

    winner: tuple[float, tuple] | None = None
    for key, _ in best:
        J = sub[np.asarray(key, dtype=int)]
        if sub.shape[0] != n:
            # lift the subsample subset to a full-data start
            J, _ = _cstep(X, J, h, config.ridge)
        J, logdet, _ = _converge(X, J, h, config.ridge, config.max_csteps)
        cand = (logdet, tuple(J.tolist()))
        if winner is None or cand < winner:
            winner = cand
    J = np.asarray(winner[1], dtype=int)
    return _finish(X, J, h, winner[0], config.restarts, config.ridge)


def exhaustive_mcd(X, h: int, ridge: bool = True) -> McdResult:
    """Global MCD by enumerating every ``h``-subset (small instances only)."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    if not k + 1 <= h <= n:
        raise ValueError(f"need k+1 <= h <= n, got h={h}, n={n}, k={k}")
    total = math.comb(n, h)
    if total > EXHAUSTIVE_BUDGET:
        raise ValueError(f"combinatorial budget exceeded: C({n},{h}) = {total}")
    best_logdet = math.inf
    best = None
    for J in itertools.combinations(range(n), h):
        _, cov = mean_cov(X[list(J)])
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            logdet = -math.inf
        if logdet < best_logdet:
            best_logdet, best = logdet, J
    J = np.asarray(best, dtype=int)
    return _finish(X, J, h, float(best_logdet), 0, ridge)


# --- per-class fitting ---------------------------------------------------------


@dataclass
class FitWarnings:
    messages: list[str] = field(default_factory=list)

    def add(self, msg: str) -> None:
        logger.warning(msg)
        self.messages.append(msg)


def pooled_within_class(X: np.ndarray, labels: np.ndarray, classes) -> np.ndarray:
    k = X.shape[1]
    S = np.zeros((k, k))
    for c in classes:
        Xc = X[labels == c]
        D = Xc - Xc.mean(axis=0)
        S += D.T @ D
    S /= X.shape[0]
    return 0.5 * (S + S.T)


def fit_per_class(
    X,
    labels,
    config: EstimationConfig | None = None,
    warnings: FitWarnings | None = None,
) -> dict[int, ClassGaussian]:
    """Fit one Gaussian per action class under ``config.method``.

    Under MD and RMD a class with fewer than ``k + 2`` samples gets its own
    mean and the pooled within-class covariance instead of aborting.
    """
    config = config or EstimationConfig()
    warnings = warnings if warnings is not None else FitWarnings()
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels).astype(int)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree in length")
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise ValueError("empty class set")
    k = X.shape[1]
    method = config.method

    pooled = None
    pooled_chol = None

    def shared():
        nonlocal pooled, pooled_chol
        if pooled is None:
            pooled = pooled_within_class(X, labels, classes)
            pooled_chol = cholesky(pooled, ridge=config.ridge)
            if pooled_chol.ridged:
                warnings.add(f"pooled covariance ridged by {pooled_chol.ridge:.3g}")
        return pooled, pooled_chol

    out: dict[int, ClassGaussian] = {}
    for c in classes:
        Xc = X[labels == c]
        n_c = Xc.shape[0]
        mu, cov = mean_cov(Xc)
        fallback = False
        if method == "E1":
            scatter = np.eye(k)
            chol = cholesky(scatter)
        elif method == "E2":
            scatter = np.diag(np.diag(cov))
            chol = cholesky(scatter, ridge=config.ridge)
        elif method == "TMD":
            scatter, chol = shared()
        elif n_c < k + 2:
            warnings.add(
                f"class {c}: {n_c} samples < k+2={k + 2}; using pooled covariance"
            )
            scatter, chol = shared()
            fallback = True
        elif method == "MD":
            scatter = cov
            chol = cholesky(scatter, ridge=config.ridge)
        else:
            sub_cfg = EstimationConfig(
                method="RMD",
                support_fraction=config.support_fraction,
                restarts=config.restarts,
                n_best=config.n_best,
                screening_steps=config.screening_steps,
                max_csteps=config.max_csteps,
                subsample=config.subsample,
                seed=config.seed + 7919 * c,
                ridge=config.ridge,
            )
            res = fit_mcd(Xc, sub_cfg)
            mu, scatter = res.location, res.scatter
            chol = cholesky(scatter, ridge=config.ridge)
        if chol.ridged and scatter is not pooled:
            warnings.add(f"class {c}: scatter ridged by {chol.ridge:.3g}")
        out[c] = ClassGaussian(
            label=c, location=mu, scatter=scatter, chol=chol, n=n_c, fallback=fallback
        )
    return out
