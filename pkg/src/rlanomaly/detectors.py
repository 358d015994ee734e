"""Chi-square thresholded (robust) Mahalanobis detectors over per-class Gaussians."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .estimators import ClassGaussian, EstimationConfig, FitWarnings, fit_per_class
from .numstat import PCAModel, chi2_quantile, cholesky, fit_pca, pca_project

INLIER = -1
OUTLIER = 1


@dataclass(frozen=True, eq=False)
class DetectorModel:
    method: str
    pca: PCAModel | None
    classes: dict[int, ClassGaussian]
    k: int
    alpha: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.classes:
            raise ValueError("detector needs at least one class")
        if self.pca is not None and self.pca.output_dim != self.k:
            raise ValueError("degrees of freedom must equal the projected dimension")
        for g in self.classes.values():
            if g.location.shape != (self.k,):
                raise ValueError("class location does not match detector dimension")

    @property
    def input_dim(self) -> int:
        return self.pca.input_dim if self.pca is not None else self.k

    @cached_property
    def threshold(self) -> float:
        return chi2_quantile(self.k, 1.0 - self.alpha)

    @cached_property
    def class_ids(self) -> np.ndarray:
        return np.array(sorted(self.classes), dtype=int)

    def with_alpha(self, alpha: float) -> DetectorModel:
        return DetectorModel(self.method, self.pca, self.classes, self.k, alpha, dict(self.metadata))

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise ValueError(
                f"dimension mismatch: detector expects {self.input_dim} features, got {X.shape[-1]}"
            )
        return pca_project(self.pca, X) if self.pca is not None else X


@dataclass(frozen=True)
class DetectionLabel:
    value: int
    distance: float
    cls: int

    @property
    def is_outlier(self) -> bool:
        return self.value == OUTLIER


@dataclass
class DetectionReport:
    labels: np.ndarray
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def report_from_labels(predicted, truth) -> DetectionReport:
    """Confusion counts with outliers as the positive class."""
    pred = np.asarray(predicted) == OUTLIER
    true = _as_outlier_mask(truth)
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    return DetectionReport(
        labels=np.where(pred, OUTLIER, INLIER),
        tp=int(np.sum(pred & true)),
        fp=int(np.sum(pred & ~true)),
        tn=int(np.sum(~pred & ~true)),
        fn=int(np.sum(~pred & true)),
    )


def _as_outlier_mask(truth) -> np.ndarray:
    truth = np.asarray(truth)
    if truth.dtype == bool:
        return truth
    return truth == OUTLIER


def fit_detector(
    X,
    labels,
    method: str = "MD",
    k: int | None = 50,
    alpha: float = 0.05,
    config: EstimationConfig | None = None,
    pca: PCAModel | None = None,
) -> DetectorModel:
    """Fit PCA on the pooled features, then one Gaussian per class.

    ``k=None`` skips the projection entirely. A pre-fitted ``pca`` is reused
    as-is (the online trainer refits PCA on its own schedule).
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels).astype(int)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if pca is None and k is not None:
        pca = fit_pca(X, k)
    Z = pca_project(pca, X) if pca is not None else X
    cfg = config or EstimationConfig(method=method)
    if cfg.method != method:
        cfg = EstimationConfig(**{**cfg.__dict__, "method": method})
    warnings = FitWarnings()
    classes = fit_per_class(Z, labels, cfg, warnings)
    meta = {
        "seed": cfg.seed,
        "ridge_warnings": list(warnings.messages),
        "n": int(X.shape[0]),
    }
    return DetectorModel(method, pca, classes, Z.shape[1], alpha, meta)


def detection_distances(model: DetectorModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Minimum per-class squared distance and the arg-min class for each row."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    Z = model.project(np.atleast_2d(X))
    ids = model.class_ids
    D = np.empty((Z.shape[0], ids.shape[0]))
    for j, c in enumerate(ids):
        D[:, j] = model.classes[int(c)].distances(Z)
    # argmin keeps the first minimum, i.e. the smallest class id
    j = np.argmin(D, axis=1)
    M = D[np.arange(D.shape[0]), j]
    cls = ids[j]
    if single:
        return M[:1], cls[:1]
    return M, cls


def detection_distance(model: DetectorModel, x) -> tuple[float, int]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a single feature vector")
    M, cls = detection_distances(model, x)
    return float(M[0]), int(cls[0])


def decide(M, threshold: float) -> np.ndarray:
    # strict inequality: a distance equal to the threshold is an inlier
    return np.where(np.asarray(M) > threshold, OUTLIER, INLIER)


def classify_batch(model: DetectorModel, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    M, cls = detection_distances(model, X)
    return decide(M, model.threshold), M, cls


def classify(model: DetectorModel, x) -> DetectionLabel:
    M, c = detection_distance(model, x)
    return DetectionLabel(value=int(decide(M, model.threshold)), distance=M, cls=c)


def evaluate_detector(model: DetectorModel, X, truth) -> DetectionReport:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        raise ValueError("empty evaluation set")
    pred, _, _ = classify_batch(model, X)
    return report_from_labels(pred, truth)


def from_parameters(
    means: dict[int, np.ndarray],
    covariances: dict[int, np.ndarray],
    alpha: float = 0.05,
    method: str = "MD",
) -> DetectorModel:
    """Detector with known Gaussian parameters and no projection."""
    classes = {}
    for c in sorted(means):
        mu = np.asarray(means[c], dtype=float)
        S = np.asarray(covariances[c], dtype=float)
        classes[c] = ClassGaussian(c, mu, S, cholesky(S), n=0)
    k = next(iter(classes.values())).location.shape[0]
    return DetectorModel(method, None, classes, k, alpha, {"seed": None, "ridge_warnings": []})
