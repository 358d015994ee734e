"""Class-conditional Gaussian features with planted outliers.

A stand-in for policy features when the ground-truth distribution must be
known: every class has its own mean and an anisotropic covariance
``D Q_c diag(lam) Q_c^T D`` (shared spectrum, class-specific rotation, a
common per-coordinate scale ``D``), so per-class, tied, diagonal and
identity scatter models genuinely differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OUTLIER_KINDS = ("far", "noise")


@dataclass(frozen=True, eq=False)
class GaussianClasses:
    means: np.ndarray  # (C, p)
    covariances: np.ndarray  # (C, p, p)
    far_direction: np.ndarray  # (p,) unit vector
    far_offset: float

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` inliers with balanced class labels."""
        labels = np.arange(n) % self.n_classes
        rng.shuffle(labels)
        X = np.empty((n, self.dim))
        for c in range(self.n_classes):
            idx = np.flatnonzero(labels == c)
            X[idx] = rng.multivariate_normal(self.means[c], self.covariances[c], size=idx.size)
        return X, labels

    def outliers(self, kind: str, n: int, rng: np.random.Generator, strength: float = 1.0):
        """Outliers carrying the label of the class they were planted next to.

        ``far``: a tight cluster displaced from each class mean along one fixed
        direction by ``far_offset * strength``. ``noise``: inliers plus
        isotropic Gaussian noise of std ``strength``.
        """
        if kind not in OUTLIER_KINDS:
            raise ValueError(f"unknown synthetic outlier kind {kind!r}; expected one of {OUTLIER_KINDS}")
        X, labels = self.sample(n, rng)
        if kind == "noise":
            return X + strength * rng.standard_normal(X.shape), labels
        centre = self.means[labels] + self.far_offset * strength * self.far_direction
        return centre + 0.1 * rng.standard_normal(X.shape), labels


def make_gaussian_classes(
    n_classes: int = 4,
    dim: int = 8,
    seed: int = 0,
    spread: float = 6.0,
    condition: float = 100.0,
    far_offset: float = 12.0,
) -> GaussianClasses:
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((n_classes, dim))
    # eigenvalues spaced geometrically from 1 down to 1/condition
    lam = np.geomspace(1.0, 1.0 / condition, dim)
    scale = np.geomspace(2.0, 0.5, dim)
    covs = np.empty((n_classes, dim, dim))
    for c in range(n_classes):
        Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
        Q = Q * np.sign(np.diag(R))
        S = (Q * lam) @ Q.T
        covs[c] = scale[:, None] * S * scale[None, :]
    u = rng.standard_normal(dim)
    return GaussianClasses(means, covs, u / np.linalg.norm(u), far_offset)
