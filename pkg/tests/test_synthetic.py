from __future__ import annotations

import numpy as np
import pytest

from rlanomaly.synthetic import make_gaussian_classes


def test_shapes_and_balance():
    g = make_gaussian_classes(n_classes=3, dim=5, seed=1)
    X, y = g.sample(300, np.random.default_rng(0))
    assert X.shape == (300, 5) and np.bincount(y).tolist() == [100, 100, 100]
    for S in g.covariances:
        assert np.allclose(S, S.T) and np.all(np.linalg.eigvalsh(S) > 0)


def test_covariances_are_anisotropic_and_distinct():
    g = make_gaussian_classes(seed=0)
    ev = np.linalg.eigvalsh(g.covariances[0])
    assert ev[-1] / ev[0] > 50
    assert not np.allclose(g.covariances[0], g.covariances[1])


def test_sample_moments():
    g = make_gaussian_classes(n_classes=2, dim=3, seed=2)
    X, y = g.sample(40_000, np.random.default_rng(1))
    for c in range(2):
        assert np.allclose(X[y == c].mean(axis=0), g.means[c], atol=0.05)
        assert np.allclose(np.cov(X[y == c].T), g.covariances[c], atol=0.1)


def test_outlier_kinds():
    g = make_gaussian_classes(seed=3)
    rng = np.random.default_rng(0)
    far, lab = g.outliers("far", 50, rng)
    shift = far - g.means[lab]
    assert np.allclose(shift.mean(axis=0), g.far_offset * g.far_direction, atol=0.05)
    noisy, _ = g.outliers("noise", 50, rng, strength=0.5)
    assert noisy.shape == (50, g.dim)
    with pytest.raises(ValueError):
        g.outliers("nope", 5, rng)


def test_seeded_construction_is_deterministic():
    a, b = make_gaussian_classes(seed=9), make_gaussian_classes(seed=9)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.covariances, b.covariances)
