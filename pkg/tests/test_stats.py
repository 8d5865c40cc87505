"""Class statistics, Mahalanobis distances, and the shift report."""

import numpy as np
import pytest

from conda_adapt.stats import (CONCEPT_LEVEL_LIKE, LOW_LEVEL_LIKE, SHRINKAGE_EPS,
                               ClassStats, diagnose_shift, fit_class_stats,
                               intra_inter, mahalanobis, mahalanobis_all)


def small_fit(seed=0, n=60, m=4, ell=3):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((n, m))
    labels = rng.integers(0, ell, n)
    labels[:ell] = np.arange(ell)  # every class present
    return fit_class_stats(scores, labels, ell), scores, labels


def test_fit_matches_hand_statistics():
    scores = np.array([[1.0, 0.0], [3.0, 2.0], [0.0, 4.0], [2.0, 2.0]])
    labels = np.array([0, 0, 1, 1])
    stats = fit_class_stats(scores, labels, 2)
    np.testing.assert_allclose(stats.means, [[2.0, 1.0], [1.0, 3.0]], atol=1e-15)
    # biased covariance of class 0 plus ridge eps * (trace/m)
    raw = np.array([[1.0, 1.0], [1.0, 1.0]])
    shrunk = raw + SHRINKAGE_EPS * 1.0 * np.eye(2)
    np.testing.assert_allclose(stats.covariances[0], shrunk, atol=1e-12)
    np.testing.assert_array_equal(stats.counts, [2, 2])


def test_inverses_match_explicit_inverse():
    stats, _, _ = small_fit()
    for c in range(stats.num_classes):
        explicit = np.linalg.inv(stats.covariances[c])
        np.testing.assert_allclose(stats.inverses[c], explicit, atol=1e-9)


def test_mahalanobis_matches_explicit_form():
    stats, scores, _ = small_fit(seed=1)
    v = scores[0]
    for c in range(stats.num_classes):
        diff = v - stats.means[c]
        explicit = diff @ np.linalg.inv(stats.covariances[c]) @ diff
        assert abs(mahalanobis(v, c, stats) - explicit) < 1e-9


def test_mahalanobis_all_matches_single():
    stats, scores, _ = small_fit(seed=2)
    all_d = mahalanobis_all(scores[:5], stats)
    assert all_d.shape == (stats.num_classes, 5)
    for c in range(stats.num_classes):
        for i in range(5):
            assert abs(all_d[c, i] - mahalanobis(scores[i], c, stats)) < 1e-10


def test_intra_inter_hand_case():
    eye = np.stack([np.eye(2)] * 2)
    stats = ClassStats(means=np.array([[0.0, 0.0], [2.0, 0.0]]),
                       covariances=eye, inverses=eye, counts=np.array([1, 1]))
    intra, inter = intra_inter(np.array([1.0, 0.0]), 0, stats)
    assert abs(intra - 1.0) < 1e-12
    assert abs(inter - 1.0) < 1e-12


def test_affine_invariance_analytic():
    # exact property of the quadratic form: transform stats analytically
    rng = np.random.default_rng(3)
    m = 4
    base = rng.standard_normal((m, m))
    sigma = base @ base.T + m * np.eye(m)
    mu = rng.standard_normal(m)
    stats = ClassStats(means=mu[None], covariances=sigma[None],
                       inverses=np.linalg.inv(sigma)[None], counts=np.array([5]))
    v = rng.standard_normal(m)
    ref = mahalanobis(v, 0, stats)
    for _ in range(50):
        a = rng.standard_normal((m, m)) + 2.0 * np.eye(m)
        sig_t = a @ sigma @ a.T
        moved = ClassStats(means=(a @ mu)[None], covariances=sig_t[None],
                           inverses=np.linalg.inv(sig_t)[None], counts=np.array([5]))
        assert abs(mahalanobis(a @ v, 0, moved) - ref) < 1e-8 * max(1.0, ref)


def test_affine_invariance_through_fit():
    # fitted pipeline: shrinkage breaks exactness, so compare loosely
    rng = np.random.default_rng(4)
    scores = rng.standard_normal((200, 3))
    labels = rng.integers(0, 2, 200)
    labels[:2] = [0, 1]
    stats = fit_class_stats(scores, labels, 2)
    d_ref = mahalanobis_all(scores, stats)
    a = rng.standard_normal((3, 3)) + 2.0 * np.eye(3)
    stats_t = fit_class_stats(scores @ a.T, labels, 2)
    d_t = mahalanobis_all(scores @ a.T, stats_t)
    np.testing.assert_allclose(d_t, d_ref, rtol=2e-2)


def test_single_sample_class_gets_pure_ridge():
    scores = np.array([[1.0, 2.0], [0.0, 0.0], [0.5, 0.5]])
    labels = np.array([0, 1, 1])
    stats = fit_class_stats(scores, labels, 2)
    # zero covariance trace falls back to unit scale: ridge eps * I
    np.testing.assert_allclose(stats.covariances[0], SHRINKAGE_EPS * np.eye(2),
                               atol=1e-15)
    np.testing.assert_allclose(stats.inverses[0], np.eye(2) / SHRINKAGE_EPS,
                               rtol=1e-9)


def test_fit_validation():
    with pytest.raises(ValueError):
        fit_class_stats(np.zeros((3, 2)), np.array([0, 0, 0]), 2)  # class 1 empty
    with pytest.raises(ValueError):
        fit_class_stats(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        fit_class_stats(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        fit_class_stats(np.zeros((2, 2)), np.array([0, -1]))


def test_diagnose_shift_verdicts():
    stats, scores, labels = small_fit(seed=5)
    same = diagnose_shift(stats, scores, labels)
    assert same.verdict == LOW_LEVEL_LIKE
    assert same.aggregate_mean_shift < same.threshold
    moved = diagnose_shift(stats, scores + 10.0, labels)
    assert moved.verdict == CONCEPT_LEVEL_LIKE
    assert moved.concept_mean_shift.shape == (stats.m,)


def test_diagnose_shift_excludes_empty_classes():
    stats, scores, labels = small_fit(seed=6)
    keep = labels != 2
    report = diagnose_shift(stats, scores[keep], labels[keep])
    assert report.excluded_classes == [2]
    assert np.isnan(report.class_mean_shift[2])
    as_dict = report.to_dict()
    assert as_dict["class_mean_shift"][2] is None
    with pytest.raises(ValueError):
        diagnose_shift(stats, scores[:0], labels[:0])
