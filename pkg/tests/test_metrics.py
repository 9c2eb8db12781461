import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairtl.data import AttributeSpec, build_dataset_pair, gaussian_mixture_2d, generate_base
from fairtl.metrics import (
    AttrClassifier,
    ClassifierKind,
    Evaluator,
    GaussStats,
    MetricError,
    MetricsReport,
    balanced_reference_stats,
    bayes_oracle,
    compute_fd,
    fairness_discrepancy,
    fd_upper_bound,
    fit_gauss_stats,
    frechet_sq,
    train_attr_classifier,
)
from fairtl.numerics import Rng

BINARY = AttributeSpec.single()


def one_hots(labels, k):
    return np.eye(k)[np.asarray(labels)]


def stats(mean, cov):
    return GaussStats(np.asarray(mean, dtype=float), np.asarray(cov, dtype=float), 100)


def test_fd_alternating_labels_is_zero():
    assert fairness_discrepancy(one_hots([0, 1] * 50, 2)) == 0.0


def test_fd_constant_label():
    assert fairness_discrepancy(one_hots([0] * 10, 2)) == pytest.approx(math.sqrt(0.5), abs=1e-12)
    assert fairness_discrepancy(one_hots([0] * 10, 2)) == pytest.approx(0.7071068, abs=1e-7)


def test_fd_four_class_frequencies():
    counts = [437, 63, 415, 85]
    labels = np.repeat(np.arange(4), counts)
    assert fairness_discrepancy(one_hots(labels, 4)) == pytest.approx(0.35269, abs=5e-6)


def test_fd_bound():
    assert fd_upper_bound(2) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(MetricError):
        MetricsReport(0.8, 0.0, 10, 0, "", k=2)


def test_gauss_stats_closed_forms():
    s = fit_gauss_stats(np.array([[0.0], [2.0]]))
    assert s.mean[0] == 1.0 and s.cov[0, 0] == 2.0
    const = fit_gauss_stats(np.ones((10, 3)))
    assert not const.cov.any()
    with pytest.raises(MetricError):
        fit_gauss_stats(np.ones((1, 2)))


def test_gauss_stats_large_draw():
    x = Rng(0).normal((100_000, 2)) * np.array([1.0, 2.0]) + np.array([3.0, -1.0])
    s = fit_gauss_stats(x)
    np.testing.assert_allclose(s.mean, [3.0, -1.0], atol=0.03)
    np.testing.assert_allclose(np.diag(s.cov), [1.0, 4.0], rtol=0.03)


def test_frechet_closed_forms():
    a = stats([0.3, -1.0], [[2.0, 0.5], [0.5, 1.0]])
    assert frechet_sq(a, a) == pytest.approx(0.0, abs=1e-9)
    assert frechet_sq(stats([0.0], [[1.0]]), stats([1.0], [[1.0]])) == pytest.approx(1.0, abs=1e-9)
    diag = frechet_sq(stats([0, 0], np.diag([1.0, 4.0])), stats([0, 0], np.diag([4.0, 1.0])))
    assert diag == pytest.approx(2.0, abs=1e-9)


def test_frechet_rejects_mismatched_dims():
    with pytest.raises(MetricError):
        frechet_sq(stats([0.0], [[1.0]]), stats([0.0, 0.0], np.eye(2)))


def test_frechet_rejects_indefinite_covariance():
    with pytest.raises(MetricError):
        frechet_sq(stats([0, 0], [[1.0, 0.0], [0.0, -1.0]]), stats([0, 0], np.eye(2)))


def random_psd(rng, d):
    m = rng.normal((d, d))
    return m @ m.T


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 5))
def test_property_frechet_symmetric_nonnegative(seed, d):
    rng = Rng(seed)
    a = stats(rng.normal(d), random_psd(rng, d))
    b = stats(rng.normal(d), random_psd(rng, d))
    ab, ba = frechet_sq(a, b), frechet_sq(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-7, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(freqs=st.lists(st.integers(0, 50), min_size=2, max_size=6).filter(lambda c: sum(c) > 0))
def test_property_fd_matches_direct_norm(freqs):
    k = len(freqs)
    labels = np.repeat(np.arange(k), freqs)
    p = np.array(freqs) / sum(freqs)
    fd = fairness_discrepancy(one_hots(labels, k))
    assert fd == pytest.approx(float(np.linalg.norm(p - 1.0 / k)), abs=1e-12)
    assert 0.0 <= fd <= fd_upper_bound(k) + 1e-12


def test_bayes_oracle_splits_binary_mixture_at_zero():
    clf = bayes_oracle(gaussian_mixture_2d(BINARY), BINARY)
    np.testing.assert_array_equal(clf.classify(np.array([[-0.1, 5.0], [0.1, -5.0]])), [0, 1])


def _pair(seed=0):
    family = gaussian_mixture_2d(BINARY)
    base = generate_base(family, BINARY, 6000, Rng(seed))
    return family, build_dataset_pair(base, (0.9, 0.1), 1000, 0.1, Rng(seed + 1), holdout_per_class=1500)


def test_learned_classifier_agrees_with_bayes_oracle():
    family, pair = _pair()
    clf = train_attr_classifier(pair.eval_holdout, BINARY, Rng(3), training_ids=pair.training_ids)
    fresh = generate_base(family, BINARY, 4000, Rng(99)).features
    agree = np.mean(clf.classify(fresh) == bayes_oracle(family, BINARY).classify(fresh))
    assert agree >= 0.98
    assert clf.accuracy >= clf.min_accuracy


def test_learned_classifier_is_deterministic():
    _, pair = _pair()
    x = Rng(5).normal((50, 2))
    a = train_attr_classifier(pair.eval_holdout, BINARY, Rng(3)).classify(x)
    b = train_attr_classifier(pair.eval_holdout, BINARY, Rng(3)).classify(x)
    np.testing.assert_array_equal(a, b)


def test_classifier_refuses_training_overlap():
    _, pair = _pair()
    with pytest.raises(MetricError):
        train_attr_classifier(pair.eval_holdout, BINARY, Rng(0), training_ids=pair.eval_holdout.ids[:5])


def test_inaccurate_classifier_is_refused_for_fd():
    clf = AttrClassifier(ClassifierKind.LEARNED_MLP, BINARY, lambda x: np.zeros(len(x)), accuracy=0.5,
                         min_accuracy=0.95)
    with pytest.raises(MetricError):
        clf.check_usable()


def test_balanced_reference_counts_and_determinism():
    _, pair = _pair()
    s1 = balanced_reference_stats(pair.eval_holdout, BINARY, 1000, Rng(4))
    s2 = balanced_reference_stats(pair.eval_holdout, BINARY, 1000, Rng(4))
    assert s1.n == 2000
    np.testing.assert_array_equal(s1.cov, s2.cov)
    with pytest.raises(MetricError):
        balanced_reference_stats(pair.eval_holdout, BINARY, 5000, Rng(4))


def test_balanced_reference_uses_every_sample_when_full():
    _, pair = _pair()
    full = balanced_reference_stats(pair.eval_holdout, BINARY, 1500, Rng(4))
    direct = fit_gauss_stats(pair.eval_holdout.features)
    np.testing.assert_allclose(full.mean, direct.mean, atol=1e-12)


class _MixtureSampler:
    """Stand-in generator: latent column 0 decides the mode with probability q0."""

    latent_dim = 3

    def __init__(self, q0):
        self.q0 = q0

    def sample(self, z):
        u = 0.5 * (1 + np.vectorize(math.erf)(z[:, 0] / math.sqrt(2)))
        sign = np.where(u < self.q0, -1.0, 1.0)
        return np.stack([2.0 * sign + z[:, 1], z[:, 2]], axis=1)


def test_fd_of_known_sampler():
    clf = bayes_oracle(gaussian_mixture_2d(BINARY), BINARY)
    fd = compute_fd(_MixtureSampler(0.7), clf, 10_000, Rng(0))
    # oracle misclassifies ~2.3% per mode, pulling the measured share toward 1/2
    assert abs(fd - math.sqrt(2) * 0.2) <= 0.02


def test_evaluator_report_fields():
    family, pair = _pair()
    ref = balanced_reference_stats(pair.eval_holdout, BINARY, 500, Rng(1))
    ev = Evaluator(bayes_oracle(family, BINARY), ref, 2000, "abc")
    rep = ev(_MixtureSampler(0.5), Rng(2), epoch=3)
    assert rep.n_samples == 2000 and rep.config_hash == "abc" and rep.epoch == 3
    assert rep.fd < 0.05 and rep.frechet_sq < 0.1
