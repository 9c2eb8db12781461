"""Fairness discrepancy, Fréchet distance and the attribute classifiers behind them."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import AttributeSpec, FamilyKind, LabeledSet, SyntheticFamily
from .numerics import Activation, MlpParams, Rng, backward, forward, gauss_sample, init_mlp

EIG_TOL = 1e-10


class MetricError(ValueError):
    pass


class ClassifierKind(str, enum.Enum):
    BAYES_ORACLE = "bayes-oracle"
    LEARNED_MLP = "learned-mlp"


@dataclass
class AttrClassifier:
    """Maps feature rows to joint-label indices.

    ``predict_fn`` does the work; ``accuracy`` and ``min_accuracy`` gate use in
    FD for learned classifiers.
    """

    kind: ClassifierKind
    spec: AttributeSpec
    predict_fn: Callable[[np.ndarray], np.ndarray]
    params: MlpParams | None = None
    accuracy: float | None = None
    min_accuracy: float = 0.0

    def classify(self, x: np.ndarray) -> np.ndarray:
        labels = np.asarray(self.predict_fn(np.asarray(x, dtype=np.float64)), dtype=np.int64)
        k = self.spec.joint_cardinality
        if labels.shape != (len(x),) or np.any(labels < 0) or np.any(labels >= k):
            raise MetricError("classifier produced labels outside the joint label space")
        return labels

    def one_hot(self, x: np.ndarray) -> np.ndarray:
        labels = self.classify(x)
        out = np.zeros((len(labels), self.spec.joint_cardinality))
        out[np.arange(len(labels)), labels] = 1.0
        return out

    def check_usable(self) -> None:
        if self.accuracy is not None and self.accuracy < self.min_accuracy:
            raise MetricError(
                f"classifier held-out accuracy {self.accuracy:.4f} is below the required {self.min_accuracy}"
            )


def bayes_oracle(family: SyntheticFamily, spec: AttributeSpec) -> AttrClassifier:
    """Maximum-posterior label under equal priors for the Gaussian-mixture family."""
    if family.kind is not FamilyKind.GAUSSIAN_MIXTURE_2D:
        raise ValueError("the Bayes oracle is only available for the Gaussian-mixture family")
    family.check(spec)
    means = np.stack(family.means)
    precs = np.stack([np.linalg.inv(c) for c in family.covs])
    logdets = np.array([np.linalg.slogdet(c)[1] for c in family.covs])

    def predict(x):
        diff = x[:, None, :] - means[None, :, :]
        maha = np.einsum("nki,kij,nkj->nk", diff, precs, diff)
        return np.argmin(maha + logdets[None, :], axis=1)

    return AttrClassifier(ClassifierKind.BAYES_ORACLE, spec, predict)


def fairness_discrepancy(one_hots: np.ndarray) -> float:
    """L2 distance between the uniform vector and the mean one-hot row."""
    k = one_hots.shape[1]
    return float(np.linalg.norm(np.full(k, 1.0 / k) - one_hots.mean(axis=0)))


def compute_fd(generator, classifier: AttrClassifier, n: int, rng: Rng) -> float:
    """FD of a generator: draw ``n`` latents, generate, classify, compare to uniform.

    ``generator`` is a :class:`~fairtl.gan.GanState` or anything with
    ``latent_dim`` and ``sample(z)``.
    """
    if n < 1:
        raise ValueError("compute_fd needs n >= 1")
    classifier.check_usable()
    z = gauss_sample(rng, n, generator.latent_dim)
    return fairness_discrepancy(classifier.one_hot(generator.sample(z)))


def fd_upper_bound(k: int) -> float:
    return math.sqrt((k - 1) / k)


@dataclass(frozen=True)
class GaussStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    degenerate: bool = False


def fit_gauss_stats(samples: np.ndarray) -> GaussStats:
    """Sample mean and unbiased covariance of the rows of ``samples``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise MetricError("fit_gauss_stats needs at least 2 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussStats(mean, cov, len(x), degenerate=len(x) < x.shape[1] + 1)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min(initial=0.0) < -EIG_TOL * max(1.0, abs(w).max(initial=0.0)):
        raise MetricError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_sq(a: GaussStats, b: GaussStats) -> float:
    """Squared Fréchet (2-Wasserstein) distance between two Gaussian fits.

    ``Tr((Sa Sb)^{1/2})`` is taken as ``Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2})``, which
    has the same eigenvalues but is symmetric, so both roots use ``eigh``.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    ra = _psd_sqrt(a.cov)
    cross = _psd_sqrt(ra @ b.cov @ ra)
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    if not math.isfinite(val):
        raise MetricError("non-finite Fréchet distance")
    # rounding can leave tiny negatives for identical inputs
    return max(val, 0.0)


def balanced_reference_stats(holdout: LabeledSet, spec: AttributeSpec, per_class: int, rng: Rng) -> GaussStats:
    """Fit Gaussian moments on exactly ``per_class`` holdout samples of each joint label."""
    picks = []
    for c in range(spec.joint_cardinality):
        idx = np.flatnonzero(holdout.labels == c)
        if len(idx) < per_class:
            raise MetricError(f"class {c} has {len(idx)} holdout samples, needs {per_class}")
        picks.append(idx[rng.permutation(len(idx))[:per_class]])
    return fit_gauss_stats(holdout.features[np.concatenate(picks)])


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (32,)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    val_fraction: float = 0.25
    min_accuracy: float | None = None  # None: 0.95 for mixtures, 0.9 for images


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_attr_classifier(
    holdout: LabeledSet,
    spec: AttributeSpec,
    rng: Rng,
    config: ClassifierConfig = ClassifierConfig(),
    family_kind: FamilyKind = FamilyKind.GAUSSIAN_MIXTURE_2D,
    training_ids: np.ndarray | None = None,
) -> AttrClassifier:
    """Softmax MLP on the evaluation holdout, with held-out accuracy recorded.

    ``training_ids`` are the identities of every sample used to train GANs;
    any overlap with ``holdout`` is refused.
    """
    if training_ids is not None and np.intersect1d(holdout.ids, training_ids).size:
        raise MetricError("classifier holdout overlaps the GAN training data")
    k = spec.joint_cardinality
    n = len(holdout)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    val, tr = perm[:n_val], perm[n_val:]
    x_tr, y_tr = holdout.features[tr], holdout.labels[tr]
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-8

    dims = (holdout.dim, *config.hidden, k)
    net = init_mlp(rng, dims, [Activation.LEAKY_RELU] * len(config.hidden) + [Activation.IDENTITY])
    m = [np.zeros_like(a) for a in net.arrays()]
    v = [np.zeros_like(a) for a in net.arrays()]
    t = 0
    onehot = np.eye(k)
    for _ in range(config.epochs):
        order = rng.permutation(len(tr))
        for s in range(0, len(tr), config.batch_size):
            b = order[s : s + config.batch_size]
            logits, cache = forward(net, (x_tr[b] - mu) / sd)
            up = (_softmax(logits) - onehot[y_tr[b]]) / len(b)
            grads, _ = backward(net, cache, up)
            t += 1
            for p, g, mm, vv in zip(net.arrays(), grads.arrays(), m, v):
                mm *= 0.9
                mm += 0.1 * g
                vv *= 0.999
                vv += 0.001 * g * g
                p -= config.lr * (mm / (1 - 0.9**t)) / (np.sqrt(vv / (1 - 0.999**t)) + 1e-8)

    def predict(x):
        return np.argmax(forward(net, (x - mu) / sd)[0], axis=1)

    acc = float(np.mean(predict(holdout.features[val]) == holdout.labels[val]))
    threshold = config.min_accuracy
    if threshold is None:
        threshold = 0.95 if family_kind is FamilyKind.GAUSSIAN_MIXTURE_2D else 0.9
    return AttrClassifier(ClassifierKind.LEARNED_MLP, spec, predict, net, acc, threshold)


@dataclass(frozen=True)
class MetricsReport:
    fd: float
    frechet_sq: float
    n_samples: int
    seed: int
    config_hash: str
    epoch: int | None = None
    k: int = 2

    def __post_init__(self):
        if not 0.0 <= self.fd <= fd_upper_bound(self.k) + 1e-12:
            raise MetricError(f"FD {self.fd} outside [0, {fd_upper_bound(self.k)}]")
        if self.frechet_sq < 0:
            raise MetricError("negative Fréchet distance")


@dataclass
class Evaluator:
    """Bundles what is needed to score a generator: classifier, reference stats, sample count."""

    classifier: AttrClassifier
    reference: GaussStats
    n_samples: int = 4096
    config_hash: str = ""

    def __call__(self, generator, rng: Rng, epoch: int | None = None) -> MetricsReport:
        self.classifier.check_usable()
        z = gauss_sample(rng, self.n_samples, generator.latent_dim)
        x = generator.sample(z)
        fd = fairness_discrepancy(self.classifier.one_hot(x))
        fr = frechet_sq(fit_gauss_stats(x), self.reference)
        return MetricsReport(
            fd, fr, self.n_samples, rng.seed, self.config_hash, epoch, self.classifier.spec.joint_cardinality
        )
