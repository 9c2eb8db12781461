"""Synthetic labelled data and biased / fair dataset construction.

Labels live only on :class:`LabeledSet`. Training code accepts
:class:`FeatureSet`, obtained through :func:`strip_labels`, and rejects
anything else.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng


@dataclass(frozen=True)
class AttributeSpec:
    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        attrs = tuple((str(n), int(c)) for n, c in self.attributes)
        if not attrs:
            raise ValueError("an AttributeSpec needs at least one attribute")
        for name, card in attrs:
            if card < 2:
                raise ValueError(f"attribute {name!r} has cardinality {card}; need >= 2")
        object.__setattr__(self, "attributes", attrs)

    @classmethod
    def single(cls, name: str = "attr", cardinality: int = 2) -> "AttributeSpec":
        return cls(((name, cardinality),))

    @property
    def joint_cardinality(self) -> int:
        return math.prod(c for _, c in self.attributes)

    def decompose(self, joint: int) -> tuple[int, ...]:
        """Per-attribute values of a joint label (first attribute most significant)."""
        vals = []
        for _, card in reversed(self.attributes):
            vals.append(joint % card)
            joint //= card
        return tuple(reversed(vals))


@dataclass(frozen=True)
class LabeledSet:
    """Samples with joint labels and stable identities (row ``i`` has id ``ids[i]``)."""

    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if not (len(self.features) == len(self.labels) == len(self.ids)):
            raise ValueError("features, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx], self.ids[idx])

    def class_counts(self, k: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=k)


@dataclass(frozen=True)
class FeatureSet:
    """Label-free view of a dataset; the only data type training code accepts."""

    features: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def strip_labels(samples: LabeledSet | FeatureSet) -> FeatureSet:
    if isinstance(samples, FeatureSet):
        return samples
    feats = samples.features.copy()
    feats.setflags(write=False)
    return FeatureSet(feats)


def union(*sets: FeatureSet) -> FeatureSet:
    return FeatureSet(np.concatenate([s.features for s in sets], axis=0))


class FamilyKind(str, enum.Enum):
    GAUSSIAN_MIXTURE_2D = "gaussian-mixture-2d"
    PROCEDURAL_IMAGE_8X8 = "procedural-image-8x8"


@dataclass(frozen=True)
class SyntheticFamily:
    """One feature-generating recipe per joint label.

    For the Gaussian mixture, ``means[k]`` and ``covs[k]`` parameterise label
    ``k``. For 8x8 images, ``recipes[k]`` is ``(shape, shade)`` with shape in
    {"disk", "square"} and shade in {"bright", "dark"}.
    """

    kind: FamilyKind
    feature_dim: int
    means: tuple | None = None
    covs: tuple | None = None
    recipes: tuple[tuple[str, str], ...] | None = None

    @property
    def n_components(self) -> int:
        return len(self.means) if self.kind is FamilyKind.GAUSSIAN_MIXTURE_2D else len(self.recipes)

    def check(self, spec: AttributeSpec) -> None:
        if self.n_components != spec.joint_cardinality:
            raise ValueError(
                f"family has {self.n_components} components but the spec has "
                f"{spec.joint_cardinality} joint labels"
            )


def gaussian_mixture_2d(spec: AttributeSpec, radius: float = 2.0, var: float = 1.0) -> SyntheticFamily:
    """Components on a circle of ``radius``, isotropic covariance ``var * I``.

    Label ``k`` sits at angle ``pi + 2 pi k / K``, so the binary case has means
    (-r, 0) and (+r, 0).
    """
    k = spec.joint_cardinality
    means, covs = [], []
    for j in range(k):
        ang = math.pi + 2.0 * math.pi * j / k
        m = np.array([radius * math.cos(ang), radius * math.sin(ang)])
        m[np.abs(m) < 1e-12] = 0.0
        means.append(m)
        covs.append(var * np.eye(2))
    return SyntheticFamily(FamilyKind.GAUSSIAN_MIXTURE_2D, 2, tuple(means), tuple(covs))


def procedural_image_8x8(spec: AttributeSpec) -> SyntheticFamily:
    """8x8 grayscale shapes. Attribute 0 picks disk/square; attribute 1, when
    present, picks the shade band. With a single attribute the two are tied:
    label 0 is a bright disk and label 1 a dark square."""
    cards = [c for _, c in spec.attributes]
    if any(c != 2 for c in cards) or len(cards) > 2:
        raise ValueError("the image family supports one or two binary attributes")
    recipes = []
    for j in range(spec.joint_cardinality):
        vals = spec.decompose(j)
        shape = ("disk", "square")[vals[0]]
        shade = ("bright", "dark")[vals[1] if len(vals) > 1 else vals[0]]
        recipes.append((shape, shade))
    return SyntheticFamily(FamilyKind.PROCEDURAL_IMAGE_8X8, 64, recipes=tuple(recipes))


_YY, _XX = np.mgrid[0:8, 0:8] + 0.5


def _render(shape: str, shade: str, rng: Rng) -> np.ndarray:
    cx, cy = rng.uniform(2.5, 5.5, size=2)
    level = rng.uniform(0.75, 1.0) if shade == "bright" else rng.uniform(0.25, 0.5)
    if shape == "disk":
        inside = (_XX - cx) ** 2 + (_YY - cy) ** 2 <= 2.2**2
    else:
        inside = (np.abs(_XX - cx) <= 2.0) & (np.abs(_YY - cy) <= 2.0)
    img = np.where(inside, level, 0.0) + 0.03 * rng.normal((8, 8))
    return img.reshape(-1)


def _stratified_counts(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def generate_base(family: SyntheticFamily, spec: AttributeSpec, n: int, rng: Rng) -> LabeledSet:
    """``n`` samples stratified uniformly over joint labels, shuffled, ids ``0..n-1``."""
    if n <= 0:
        raise ValueError("n must be positive")
    family.check(spec)
    k = spec.joint_cardinality
    labels = np.concatenate([np.full(c, j, dtype=np.int64) for j, c in enumerate(_stratified_counts(n, k))])
    labels = labels[rng.permutation(n)]
    feats = np.empty((n, family.feature_dim))
    if family.kind is FamilyKind.GAUSSIAN_MIXTURE_2D:
        noise = rng.normal((n, family.feature_dim))
        for j in range(k):
            sel = labels == j
            chol = np.linalg.cholesky(family.covs[j])
            feats[sel] = family.means[j] + noise[sel] @ chol.T
    else:
        for i, j in enumerate(labels):
            feats[i] = _render(*family.recipes[j], rng)
    return LabeledSet(feats, labels, np.arange(n, dtype=np.int64))


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` by ``weights``; ties go to the lower index."""
    quotas = [total * w for w in weights]
    counts = [math.floor(q) for q in quotas]
    rest = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda c: (-(quotas[c] - counts[c]), c))
    for c in order[:rest]:
        counts[c] += 1
    return counts


@dataclass(frozen=True)
class DatasetPair:
    d_bias: LabeledSet
    d_ref: LabeledSet
    eval_holdout: LabeledSet
    bias_vector: tuple[float, ...]
    perc: float

    @property
    def training_ids(self) -> np.ndarray:
        return np.concatenate([self.d_bias.ids, self.d_ref.ids])


class InsufficientDataError(ValueError):
    pass


def build_dataset_pair(
    base: LabeledSet,
    bias_vector: Sequence[float],
    size_bias: int,
    perc: float,
    rng: Rng,
    holdout_per_class: int | None = None,
) -> DatasetPair:
    """Resample ``base`` into a biased set, a uniform reference set and a holdout.

    ``d_bias`` gets the largest-remainder counts of ``size_bias * bias_vector``;
    ``d_ref`` has ``round(perc * size_bias)`` samples split as evenly as
    possible; the holdout takes the remaining samples (or
    ``holdout_per_class`` of each class). The three are disjoint.
    """
    bias = np.asarray(bias_vector, dtype=np.float64)
    k = len(bias)
    if abs(bias.sum() - 1.0) > 1e-9 or np.any(bias < 0):
        raise ValueError(f"bias_vector must be a probability vector, got {bias_vector}")
    if not 0.0 < perc <= 1.0:
        raise ValueError(f"perc must lie in (0, 1], got {perc}")
    if base.labels.max(initial=0) >= k:
        raise ValueError("base contains labels outside the bias vector's range")
    n_bias = largest_remainder(size_bias, bias.tolist())
    n_ref = _stratified_counts(round(perc * size_bias), k)
    by_class = [np.flatnonzero(base.labels == c) for c in range(k)]
    for c in range(k):
        need = n_bias[c] + n_ref[c] + (holdout_per_class or 0)
        if len(by_class[c]) < need:
            raise InsufficientDataError(f"class {c} has {len(by_class[c])} base samples, needs {need}")
    bias_idx, ref_idx, hold_idx = [], [], []
    for c in range(k):
        pool = by_class[c][rng.permutation(len(by_class[c]))]
        bias_idx.append(pool[: n_bias[c]])
        ref_idx.append(pool[n_bias[c] : n_bias[c] + n_ref[c]])
        rest = pool[n_bias[c] + n_ref[c] :]
        hold_idx.append(rest if holdout_per_class is None else rest[:holdout_per_class])

    def gather(parts):
        idx = np.concatenate(parts)
        return base.take(idx[rng.permutation(len(idx))])

    return DatasetPair(gather(bias_idx), gather(ref_idx), gather(hold_idx), tuple(bias.tolist()), float(perc))


# Dataset cache format: a text file, one record per line.
#   line 1: "fairtl-dataset 1"
#   line 2: "<feature_dim> <joint_cardinality> <n_rows>"
#   rows:   "<id> <label> <f_1> ... <f_d>" with features as float.hex() strings
DATASET_MAGIC = "fairtl-dataset 1"


def save_dataset(samples: LabeledSet, k: int, path: str | Path) -> None:
    lines = [DATASET_MAGIC, f"{samples.dim} {k} {len(samples)}"]
    for i in range(len(samples)):
        feats = " ".join(float(v).hex() for v in samples.features[i])
        lines.append(f"{int(samples.ids[i])} {int(samples.labels[i])} {feats}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> tuple[LabeledSet, int]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    try:
        dim, k, n = (int(t) for t in lines[1].split())
        rows = [ln.split() for ln in lines[2:]]
        if len(rows) != n or any(len(r) != dim + 2 for r in rows):
            raise ValueError("row count or width mismatch")
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
        feats = np.array([[float.fromhex(t) for t in r[2:]] for r in rows], dtype=np.float64).reshape(n, dim)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed dataset file ({exc})") from exc
    return LabeledSet(feats, labels, ids), k
