"""Pretraining, fairTL / fairTL++ adaptation and debiasing of saved generators.

Every entry point takes :class:`~fairtl.data.FeatureSet` values only, so no
training path can see attribute labels.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import FeatureSet
from .gan import (
    FreezeMask,
    GanState,
    LossConfig,
    Stage,
    apply_update,
    build_gan,
    discriminator_loss,
    generator_loss,
    layer_weight_change,
    negate,
)
from .metrics import Evaluator, MetricsReport
from .numerics import Rng, gauss_sample

log = logging.getLogger(__name__)

# sub-stream keys under a stage seed
_TRAIN_STREAM, _EVAL_STREAM, _INIT_STREAM = 0, 1, 2


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of a (possibly nested) config."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ArchSpec:
    latent_dim: int = 8
    g_hidden: tuple[int, ...] = (32, 64)
    d_hidden: tuple[int, ...] | None = None  # None mirrors g_hidden


@dataclass(frozen=True)
class StageConfig:
    epochs: int
    loss: LossConfig = LossConfig()
    freeze: FreezeMask | None = None
    seed: int = 0
    eval_every: int = 10
    reset_optimizer: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.freeze is not None and self.freeze.active_until_epoch >= self.epochs:
            raise ValueError(
                f"linear-probing epochs ({self.freeze.active_until_epoch}) must be fewer than "
                f"total epochs ({self.epochs}); freezing for the whole adaptation is unstable"
            )


@dataclass
class RunRecord:
    state: GanState
    losses: list[tuple[float, float]] = field(default_factory=list)  # per epoch (D value, G loss)
    metrics: list[MetricsReport] = field(default_factory=list)
    config_hash: str = ""
    saturated: int = 0
    runtime_s: float = 0.0


EpochCallback = Callable[[int, GanState], None]


def _require_features(data) -> FeatureSet:
    if not isinstance(data, FeatureSet):
        raise TypeError(
            f"training accepts only label-free FeatureSet data, got {type(data).__name__}; use strip_labels()"
        )
    if len(data) == 0:
        raise ValueError("empty training dataset")
    return data


def train(
    state: GanState,
    data: FeatureSet,
    config: StageConfig,
    evaluator: Evaluator | None = None,
    on_epoch: EpochCallback | None = None,
) -> RunRecord:
    """Alternate one D_t step and one G_t step per minibatch for ``config.epochs`` epochs.

    ``state`` is not modified. The freeze mask (if any) is applied to D_t by
    epoch index; ``on_epoch(e, state)`` is called after each epoch ``e``.
    """
    data = _require_features(data)
    t0 = time.perf_counter()
    root = Rng(config.seed)
    rng, eval_rng = root.spawn(_TRAIN_STREAM), root.spawn(_EVAL_STREAM)
    record = RunRecord(state, config_hash=config_hash(config))
    x_all = data.features
    n, bs = len(x_all), config.loss.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        d_vals, g_vals = [], []
        for s in range(0, n, bs):
            real = x_all[order[s : s + bs]]
            z = gauss_sample(rng, len(real), state.latent_dim)
            d = discriminator_loss(state, real, state.sample(z))
            state = apply_update(state, config.loss, d_grads=negate(d.grads), mask=config.freeze, epoch=epoch)
            z = gauss_sample(rng, len(real), state.latent_dim)
            g = generator_loss(state, z, config.loss)
            state = apply_update(state, config.loss, g_grads=g.grads)
            d_vals.append(d.value)
            g_vals.append(g.value)
            record.saturated += d.saturated + g.saturated
        record.losses.append((float(np.mean(d_vals)), float(np.mean(g_vals))))
        if on_epoch is not None:
            on_epoch(epoch, state)
        if evaluator is not None and config.eval_every > 0 and (epoch + 1) % config.eval_every == 0:
            record.metrics.append(evaluator(state, eval_rng.spawn(epoch + 1), epoch=epoch + 1))
    if record.saturated:
        log.debug("%d discriminator outputs saturated within 1e-7 of {0, 1}", record.saturated)
    record.state = state
    record.runtime_s = time.perf_counter() - t0
    return record


def pretrain(
    data: FeatureSet,
    arch: ArchSpec,
    config: StageConfig,
    evaluator: Evaluator | None = None,
) -> RunRecord:
    """Train G_s, D_s from scratch on all available (biased + reference) data."""
    data = _require_features(data)
    if config.freeze is not None:
        raise ValueError("freezing applies only to fairTL++ adaptation")
    init_rng = Rng(config.seed).spawn(_INIT_STREAM)
    state = build_gan(init_rng, data.dim, arch.latent_dim, arch.g_hidden, arch.d_hidden)
    return train(state, data, config, evaluator)


def _adapt_start(source: GanState, reset_optimizer: bool) -> GanState:
    if source.stage is not Stage.PRETRAINED:
        raise ValueError(f"adaptation starts from a pretrained model, got stage {source.stage.value}")
    start = source.copy()
    if reset_optimizer:
        start.opt_g = start.opt_d = None
        start = GanState(start.generator, start.discriminator)
    return start


def adapt_fairtl(
    source: GanState,
    ref: FeatureSet,
    config: StageConfig,
    evaluator: Evaluator | None = None,
    on_epoch: EpochCallback | None = None,
) -> RunRecord:
    """Fine-tune every parameter of G_t, D_t (initialised from the source) on the reference set."""
    ref = _require_features(ref)
    if config.freeze is not None:
        raise ValueError("fairTL does not freeze layers; use adapt_fairtlpp")
    start = _adapt_start(source, config.reset_optimizer)
    start.stage = Stage.FAIRTL
    return train(start, ref, config, evaluator, on_epoch)


def adapt_fairtlpp(
    source: GanState,
    ref: FeatureSet,
    config: StageConfig,
    evaluator: Evaluator | None = None,
    on_epoch: EpochCallback | None = None,
) -> RunRecord:
    """fairTL++: linear probing then fine-tuning, with a frozen copy of D_s as extra feedback.

    The source discriminator is copied before any update and used only in the
    generator objective, weighted by ``1 - lam``. Without a freeze mask in
    ``config`` no layers are frozen.
    """
    ref = _require_features(ref)
    start = _adapt_start(source, config.reset_optimizer)
    if config.freeze is not None and len(config.freeze.layers) != start.discriminator.n_layers:
        raise ValueError("freeze mask does not match discriminator depth")
    start = GanState(
        start.generator, start.discriminator, source.discriminator.copy(), Stage.FAIRTLPP, start.opt_g, start.opt_d
    )
    return train(start, ref, config, evaluator, on_epoch)


ADAPTERS = {Stage.FAIRTL: adapt_fairtl, Stage.FAIRTLPP: adapt_fairtlpp}


def debias_pretrained(
    checkpoint: GanState | str | Path,
    ref: FeatureSet,
    method: Stage | str,
    config: StageConfig,
    evaluator: Evaluator | None = None,
) -> RunRecord:
    """Adapt an existing generator when its pretraining data is unavailable.

    Only the reference features are accepted; the checkpoint must carry its
    discriminator.
    """
    from .checkpoint import load_checkpoint

    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    if state.discriminator is None:
        raise ValueError("checkpoint has no discriminator; adaptation needs one")
    method = Stage(method)
    if method not in ADAPTERS:
        raise ValueError(f"unknown adaptation method {method.value}")
    return ADAPTERS[method](state, ref, config, evaluator)


@dataclass(frozen=True)
class Gallery:
    z: np.ndarray
    before: np.ndarray
    after: np.ndarray

    @property
    def z_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.z, dtype="<f8").tobytes()).hexdigest()

    def __len__(self) -> int:
        return len(self.z)


def fixed_noise_gallery(before: GanState, after: GanState, n: int, rng: Rng) -> Gallery:
    """Sample both generators from one shared noise matrix; row ``i`` pairs up."""
    if before.latent_dim != after.latent_dim:
        raise ValueError(f"latent dims differ: {before.latent_dim} vs {after.latent_dim}")
    if n == 0:
        dim = before.generator.output_dim
        return Gallery(np.zeros((0, before.latent_dim)), np.zeros((0, dim)), np.zeros((0, dim)))
    z = gauss_sample(rng, n, before.latent_dim)
    z.setflags(write=False)
    return Gallery(z, before.sample(z), after.sample(z))


@dataclass(frozen=True)
class LayerChangeRow:
    network: str  # "G" or "D"
    layer: int  # 0 = nearest the network input
    mean_change: float


@dataclass
class LayerChangeStudy:
    rows: list[LayerChangeRow]
    source: GanState
    adapted: GanState

    def lowest_d_layers(self, count: int = 2) -> bool:
        """Whether the ``count`` input-nearest D layers change least among all layers."""
        d = [r for r in self.rows if r.network == "D"]
        near = sorted(r.mean_change for r in d[:count])
        others = [r.mean_change for r in self.rows if not (r.network == "D" and r.layer < count)]
        return bool(others) and max(near) < min(others)


def layer_change_study(
    pretrain_data: FeatureSet,
    ref: FeatureSet,
    arch: ArchSpec,
    pretrain_config: StageConfig,
    adapt_config: StageConfig,
    min_ref_ratio: float = 0.5,
) -> LayerChangeStudy:
    """Pretrain, adapt with fairTL on a large reference set, report mean weight change per layer."""
    pretrain_data, ref = _require_features(pretrain_data), _require_features(ref)
    if len(ref) < min_ref_ratio * len(pretrain_data):
        raise ValueError(
            f"layer study needs a large reference set: {len(ref)} < {min_ref_ratio} x {len(pretrain_data)}"
        )
    source = pretrain(pretrain_data, arch, pretrain_config).state
    adapted = adapt_fairtl(source, ref, adapt_config).state
    rows = [LayerChangeRow("G", i, c) for i, c in enumerate(layer_weight_change(source.generator, adapted.generator))]
    rows += [
        LayerChangeRow("D", i, c)
        for i, c in enumerate(layer_weight_change(source.discriminator, adapted.discriminator))
    ]
    return LayerChangeStudy(rows, source, adapted)
