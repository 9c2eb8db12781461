"""Adversarial losses, optimizer steps and freezing for fairness adaptation.

The discriminator value is the usual GAN objective

    E[log D_t(x)] + E[log(1 - D_t(G(z)))]

and the generator minimises a mixture of feedback from the adapted
discriminator ``D_t`` and, for fairTL++, a frozen copy ``D_s`` of the
pretrained one:

    lam * E[log(1 - D_t(G(z)))] + (1 - lam) * E[log(1 - D_s(G(z)))]

(or the non-saturating ``-log D`` variant of each term). All log-sigmoid terms
are evaluated from discriminator logits, which keeps them finite without
clipping.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Activation, MlpParams, Rng, ShapeError, backward, forward, init_mlp

CLAMP_EPS = 1e-7


class Stage(str, enum.Enum):
    PRETRAINED = "pretrained"
    FAIRTL = "fairTL"
    FAIRTLPP = "fairTL++"


class GeneratorLoss(str, enum.Enum):
    SATURATING = "saturating"
    NON_SATURATING = "non-saturating"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.6
    generator_loss: GeneratorLoss = GeneratorLoss.NON_SATURATING
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        object.__setattr__(self, "generator_loss", GeneratorLoss(self.generator_loss))


@dataclass(frozen=True)
class FreezeMask:
    """Discriminator layers held fixed while ``epoch < active_until_epoch``."""

    layers: tuple[bool, ...]
    active_until_epoch: int

    def __post_init__(self):
        if self.active_until_epoch < 0:
            raise ValueError("active_until_epoch must be >= 0")

    @classmethod
    def lower_layers(cls, n_disc_layers: int, n_frozen: int = 2, epochs: int = 0) -> "FreezeMask":
        """Freeze the ``n_frozen`` layers nearest the discriminator input."""
        if not 0 <= n_frozen <= n_disc_layers:
            raise ValueError(f"cannot freeze {n_frozen} of {n_disc_layers} layers")
        return cls(tuple(i < n_frozen for i in range(n_disc_layers)), epochs)

    def frozen_at(self, epoch: int) -> tuple[bool, ...]:
        if epoch < self.active_until_epoch:
            return self.layers
        return tuple(False for _ in self.layers)


@dataclass
class AdamState:
    """Moment estimates over a network's flat parameter vector.

    Step counts are kept per layer: frozen layers do not advance.
    """

    m: np.ndarray
    v: np.ndarray
    steps: list[int]

    @classmethod
    def for_params(cls, net: MlpParams) -> "AdamState":
        return cls(np.zeros_like(net.flat), np.zeros_like(net.flat), [0] * net.n_layers)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), list(self.steps))


@dataclass
class GanState:
    generator: MlpParams
    discriminator: MlpParams
    frozen_source: MlpParams | None = None
    stage: Stage = Stage.PRETRAINED
    opt_g: AdamState | None = None
    opt_d: AdamState | None = None

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if (self.frozen_source is not None) != (self.stage is Stage.FAIRTLPP):
            raise ValueError("a frozen source discriminator is present exactly at stage fairTL++")
        if self.generator.output_dim != self.discriminator.input_dim:
            raise ShapeError("generator output does not feed the discriminator input")
        if self.discriminator.output_dim != 1 or self.discriminator.activations[-1] is not Activation.SIGMOID:
            raise ShapeError("discriminator must end in a single sigmoid unit")
        if self.opt_g is None:
            self.opt_g = AdamState.for_params(self.generator)
        if self.opt_d is None:
            self.opt_d = AdamState.for_params(self.discriminator)

    @property
    def latent_dim(self) -> int:
        return self.generator.input_dim

    def copy(self) -> "GanState":
        return GanState(
            self.generator.copy(),
            self.discriminator.copy(),
            None if self.frozen_source is None else self.frozen_source.copy(),
            self.stage,
            self.opt_g.copy(),
            self.opt_d.copy(),
        )

    def sample(self, z: np.ndarray) -> np.ndarray:
        return forward(self.generator, z)[0]


def build_gan(
    rng: Rng,
    data_dim: int,
    latent_dim: int = 8,
    g_hidden: tuple[int, ...] = (32, 64),
    d_hidden: tuple[int, ...] | None = None,
) -> GanState:
    """Fresh GAN; the discriminator mirrors the generator's hidden widths by default."""
    if d_hidden is None:
        d_hidden = tuple(reversed(g_hidden))
    g_dims = (latent_dim, *g_hidden, data_dim)
    d_dims = (data_dim, *d_hidden, 1)
    gen = init_mlp(rng, g_dims, [Activation.LEAKY_RELU] * len(g_hidden) + [Activation.IDENTITY])
    disc = init_mlp(rng, d_dims, [Activation.LEAKY_RELU] * len(d_hidden) + [Activation.SIGMOID])
    return GanState(gen, disc)


def _log_sigmoid(a: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -a)


def _saturation(p: np.ndarray) -> int:
    return int(np.count_nonzero((p < CLAMP_EPS) | (p > 1.0 - CLAMP_EPS)))


@dataclass
class LossResult:
    value: float
    grads: MlpParams
    saturated: int = 0  # discriminator outputs within CLAMP_EPS of 0 or 1
    extras: dict = field(default_factory=dict)


def discriminator_loss(state: GanState, real: np.ndarray, fake: np.ndarray) -> LossResult:
    """GAN value ``E[log D_t(x)] + E[log(1 - D_t(fake))]`` and its gradient w.r.t. ``D_t``.

    The gradient is that of the value itself (ascent direction). ``D_s`` plays
    no part here.
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator_loss needs non-empty batches")
    if real.shape[1] != fake.shape[1]:
        raise ShapeError(f"real dim {real.shape[1]} != fake dim {fake.shape[1]}")
    disc = state.discriminator
    nr, nf = len(real), len(fake)
    _, cache = forward(disc, np.concatenate([real, fake]))
    a, p = cache.logits, cache.output
    value = float(_log_sigmoid(a[:nr]).mean() + _log_sigmoid(-a[nr:]).mean())
    # d/da log s(a) = 1 - s(a);  d/da log(1 - s(a)) = -s(a)
    up = np.concatenate([(1.0 - p[:nr]) / nr, -p[nr:] / nf])
    grads, _ = backward(disc, cache, up, wrt_logits=True)
    return LossResult(value, grads, _saturation(p))


def _generator_term(disc: MlpParams, fake: np.ndarray, form: GeneratorLoss):
    """Mean generator loss against one discriminator and its gradient w.r.t. ``fake``."""
    _, cache = forward(disc, fake)
    a, p = cache.logits, cache.output
    n = len(fake)
    if form is GeneratorLoss.SATURATING:
        value = float(_log_sigmoid(-a).mean())
        upstream = -p / n
    else:
        value = float(-_log_sigmoid(a).mean())
        upstream = (p - 1.0) / n
    _, dx = backward(disc, cache, upstream, wrt_logits=True)
    return value, dx, _saturation(p)


def generator_loss(state: GanState, z: np.ndarray, config: LossConfig) -> LossResult:
    """Generator objective (to minimise) and its gradient w.r.t. ``G_t``.

    At stage fairTL++ the loss mixes ``D_t`` and the frozen ``D_s`` with weight
    ``config.lam``; at every other stage ``lam`` is ignored and only ``D_t``
    gives feedback.
    """
    if state.stage is Stage.FAIRTLPP and state.frozen_source is None:
        raise ValueError("stage fairTL++ requires a frozen source discriminator")
    z = np.asarray(z, dtype=np.float64)
    fake, g_cache = forward(state.generator, z)
    form = GeneratorLoss(config.generator_loss)
    v_t, dx_t, sat = _generator_term(state.discriminator, fake, form)
    extras = {"target": v_t}
    if state.stage is Stage.FAIRTLPP:
        lam = config.lam
        v_s, dx_s, sat_s = _generator_term(state.frozen_source, fake, form)
        value = lam * v_t + (1.0 - lam) * v_s
        dx = lam * dx_t + (1.0 - lam) * dx_s
        sat += sat_s
        extras["source"] = v_s
    else:
        value, dx = v_t, dx_t
    grads, _ = backward(state.generator, g_cache, dx)
    return LossResult(value, grads, sat, extras)


def _adam_step(
    net: MlpParams,
    opt: AdamState,
    grads: MlpParams,
    frozen: tuple[bool, ...],
    lr: float,
    config: LossConfig,
) -> tuple[MlpParams, AdamState]:
    if grads.layer_dims != net.layer_dims:
        raise ShapeError(f"gradient layout {grads.layer_dims} does not match parameters {net.layer_dims}")
    new_net, new_opt = net.copy(), opt.copy()
    b1, b2 = config.beta1, config.beta2
    g = grads.flat
    for i, sl in enumerate(net.layer_slices()):
        if frozen[i]:
            continue
        t = new_opt.steps[i] = new_opt.steps[i] + 1
        m = new_opt.m[sl] = b1 * new_opt.m[sl] + (1.0 - b1) * g[sl]
        v = new_opt.v[sl] = b2 * new_opt.v[sl] + (1.0 - b2) * g[sl] * g[sl]
        new_net.flat[sl] -= lr * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + config.adam_eps)
    return new_net, new_opt


def apply_update(
    state: GanState,
    config: LossConfig,
    d_grads: MlpParams | None = None,
    g_grads: MlpParams | None = None,
    mask: FreezeMask | None = None,
    epoch: int = 0,
) -> GanState:
    """One Adam descent step on ``D_t`` and/or ``G_t``; returns a new state.

    Gradients are descent directions (gradients of quantities to minimise).
    Discriminator layers frozen by ``mask`` at ``epoch`` are left bit-for-bit
    unchanged and their moment estimates do not advance. ``D_s`` is never
    touched.
    """
    new = replace(state)
    if d_grads is not None:
        frozen = tuple(False for _ in range(state.discriminator.n_layers))
        if mask is not None:
            if len(mask.layers) != state.discriminator.n_layers:
                raise ShapeError("freeze mask does not match discriminator depth")
            frozen = mask.frozen_at(epoch)
        new.discriminator, new.opt_d = _adam_step(
            state.discriminator, state.opt_d, d_grads, frozen, config.lr_d, config
        )
    if g_grads is not None:
        frozen = tuple(False for _ in range(state.generator.n_layers))
        new.generator, new.opt_g = _adam_step(state.generator, state.opt_g, g_grads, frozen, config.lr_g, config)
    return new


def negate(grads: MlpParams) -> MlpParams:
    out = grads.copy()
    np.negative(out.flat, out=out.flat)
    return out


def layer_weight_change(before: MlpParams, after: MlpParams) -> list[float]:
    """Per layer, mean of ``|after - before|`` over all weight and bias entries."""
    if before.layer_dims != after.layer_dims:
        raise ShapeError(f"layer dims differ: {before.layer_dims} vs {after.layer_dims}")
    out = []
    for wb, bb, wa, ba in zip(before.weights, before.biases, after.weights, after.biases):
        total = np.abs(wa - wb).sum() + np.abs(ba - bb).sum()
        out.append(float(total / (wb.size + bb.size)))
    return out
