"""Dense MLP forward/backward passes, seeded sampling and a finite-difference oracle.

Matrices are plain ``numpy.float64`` arrays of shape ``(rows, cols)``; samples
are rows. A layer computes ``act(x @ W.T + b)`` with ``W`` of shape
``(out, in)``.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with a network."""


class Activation(str, enum.Enum):
    LEAKY_RELU = "leaky-relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


LEAKY_SLOPE = 0.2


def sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _activate(kind: Activation, a: np.ndarray, slope: float) -> np.ndarray:
    if kind is Activation.LEAKY_RELU:
        return np.maximum(a, slope * a) if slope <= 1.0 else np.where(a > 0, a, slope * a)
    if kind is Activation.TANH:
        return np.tanh(a)
    if kind is Activation.SIGMOID:
        return sigmoid(a)
    return a


def _activation_grad(kind: Activation, a: np.ndarray, h: np.ndarray, slope: float) -> np.ndarray:
    """Derivative of the activation at pre-activation ``a`` (``h`` is its output)."""
    if kind is Activation.LEAKY_RELU:
        return np.where(a > 0, 1.0, slope)
    if kind is Activation.TANH:
        return 1.0 - h * h
    if kind is Activation.SIGMOID:
        return h * (1.0 - h)
    return np.ones_like(a)


class Rng:
    """Explicit random stream: numpy's PCG64 bit generator seeded with a 64-bit integer.

    PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy, so identical seeds give identical streams across platforms.
    ``spawn`` derives independent child streams from a key, which keeps
    sub-streams independent of the order in which they are used.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            if not 0 <= int(seed) < 2**64:
                raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    def spawn(self, *key: int) -> "Rng":
        """Child stream addressed by ``key``; does not consume this stream."""
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(int(k) for k in key))
        return Rng(seq)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)


def derive_seed(seed: int, *key: int) -> int:
    """64-bit seed for the sub-stream ``key`` of ``seed`` (order-independent)."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, np.uint64)[0])


def gauss_sample(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. standard normal draws."""
    if rows <= 0 or cols <= 0:
        raise ValueError(f"gauss_sample needs positive sizes, got ({rows}, {cols})")
    return rng.normal((rows, cols))


@dataclass(eq=False)
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[Activation, ...]
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activations = tuple(Activation(a) for a in self.activations)
        n = len(self.layer_dims) - 1
        if n < 1:
            raise ShapeError("an MLP needs at least one layer")
        if len(self.weights) != n or len(self.biases) != n or len(self.activations) != n:
            raise ShapeError(f"expected {n} weights, biases and activations")
        for i in range(n):
            want = (self.layer_dims[i + 1], self.layer_dims[i])
            if np.shape(self.weights[i]) != want:
                raise ShapeError(f"layer {i}: weight shape {np.shape(self.weights[i])}, expected {want}")
            if np.shape(self.biases[i]) != (want[0],):
                raise ShapeError(f"layer {i}: bias shape {np.shape(self.biases[i])}, expected {(want[0],)}")
        # all parameters live in one buffer; weights/biases are views into it
        self.flat = np.concatenate([np.ravel(a) for a in self._interleaved()]).astype(np.float64)
        self.weights, self.biases = [], []
        off = 0
        for i in range(n):
            rows, cols = self.layer_dims[i + 1], self.layer_dims[i]
            self.weights.append(self.flat[off : off + rows * cols].reshape(rows, cols))
            off += rows * cols
            self.biases.append(self.flat[off : off + rows])
            off += rows

    def _interleaved(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def layer_slices(self) -> list[slice]:
        """Span of each layer (weights then bias) inside ``flat``."""
        out, off = [], 0
        for w, b in zip(self.weights, self.biases):
            out.append(slice(off, off + w.size + b.size))
            off += w.size + b.size
        return out

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpParams":
        # construction packs into a fresh buffer, so this is a deep copy
        return MlpParams(self.layer_dims, self.weights, self.biases, self.activations, self.slope)

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activations,
            self.slope,
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ... (views into ``flat``)."""
        return list(self._interleaved())

    def layer_checksum(self, i: int) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weights[i], dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.biases[i], dtype="<f8").tobytes())
        return h.hexdigest()

    def checksum(self) -> str:
        return hashlib.sha256(self.flat.astype("<f8").tobytes()).hexdigest()


def init_mlp(
    rng: Rng,
    layer_dims: Sequence[int],
    activations: Sequence[Activation | str],
    scale: str | float = "he",
) -> MlpParams:
    """Random MLP; ``scale="he"`` draws W ~ N(0, 2/fan_in), biases start at zero."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        std = np.sqrt(2.0 / n_in) if scale == "he" else float(scale)
        weights.append(rng.normal((n_out, n_in)) * std)
        biases.append(np.zeros(n_out))
    return MlpParams(tuple(layer_dims), weights, biases, tuple(Activation(a) for a in activations))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations
    post: list[np.ndarray] = field(default_factory=list)  # activations

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def forward(net: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match network input dim {net.input_dim}")
    cache = ForwardCache()
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        cache.inputs.append(h)
        a = h @ w.T + b
        h = _activate(act, a, net.slope)
        cache.pre.append(a)
        cache.post.append(h)
    return h, cache


def backward(
    net: MlpParams,
    cache: ForwardCache,
    upstream: np.ndarray,
    wrt_logits: bool = False,
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

    With ``wrt_logits=True`` the upstream gradient is taken with respect to the
    last layer's pre-activation, skipping the output nonlinearity. Loss code
    uses this to differentiate log-sigmoid terms without dividing by a
    saturated sigmoid derivative.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if len(cache.pre) != net.n_layers:
        raise ShapeError("cache does not belong to this network")
    if upstream.shape != cache.output.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {cache.output.shape}")
    grads = net.zeros_like()
    g = upstream
    for i in reversed(range(net.n_layers)):
        if not (wrt_logits and i == net.n_layers - 1):
            g = g * _activation_grad(net.activations[i], cache.pre[i], cache.post[i], net.slope)
        np.matmul(g.T, cache.inputs[i], out=grads.weights[i])
        grads.biases[i][...] = g.sum(axis=0)
        g = g @ net.weights[i]
    return grads, g


def finite_difference_grads(
    loss: Callable[[MlpParams], float],
    net: MlpParams,
    step: float = 1e-5,
) -> MlpParams:
    """Central differences of a scalar ``loss`` w.r.t. every parameter of ``net``.

    Independent of ``backward``: only calls ``loss`` on perturbed copies.
    """
    probe = net.copy()
    grads = net.zeros_like()
    for src, dst in zip(probe.arrays(), grads.arrays()):
        flat, out = src.reshape(-1), dst.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss(probe)
            flat[k] = orig - step
            down = loss(probe)
            flat[k] = orig
            out[k] = (up - down) / (2.0 * step)
    return grads


def grad_mismatch(analytic: MlpParams, numeric: MlpParams, abs_floor: float = 1e-7) -> float:
    """Worst per-coordinate ``|a - n| / max(|a|, |n|, abs_floor)``.

    The floor keeps near-zero gradients from dividing by (almost) nothing.
    """
    worst = 0.0
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
