"""Small deterministic dense-network substrate.

Dense layers with relu/identity/sigmoid activations, manual backprop, a
central-difference gradient oracle, AdamW, and a flat binary checkpoint
format. Everything is float64. Parameters are laid out per layer as the
row-major weight matrix followed by the bias vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError, StateError, IngestionError

ACTIVATIONS = {"identity": kernels.IDENTITY, "relu": kernels.RELU, "sigmoid": kernels.SIGMOID}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}

CHECKPOINT_MAGIC = b"BFNN"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    """Per-layer ``(input, pre_activation, output, activation_code)`` from one forward pass."""

    net_id: int
    steps: list = field(default_factory=list)


class DenseNet:
    """A stack of dense layers."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims disagree: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers

    @classmethod
    def build(cls, sizes, activations, rng=None) -> "DenseNet":
        """Glorot-uniform weights, zero biases.

        ``sizes`` has one more entry than ``activations``; ``rng`` is a
        ``numpy.random.Generator`` or a seed.
        """
        if len(sizes) != len(activations) + 1:
            raise ShapeError("need len(sizes) == len(activations) + 1")
        rng = np.random.default_rng(rng)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [l.out_dim for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.parameter_count,):
            raise ShapeError(f"expected {self.parameter_count} parameters, got {flat.shape}")
        pos = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = flat[pos:pos + n].reshape(l.weight.shape).copy()
            pos += n
            l.bias = flat[pos:pos + l.bias.size].copy()
            pos += l.bias.size

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x.reshape(1, -1) if single else x
        if x2.ndim != 2 or x2.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x2.shape[-1]} != network input dim {self.in_dim}")
        return x2, single

    def forward(self, x, cache: bool = False, raw_output: bool = False):
        """Evaluate the net on a vector or a ``(n, in_dim)`` batch.

        With ``cache=True`` returns ``(output, ForwardCache)``. ``raw_output``
        skips the last layer's activation (e.g. to get a logit from a
        sigmoid head).
        """
        h, single = self._as_batch(x)
        fc = ForwardCache(net_id=id(self)) if cache else None
        last = len(self.layers) - 1
        for i, l in enumerate(self.layers):
            act = kernels.IDENTITY if (raw_output and i == last) else ACTIVATIONS[l.activation]
            pre, out = kernels.layer_forward(l.weight, l.bias, h, act)
            if fc is not None:
                fc.steps.append((h, pre, out, act))
            h = out
        y = h[0] if single else h
        return (y, fc) if cache else y

    __call__ = forward

    def backward(self, cache: ForwardCache | None, grad_out):
        """Backpropagate ``grad_out`` (dLoss/dOutput).

        Returns ``(flat_param_grads, grad_input)``; ``grad_input`` has the
        shape of the batch that produced ``cache``.
        """
        if cache is None or not cache.steps:
            raise StateError("backward needs a cache from forward(..., cache=True)")
        if cache.net_id != id(self) or len(cache.steps) != len(self.layers):
            raise StateError("forward cache was produced by a different network")
        g = np.asarray(grad_out, dtype=np.float64)
        n = cache.steps[0][0].shape[0]
        g = g.reshape(n, self.out_dim)
        chunks = []
        for l, (x, pre, out, act) in zip(reversed(self.layers), reversed(cache.steps)):
            gw, gb, g = kernels.layer_backward(l.weight, x, pre, out, g, act)
            chunks.append(np.concatenate([gw.ravel(), gb]))
        return np.concatenate(chunks[::-1]), g

    def pre_activations(self, x) -> list[np.ndarray]:
        _, fc = self.forward(x, cache=True)
        return [step[1] for step in fc.steps]


def dense_forward(net: DenseNet, x) -> np.ndarray:
    return net.forward(x)


def backprop(net: DenseNet, loss_grad_at_output, cached_forward: ForwardCache | None) -> np.ndarray:
    """Analytic parameter gradient, aligned with ``net.get_flat()``."""
    grads, _ = net.backward(cached_forward, loss_grad_at_output)
    return grads


def central_difference(f, x, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        fp = f(x)
        x.flat[i] = orig - step
        fm = f(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2.0 * step)
    return g


def finite_diff_grad(net: DenseNet, loss_fn, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(net)`` w.r.t. the flat parameters.

    The net is restored to its original parameters afterwards.
    """
    original = net.get_flat()

    def f(theta):
        net.set_flat(theta)
        return float(loss_fn(net))

    try:
        return central_difference(f, original, step)
    finally:
        net.set_flat(original)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class AdamW:
    """Adam with decoupled weight decay; ``mode="sgd"`` gives plain SGD."""

    def __init__(self, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8, mode="adamw"):
        if mode not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.mode = mode
        self.t = 0
        self.m = None
        self.v = None

    def step(self, net: DenseNet, grads) -> DenseNet:
        grads = np.asarray(grads, dtype=np.float64)
        if grads.shape != (net.parameter_count,):
            raise ShapeError(f"gradient length {grads.shape} != {net.parameter_count}")
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.isfinite(grads))[0])
            raise NumericError(f"non-finite gradient entry at parameter {bad}; step aborted")
        theta = net.get_flat()
        if self.mode == "sgd":
            theta = theta - self.lr * (grads + self.weight_decay * theta)
        else:
            if self.m is None:
                self.m = np.zeros_like(theta)
                self.v = np.zeros_like(theta)
            self.t += 1
            self.m = self.beta1 * self.m + (1 - self.beta1) * grads
            self.v = self.beta2 * self.v + (1 - self.beta2) * grads * grads
            m_hat = self.m / (1 - self.beta1 ** self.t)
            v_hat = self.v / (1 - self.beta2 ** self.t)
            theta = theta * (1 - self.lr * self.weight_decay)
            theta = theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        net.set_flat(theta)
        return net


def optimizer_step(net: DenseNet, grads, optimizer: AdamW) -> DenseNet:
    return optimizer.step(net, grads)


def save_checkpoint(net: DenseNet, path) -> None:
    header = struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(net.layers))
    dims = b"".join(
        struct.pack("<III", l.in_dim, l.out_dim, ACTIVATIONS[l.activation]) for l in net.layers
    )
    params = net.get_flat().astype("<f8").tobytes()
    Path(path).write_bytes(header + dims + params)


def load_checkpoint(path) -> DenseNet:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise IngestionError(f"{path}: not a BFNN checkpoint")
    _, version, n_layers = struct.unpack_from("<4sII", raw, 0)
    if version != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    layers = []
    for _ in range(n_layers):
        d_in, d_out, code = struct.unpack_from("<III", raw, pos)
        pos += 12
        if code not in _ACT_NAMES:
            raise IngestionError(f"{path}: unknown activation code {code}")
        layers.append(Layer(np.zeros((d_out, d_in)), np.zeros(d_out), _ACT_NAMES[code]))
    net = DenseNet(layers)
    expected = pos + 8 * net.parameter_count
    if len(raw) != expected:
        raise IngestionError(f"{path}: expected {expected} bytes, found {len(raw)}")
    net.set_flat(np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64))
    return net
