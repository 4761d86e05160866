"""Parameterized layers shared by both backbones.

Every layer owns named parameter tensors, registers them (and any running
buffers) into stores for serialization, and is immutable during the
forward/backward of a single step; updates happen only between steps.
Weight layout follows the row-vector convention, so ``linear`` computes
``x @ w + b`` with ``w`` of shape (in, out).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class ConfigError(ValueError):
    """A hyperparameter combination that cannot be realized."""


# ---------------------------------------------------------------------------
# initialization schemes


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the transformer default."""
    out = np.empty(shape, dtype=np.float64).reshape(-1)
    need = out.size
    filled = 0
    while filled < need:
        draw = rng.standard_normal(need - filled) * std
        keep = draw[np.abs(draw) <= 2 * std]
        out[filled : filled + keep.size] = keep
        filled += keep.size
    return out.reshape(shape).astype(np.float32)


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, sqrt(2/fan_in)), the convolution default."""
    std = float(np.sqrt(2.0 / fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=np.float32)


# ---------------------------------------------------------------------------
# parameter bookkeeping


class ParameterStore:
    """Ordered, uniquely named map of parameter (or buffer) arrays."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._items[name] = t
        return t

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Copy arrays into the stored tensors by name; names must match."""
        missing = set(self._items) - set(values)
        extra = set(values) - set(self._items)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._items.items():
            v = np.asarray(values[name], dtype=np.float32)
            if v.shape != t.values.shape:
                raise ValueError(f"{name}: shape {v.shape} does not match {t.values.shape}")
            t.values[...] = v

    def value_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._items.items()}


class Layer:
    """Base class wiring child layers' parameters into prefixed stores."""

    init_scheme: str = "none"

    def __init__(self):
        self._params: list[tuple[str, Tensor]] = []
        self._buffers: list[tuple[str, Tensor]] = []
        self._children: list[tuple[str, "Layer"]] = []

    def _add_param(self, name: str, values: np.ndarray) -> Tensor:
        t = parameter(values)
        self._params.append((name, t))
        return t

    def _add_buffer(self, name: str, values: np.ndarray) -> Tensor:
        t = Tensor(values)
        self._buffers.append((name, t))
        return t

    def _add_child(self, name: str, child: "Layer") -> "Layer":
        self._children.append((name, child))
        return child

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params:
            yield prefix + name, t
        for cname, child in self._children:
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, t in self._buffers:
            yield prefix + name, t
        for cname, child in self._children:
            yield from child.named_buffers(prefix + cname + ".")

    def parameter_store(self, prefix: str = "") -> ParameterStore:
        store = ParameterStore()
        for name, t in self.named_parameters(prefix):
            store.add(name, t)
        return store

    def buffer_store(self, prefix: str = "") -> ParameterStore:
        store = ParameterStore()
        for name, t in self.named_buffers(prefix):
            store.add(name, t)
        return store

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


# ---------------------------------------------------------------------------
# layers


class Linear(Layer):
    init_scheme = "trunc_normal(0.02)"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, scheme: str = "trunc"):
        super().__init__()
        if scheme == "trunc":
            w = trunc_normal((d_in, d_out), 0.02, rng)
        elif scheme == "kaiming":
            w = kaiming_normal((d_in, d_out), d_in, rng)
            self.init_scheme = f"kaiming_fan_in({d_in})"
        else:
            raise ConfigError(f"unknown linear init scheme {scheme!r}")
        self.w = self._add_param("w", w)
        self.b = self._add_param("b", zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class Conv2d(Layer):
    """Bias-free convolution; a batch-norm always follows in this codebase."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        super().__init__()
        fan_in = c_in * k * k
        self.init_scheme = f"kaiming_fan_in({fan_in})"
        self.w = self._add_param("w", kaiming_normal((c_out, c_in, k, k), fan_in, rng))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, stride=self.stride, pad=self.pad)


class BatchNorm2d(Layer):
    """Per-batch statistics in training, running averages at eval.

    Running buffers update with momentum 0.1 outside the tape, so eval
    normalization is a constant affine map.
    """

    init_scheme = "ones/zeros"
    momentum = 0.1
    eps = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self._add_param("gamma", ones(channels))
        self.beta = self._add_param("beta", zeros(channels))
        self.running_mean = self._add_buffer("running_mean", zeros(channels))
        self.running_var = self._add_buffer("running_var", ones(channels))
        self.channels = channels

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        c = self.channels
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        if train:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = T.subtract(x, mu)
            var = T.mean(T.power(centered, 2.0), axis=(0, 2, 3), keepdims=True)
            inv = T.power(T.add(var, Tensor(np.float32(self.eps))), -0.5)
            xhat = T.multiply(centered, inv)
            m = self.momentum
            self.running_mean.values[...] = (
                (1 - m) * self.running_mean.values + m * mu.values.reshape(c)
            )
            self.running_var.values[...] = (
                (1 - m) * self.running_var.values + m * var.values.reshape(c)
            )
        else:
            mu = Tensor(self.running_mean.values.reshape(1, c, 1, 1))
            inv_np = 1.0 / np.sqrt(self.running_var.values.astype(np.float64) + self.eps)
            inv = Tensor(inv_np.reshape(1, c, 1, 1))
            xhat = T.multiply(T.subtract(x, mu), inv)
        return T.add(T.multiply(xhat, gamma), beta)


class LayerNorm(Layer):
    init_scheme = "ones/zeros"

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self._add_param("gamma", ones(dim))
        self.beta = self._add_param("beta", zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.multiply(T.layer_norm(x), self.gamma), self.beta)


class MultiHeadSelfAttention(Layer):
    init_scheme = "trunc_normal(0.02)"

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = self._add_child("q", Linear(dim, dim, rng))
        self.k = self._add_child("k", Linear(dim, dim, rng))
        self.v = self._add_child("v", Linear(dim, dim, rng))
        self.out = self._add_child("out", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(z: Tensor) -> Tensor:
            return T.transpose(T.reshape(z, (n, t, h, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        att = T.softmax(scores, axis=-1)
        mixed = T.matmul(att, v)
        joined = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, t, d))
        return self.out(joined)


class Mlp(Layer):
    init_scheme = "trunc_normal(0.02)"

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self._add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self._add_child("fc2", Linear(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class PatchEmbed(Layer):
    init_scheme = "trunc_normal(0.02)"

    def __init__(self, channels: int, image_size: int, patch: int, dim: int,
                 rng: np.random.Generator):
        super().__init__()
        if image_size % patch != 0:
            raise ConfigError(f"patch size {patch} does not divide image size {image_size}")
        self.patch = patch
        self.tokens = (image_size // patch) ** 2
        self.proj = self._add_child("proj", Linear(channels * patch * patch, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        n, c, hh, ww = x.shape
        p = self.patch
        gh, gw = hh // p, ww // p
        x = T.reshape(x, (n, c, gh, p, gw, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (n, gh * gw, c * p * p))
        return self.proj(x)


class TransformerBlock(Layer):
    """Pre-norm residual block: attention then MLP."""

    init_scheme = "trunc_normal(0.02)"

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.ln1 = self._add_child("ln1", LayerNorm(dim))
        self.attn = self._add_child("attn", MultiHeadSelfAttention(dim, heads, rng))
        self.ln2 = self._add_child("ln2", LayerNorm(dim))
        self.mlp = self._add_child("mlp", Mlp(dim, dim * mlp_ratio, rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.mlp(self.ln2(x)))


class ResidualBlock(Layer):
    """Two 3x3 conv+norm steps with an identity or projected skip."""

    init_scheme = "kaiming_fan_in"

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self._add_child("conv1", Conv2d(c_in, c_out, 3, rng, stride=stride, pad=1))
        self.bn1 = self._add_child("bn1", BatchNorm2d(c_out))
        self.conv2 = self._add_child("conv2", Conv2d(c_out, c_out, 3, rng, stride=1, pad=1))
        self.bn2 = self._add_child("bn2", BatchNorm2d(c_out))
        self.project = stride != 1 or c_in != c_out
        if self.project:
            self.skip = self._add_child("skip", Conv2d(c_in, c_out, 1, rng, stride=stride, pad=0))
            self.skip_bn = self._add_child("skip_bn", BatchNorm2d(c_out))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x), train))
        y = self.bn2(self.conv2(y), train)
        s = self.skip_bn(self.skip(x), train) if self.project else x
        return T.relu(T.add(y, s))
