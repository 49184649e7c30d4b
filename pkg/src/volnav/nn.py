"""Minimal dense/conv3d network engine with hand-written backward rules.

Everything runs on float64 numpy arrays. Layers are stateless beyond their
parameters: ``forward`` returns the output plus an explicit cache, and
``backward`` consumes that cache, accumulates into each ``ParamTensor.grad``
and returns the gradient with respect to the layer input. Batch axis first
everywhere.
"""

from __future__ import annotations

import struct
from itertools import product
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError

CHECKPOINT_MAGIC = b"VNCK"
CHECKPOINT_VERSION = 1


class ParamTensor:
    """Named parameter array with a matching gradient buffer."""

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.values.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    label = "layer"

    def params(self) -> list[ParamTensor]:
        return []

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        self.label = name
        self.n_in, self.n_out = n_in, n_out
        self.w = ParamTensor(f"{name}.w", glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.b = ParamTensor(f"{name}.b", np.zeros(n_out))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ConfigurationError(
                f"{self.label}: expected input (batch, {self.n_in}), got {x.shape}"
            )
        return x @ self.w.values + self.b.values, x

    def backward(self, cache, grad_out):
        x = cache
        self.w.grad += x.T @ grad_out
        self.b.grad += grad_out.sum(axis=0)
        return grad_out @ self.w.values.T


class Relu(Layer):
    label = "relu"

    def forward(self, x):
        y = np.maximum(x, 0.0)
        return y, (x > 0.0)

    def backward(self, cache, grad_out):
        return grad_out * cache


class Tanh(Layer):
    label = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, grad_out):
        return grad_out * (1.0 - cache * cache)


class Conv3d(Layer):
    """Valid (unpadded) 3D convolution with cubic kernel and uniform stride."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator, name: str = "conv3d"):
        self.label = name
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        fan_in = c_in * kernel ** 3
        fan_out = c_out * kernel ** 3
        self.w = ParamTensor(
            f"{name}.w", glorot_uniform(rng, (c_out, c_in, kernel, kernel, kernel), fan_in, fan_out)
        )
        self.b = ParamTensor(f"{name}.b", np.zeros(c_out))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        k, s = self.kernel, self.stride
        if x.ndim != 5 or x.shape[1] != self.c_in:
            raise ConfigurationError(
                f"{self.label}: expected input (batch, {self.c_in}, D, H, W), got {x.shape}"
            )
        if min(x.shape[2:]) < k:
            raise ConfigurationError(
                f"{self.label}: spatial dims {x.shape[2:]} smaller than kernel {k}"
            )
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::s, ::s, ::s]
        y = np.einsum("bcdhwijk,ocijk->bodhw", win, self.w.values, optimize=True)
        y += self.b.values[None, :, None, None, None]
        return y, (x, win)

    def backward(self, cache, grad_out):
        x, win = cache
        k, s = self.kernel, self.stride
        self.w.grad += np.einsum("bodhw,bcdhwijk->ocijk", grad_out, win, optimize=True)
        self.b.grad += grad_out.sum(axis=(0, 2, 3, 4))
        dx = np.zeros_like(x)
        _, _, do, ho, wo = grad_out.shape
        for a, b, c in product(range(k), range(k), range(k)):
            patch = np.einsum("bodhw,oc->bcdhw", grad_out, self.w.values[:, :, a, b, c],
                              optimize=True)
            dx[:, :, a:a + s * do:s, b:b + s * ho:s, c:c + s * wo:s] += patch
        return dx


class GlobalAvgPool3d(Layer):
    label = "global-avg-pool"

    def forward(self, x):
        if x.ndim != 5:
            raise ConfigurationError(f"{self.label}: expected (batch, C, D, H, W), got {x.shape}")
        return x.mean(axis=(2, 3, 4)), x.shape

    def backward(self, cache, grad_out):
        shape = cache
        n = shape[2] * shape[3] * shape[4]
        return np.broadcast_to(
            grad_out[:, :, None, None, None], shape
        ).copy() / n


class L2Normalize(Layer):
    label = "l2-normalize"

    def forward(self, x):
        if x.ndim != 2:
            raise ConfigurationError(f"{self.label}: expected (batch, dim), got {x.shape}")
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise NumericError(f"{self.label}: zero-norm row cannot be normalized")
        y = x / norms
        return y, (y, norms)

    def backward(self, cache, grad_out):
        y, norms = cache
        # component of the gradient along y drops out: d(x/|x|) is a projector
        return (grad_out - y * np.sum(grad_out * y, axis=1, keepdims=True)) / norms


class Network:
    """A plain layer sequence with explicit forward caches."""

    def __init__(self, layers: list[Layer], name: str = "net"):
        self.name = name
        self.layers = list(layers)

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad_out: np.ndarray) -> np.ndarray:
        if caches is None or len(caches) != len(self.layers):
            raise ValueError(f"{self.name}: backward called without a matching forward cache")
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(cache, grad_out)
        return grad_out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


class AdamW:
    """Adam with decoupled weight decay. Grads are left for the caller to zero."""

    def __init__(self, params: list[ParamTensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate parameter names: {sorted(names)}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.values -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                   + self.weight_decay * p.values)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def save_checkpoint(path: str | Path, params: list[ParamTensor]) -> None:
    """Header (magic, version, name/shape manifest) then little-endian doubles."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", p.values.ndim))
        chunks.append(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
    for p in params:
        chunks.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        manifest.append((name, tuple(shape)))
    out: dict[str, np.ndarray] = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        out[name] = arr.astype(np.float64)
    if offset != len(data):
        raise ConfigurationError(f"{path}: trailing bytes after checkpoint payload")
    return out


def load_params(path: str | Path, params: list[ParamTensor]) -> None:
    """Assign checkpoint values into existing parameters, matching by name."""
    stored = load_checkpoint(path)
    for p in params:
        if p.name not in stored:
            raise ConfigurationError(f"checkpoint missing parameter {p.name!r}")
        if stored[p.name].shape != p.values.shape:
            raise ConfigurationError(
                f"checkpoint shape {stored[p.name].shape} != expected {p.values.shape} "
                f"for {p.name!r}"
            )
        p.values[...] = stored[p.name]
