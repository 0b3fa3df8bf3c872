"""Layers with hand-written forward and backward passes (float64 numpy).

Each layer caches what its backward pass needs during ``forward``; calling
``backward`` consumes the activations of the most recent forward call.
Parameters live in ``layer.params`` and their gradients in ``layer.grads``
under the same keys.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit child seed for a (seed, key...) tuple."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.describe()})"

    def describe(self) -> str:
        return ""


class Conv1D(Layer):
    """Valid 1D cross-correlation, stride 1."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5, rng=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        fan_in = in_channels * kernel_size
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        self.params["weight"] = _uniform(rng, fan_in, (out_channels, in_channels, kernel_size))
        self.params["bias"] = _uniform(rng, fan_in, (out_channels,))

    def describe(self):
        return f"{self.in_channels}->{self.out_channels}, k={self.kernel_size}"

    def output_shape(self, shape):
        b, c, length = shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        if length < self.kernel_size:
            raise ValueError(f"input length {length} shorter than kernel {self.kernel_size}")
        return (b, self.out_channels, length - self.kernel_size + 1)

    def forward(self, x):
        self.output_shape(x.shape)
        windows = sliding_window_view(x, self.kernel_size, axis=2)  # (B, C, Lout, K)
        self._x_shape, self._windows = x.shape, windows
        out = np.tensordot(windows, self.params["weight"], axes=([1, 3], [1, 2]))  # (B, Lout, O)
        return out.transpose(0, 2, 1) + self.params["bias"][None, :, None]

    def backward(self, grad):
        w = self.params["weight"]
        self.grads["weight"] = np.tensordot(grad, self._windows, axes=([0, 2], [0, 2]))
        self.grads["bias"] = grad.sum(axis=(0, 2))
        dx = np.zeros(self._x_shape)
        lout = grad.shape[2]
        for k in range(self.kernel_size):
            dx[:, :, k:k + lout] += np.einsum("oc,bol->bcl", w[:, :, k], grad, optimize=True)
        return dx


def conv1d(x, weight, bias):
    """Functional conv1d forward."""
    layer = Conv1D(weight.shape[1], weight.shape[0], weight.shape[2])
    layer.params.update(weight=np.asarray(weight, float), bias=np.asarray(bias, float))
    return layer.forward(np.asarray(x, float))


class Conv2D(Layer):
    """2D cross-correlation, stride 1, zero padding on both spatial axes."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size=(3, 3), padding: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding = (kh, kw), padding
        fan_in = in_channels * kh * kw
        self.params["weight"] = _uniform(rng, fan_in, (out_channels, in_channels, kh, kw))
        self.params["bias"] = _uniform(rng, fan_in, (out_channels,))

    def describe(self):
        kh, kw = self.kernel_size
        return f"{self.in_channels}->{self.out_channels}, k={kh}x{kw}, pad={self.padding}"

    def output_shape(self, shape):
        b, c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        if h < 1 or w < 1:
            raise ValueError(f"spatial dims must be >= 1, got {h}x{w}")
        kh, kw = self.kernel_size
        ho, wo = h + 2 * self.padding - kh + 1, w + 2 * self.padding - kw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {kh}x{kw} does not fit padded input {h}x{w}")
        return (b, self.out_channels, ho, wo)

    def forward(self, x):
        self.output_shape(x.shape)
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, self.kernel_size, axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
        self._x_shape, self._xp_shape, self._windows = x.shape, xp.shape, windows
        out = np.tensordot(windows, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
        return out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]

    def backward(self, grad):
        w = self.params["weight"]
        self.grads["weight"] = np.tensordot(grad, self._windows, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        dxp = np.zeros(self._xp_shape)
        kh, kw = self.kernel_size
        ho, wo = grad.shape[2:]
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += np.einsum("oc,bohw->bchw", w[:, :, i, j], grad, optimize=True)
        p = self.padding
        h, wd = self._x_shape[2:]
        return dxp[:, :, p:p + h, p:p + wd]


def conv2d(x, weight, bias, padding: int = 1):
    """Functional conv2d forward."""
    layer = Conv2D(weight.shape[1], weight.shape[0], weight.shape[2:], padding)
    layer.params.update(weight=np.asarray(weight, float), bias=np.asarray(bias, float))
    return layer.forward(np.asarray(x, float))


class BatchNorm(Layer):
    """Per-channel batch normalization over batch and spatial axes (channel axis 1).

    Running statistics: ``r <- (1 - momentum) * r + momentum * batch_stat``,
    with the unbiased batch variance.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def describe(self):
        return f"{self.channels}"

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x):
        if x.shape[0] == 0:
            raise ValueError("batchnorm needs a nonempty batch")
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        axes = (0,) + tuple(range(2, x.ndim))
        nd = x.ndim
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.channels
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, nd)) * self._bcast(inv_std, nd)
        self._xhat, self._inv_std, self._axes, self._batch_stats = xhat, inv_std, axes, self.training
        return xhat * self._bcast(self.params["gamma"], nd) + self._bcast(self.params["beta"], nd)

    def backward(self, grad):
        xhat, axes, nd = self._xhat, self._axes, grad.ndim
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        dxhat = grad * self._bcast(self.params["gamma"], nd)
        inv_std = self._bcast(self._inv_std, nd)
        if not self._batch_stats:
            return dxhat * inv_std
        n = grad.size // self.channels
        sum_d = dxhat.sum(axis=axes, keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std / n * (n * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


def relu(x):
    return np.maximum(np.asarray(x, float), 0.0)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1 - rate); identity in eval mode."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else make_rng(0)

    def describe(self):
        return f"{self.rate}"

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = _uniform(rng, n_in, (n_out, n_in))
        self.params["bias"] = _uniform(rng, n_in, (n_out,))

    def describe(self):
        return f"{self.n_in}->{self.n_out}"

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.n_in:
            raise ValueError(f"linear expects (batch, {self.n_in}), got {shape}")
        return (shape[0], self.n_out)

    def forward(self, x):
        self.output_shape(x.shape)
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


def linear(x, weight, bias):
    x, weight, bias = (np.asarray(a, float) for a in (x, weight, bias))
    if x.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


class Flatten(Layer):
    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:], dtype=np.int64)))

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


def flatten(x):
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


class Sequential:
    """Ordered stack of layers sharing one dropout generator."""

    def __init__(self, layers: list[tuple[str, Layer]], rng: np.random.Generator):
        self.layers = layers
        self.rng = rng

    def __iter__(self):
        return iter(self.layers)

    def train(self):
        for _, layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for _, layer in self.layers:
            layer.training = False
        return self

    @property
    def training(self) -> bool:
        return all(layer.training for _, layer in self.layers)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.buffers.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in layer order."""
        out = {}
        for n, layer in self.layers:
            out.update({f"{n}.{k}": v for k, v in layer.params.items()})
            out.update({f"{n}.{k}": v for k, v in layer.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    v = np.asarray(state[f"{n}.{k}"], dtype=np.float64)
                    if v.shape != store[k].shape:
                        raise ValueError(f"{n}.{k}: shape {v.shape} != {store[k].shape}")
                    store[k] = v.copy()

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.parameters().values())

    def trace_shapes(self, input_shape: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
        """Shape after each layer, computed without running the layers."""
        out, shape = [], tuple(input_shape)
        for n, layer in self.layers:
            shape = layer.output_shape(shape)
            out.append((n, shape))
        return out
