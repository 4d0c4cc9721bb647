"""Dense-tensor layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects (float64 unless a config asks
otherwise). Feature maps are ``(C, H, W)``; fully connected layers take
``(N, D)`` row batches. Each layer caches what its backward pass needs during
``forward`` and accumulates parameter gradients during ``backward``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, NumericError, ParseError

DTYPE = np.float64


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray
    grad_weights: np.ndarray = field(init=False, repr=False)
    grad_biases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_biases = np.zeros_like(self.biases)

    def zero_grad(self):
        self.grad_weights[...] = 0.0
        self.grad_biases[...] = 0.0

    def arrays(self):
        return (self.weights, self.biases)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 50000
    dropout_ratio: float = 0.6
    batch_images: int = 2
    rois_per_batch: int = 256
    max_iterations: int = 200000
    seed: int = 0
    max_grad_norm: float = math.inf   # global L2 clip; inf disables it

    def __post_init__(self):
        if not self.max_grad_norm > 0:
            raise ConfigurationError("max_grad_norm must be > 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigurationError("dropout_ratio must be in [0, 1)")
        if self.batch_images < 1:
            raise ConfigurationError("batch_images must be >= 1")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ConfigurationError("bad learning-rate schedule")

    def lr_at(self, iteration: int) -> float:
        return self.learning_rate / self.lr_decay_factor ** (iteration // self.lr_decay_every)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# ---------------------------------------------------------------- conv2d

def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0):
    """Cross-correlation of a ``(C, H, W)`` input with ``(F, C, kh, kw)`` kernels."""
    if x.ndim != 3:
        raise ConfigurationError(f"conv2d expects C x H x W input, got shape {x.shape}")
    w = params.weights
    f, c, kh, kw = w.shape
    if x.shape[0] != c:
        raise ConfigurationError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c}")
    xp = _pad(x, pad)
    hp, wp = xp.shape[1:]
    if kh > hp or kw > wp:
        raise ConfigurationError("conv2d: kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    # (Ho*Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * kh * kw)
    out = (cols @ w.reshape(f, -1).T).T.reshape(f, ho, wo) + params.biases[:, None, None]
    return out, (cols, x.shape, stride, pad, ho, wo)


def conv2d_backward(dout: np.ndarray, params: LayerParams, cache) -> np.ndarray:
    cols, xshape, stride, pad, ho, wo = cache
    w = params.weights
    f, c, kh, kw = w.shape
    d2 = dout.reshape(f, ho * wo)
    params.grad_weights += (d2 @ cols).reshape(w.shape)
    params.grad_biases += d2.sum(axis=1)
    dcols = (w.reshape(f, -1).T @ d2).reshape(c, kh, kw, ho, wo)
    hp, wp = xshape[1] + 2 * pad, xshape[2] + 2 * pad
    dxp = np.zeros((c, hp, wp), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0) -> np.ndarray:
    return conv2d_forward(x, params, stride, pad)[0]


# ---------------------------------------------------------------- max pool

def max_pool2d_forward(x: np.ndarray, window: int, stride: int | None = None):
    stride = window if stride is None else stride
    c, h, w = x.shape
    if window > h or window > w or window < 1:
        raise ConfigurationError(f"max_pool2d: window {window} does not fit {h}x{w}")
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    flat = win.reshape(c, ho, wo, window * window)
    # np.argmax returns the first maximum, i.e. row-major scan order inside the window
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, window, stride, arg)


def max_pool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    xshape, window, stride, arg = cache
    c, ho, wo = dout.shape
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    chan = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
    dx = np.zeros(xshape, dtype=dout.dtype)
    np.add.at(dx, (chan, rows, cols), dout)
    return dx


def max_pool2d(x: np.ndarray, window: int, stride: int | None = None) -> np.ndarray:
    return max_pool2d_forward(x, window, stride)[0]


# ---------------------------------------------------------------- dense ops

def fully_connected(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Affine map ``x @ W.T + b``; ``x`` may be a vector, a row batch or a feature map."""
    w = params.weights
    flat = x.reshape(1, -1) if x.ndim != 2 else x
    if flat.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"fully_connected: input length {flat.shape[1]} != weight row length {w.shape[1]}")
    out = flat @ w.T + params.biases
    return out[0] if x.ndim != 2 else out


def fully_connected_backward(dout: np.ndarray, x: np.ndarray, params: LayerParams) -> np.ndarray:
    flat = x.reshape(1, -1) if x.ndim != 2 else x
    d2 = dout.reshape(flat.shape[0], -1)
    params.grad_weights += d2.T @ flat
    params.grad_biases += d2.sum(axis=0)
    return (d2 @ params.weights).reshape(x.shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.size == 0 or scores.shape[-1] == 0:
        raise ConfigurationError("softmax of an empty vector")
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


LOG_EPS = 1e-12


def cross_entropy_loss(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise InputError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-math.log(max(float(probs[label]), LOG_EPS)))


def softmax_cross_entropy_backward(probs: np.ndarray, label: int) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax(s))`` with respect to the scores ``s``."""
    g = np.array(probs, dtype=DTYPE, copy=True)
    g[label] -= 1.0
    return g


def dropout(x: np.ndarray, ratio: float, mode: str = "train", rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is ``None`` in eval mode.

    Passing ``mask`` reuses a fixed mask instead of sampling one.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode == "eval" or ratio == 0.0:
        return x, None
    if mask is None:
        keep = 1.0 - ratio
        mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


# ---------------------------------------------------------------- layers

class Layer:
    params: LayerParams | None = None
    name = "layer"

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self):
        return [] if self.params is None else [self.params]

    def describe(self, in_shape):
        return f"{type(self).__name__}", self.output_shape(in_shape)

    def output_shape(self, in_shape):
        return in_shape


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=1, rng=None, name="conv"):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params = LayerParams(he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                                  np.zeros(out_ch, dtype=DTYPE))
        self.stride, self.pad, self.name = stride, pad, name

    def forward(self, x, train=False):
        out, self._cache = conv2d_forward(x, self.params, self.stride, self.pad)
        return out

    def backward(self, dout):
        return conv2d_backward(dout, self.params, self._cache)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        f, _, kh, kw = self.params.weights.shape
        return (f, (h + 2 * self.pad - kh) // self.stride + 1, (w + 2 * self.pad - kw) // self.stride + 1)

    def describe(self, in_shape):
        f, c, kh, kw = self.params.weights.shape
        return f"Conv2d {c}->{f} k{kh}x{kw} s{self.stride} p{self.pad}", self.output_shape(in_shape)


class MaxPool2d(Layer):
    def __init__(self, window=2, stride=None, name="pool"):
        self.window, self.stride, self.name = window, stride or window, name

    def forward(self, x, train=False):
        out, self._cache = max_pool2d_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return max_pool2d_backward(dout, self._cache)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def describe(self, in_shape):
        return f"MaxPool2d w{self.window} s{self.stride}", self.output_shape(in_shape)


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._x = x
        return relu(x)

    def backward(self, dout):
        return relu_backward(dout, self._x)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, name="fc", init_scale=1.0):
        rng = rng or np.random.default_rng(0)
        w = he_uniform(rng, (out_features, in_features), in_features) * init_scale
        self.params = LayerParams(w, np.zeros(out_features, dtype=DTYPE))
        self.name = name

    def forward(self, x, train=False):
        self._x = x
        return fully_connected(x, self.params)

    def backward(self, dout):
        return fully_connected_backward(dout, self._x, self.params)

    def output_shape(self, in_shape):
        return (self.params.weights.shape[0],)

    def describe(self, in_shape):
        o, i = self.params.weights.shape
        return f"Linear {i}->{o}", (o,)


class Dropout(Layer):
    """Inverted dropout layer. ``fixed_mask`` freezes the mask (gradient checks)."""

    def __init__(self, ratio, rng=None, name="dropout"):
        if not 0.0 <= ratio < 1.0:
            raise ConfigurationError(f"dropout ratio must be in [0, 1), got {ratio}")
        self.ratio, self.rng, self.name = ratio, rng, name
        self.fixed_mask = None
        self._mask = None

    def forward(self, x, train=False):
        out, self._mask = dropout(x, self.ratio, "train" if train else "eval", self.rng,
                                  mask=self.fixed_mask if train else None)
        return out

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def describe(self, in_shape):
        return f"Dropout p={self.ratio}", in_shape


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def describe_all(self, in_shape):
        rows = []
        for layer in self.layers:
            desc, in_shape = layer.describe(in_shape)
            rows.append((layer.name, desc, tuple(in_shape)))
        return rows, in_shape


# ---------------------------------------------------------------- optimisation

def sgd_step(params: Iterable[LayerParams], config: TrainConfig, iteration: int) -> float:
    """Plain SGD update with step decay; gradients are zeroed afterwards.

    Raises ``NumericError`` without touching any parameter if a gradient is
    not finite. When the global gradient norm exceeds ``max_grad_norm`` the
    whole step is scaled down to that norm; below it the update is untouched.
    Returns the learning rate used.
    """
    params = list(params)
    for p in params:
        check_finite(p.grad_weights, "weight gradient")
        check_finite(p.grad_biases, "bias gradient")
    lr = config.lr_at(iteration)
    if math.isfinite(config.max_grad_norm):
        norm = math.sqrt(sum(float(np.sum(p.grad_weights ** 2)) + float(np.sum(p.grad_biases ** 2)) for p in params))
        if norm > config.max_grad_norm:
            lr *= config.max_grad_norm / norm
    for p in params:
        p.weights -= lr * p.grad_weights
        p.biases -= lr * p.grad_biases
        p.zero_grad()
    return lr


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
               eps: float = 1e-5) -> float:
    """Max elementwise relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(scalar, gradient_wrt_x)``. The relative error uses
    ``max(|a|, |n|, 1e-8)`` as denominator.
    """
    x = np.array(x, dtype=DTYPE, copy=True)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(x.copy())[0]
        flat[i] = old - eps
        fm = fn(x.copy())[0]
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"WMR1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors: magic, u16 version, u32 count, then one record per tensor."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a WMR1 checkpoint", path)
    pos = 4
    try:
        version, count = struct.unpack_from("<HI", data, pos)
        pos += 6
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path)
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(DTYPE)
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint ({exc})", path) from None
    return out
