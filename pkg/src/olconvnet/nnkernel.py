"""Fixed-topology network primitives with hand-written backward passes.

Arrays are plain numpy ``ndarray`` objects in channels-last layout
(``[N, H, W, C]`` for images, ``[N, D]`` for vectors). Unbatched inputs
(``[H, W, C]`` or ``[D]``) are accepted and returned unbatched. Every
function preserves the floating dtype of its input, so gradient checks can
run in float64 while training stores float32.

Convolution uses the cross-correlation convention (kernels are not flipped):

    y[n, i, j, o] = b[o] + sum_{p, q, c} x_pad[n, i + p, j + q, c] * w[p, q, c, o]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError

LAYER_KINDS = ("conv", "relu", "maxpool", "dense", "tansig", "softmax")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_h: int = 0
    kernel_w: int = 0
    in_channels: int = 0
    out_channels: int = 0
    padding: str = "valid"
    window: int = 0
    stride: int = 0
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            for name in ("kernel_h", "kernel_w", "in_channels", "out_channels"):
                if getattr(self, name) < 1:
                    raise ArgumentError(f"conv {name} must be >= 1")
            if self.padding not in ("same", "valid"):
                raise ArgumentError(f"padding must be 'same' or 'valid', got {self.padding!r}")
            if self.padding == "same" and (self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0):
                raise ArgumentError("'same' padding needs odd kernel sizes")
        elif self.kind == "maxpool":
            if self.window < 1 or self.stride < 1:
                raise ArgumentError("maxpool window and stride must be >= 1")
        elif self.kind == "dense":
            if self.in_dim < 1 or self.out_dim < 1:
                raise ArgumentError("dense in_dim and out_dim must be >= 1")

    @classmethod
    def conv(cls, kh, kw, cin, cout, padding="valid"):
        return cls("conv", kernel_h=kh, kernel_w=kw, in_channels=cin, out_channels=cout, padding=padding)

    @classmethod
    def maxpool(cls, window, stride):
        return cls("maxpool", window=window, stride=stride)

    @classmethod
    def dense(cls, in_dim, out_dim):
        return cls("dense", in_dim=in_dim, out_dim=out_dim)

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)
        if self.kind == "dense":
            return (self.in_dim, self.out_dim)
        return None

    @property
    def bias_shape(self):
        if self.kind == "conv":
            return (self.out_channels,)
        if self.kind == "dense":
            return (self.out_dim,)
        return None

    def output_shape(self, in_shape):
        """Per-sample output shape for a per-sample input shape."""
        if self.kind == "conv":
            h, w, _ = in_shape
            if self.padding == "valid":
                return (h - self.kernel_h + 1, w - self.kernel_w + 1, self.out_channels)
            return (h, w, self.out_channels)
        if self.kind == "maxpool":
            h, w, c = in_shape
            return ((h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)
        if self.kind == "dense":
            return (self.out_dim,)
        return tuple(in_shape)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ArgumentError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ArgumentError("seed must fit in 64 unsigned bits")


def glorot_uniform(rng: np.random.Generator, spec: LayerSpec, dtype=np.float32):
    """Uniform Glorot weights and zero biases for a conv or dense spec."""
    if spec.kind == "conv":
        rf = spec.kernel_h * spec.kernel_w
        fan_in, fan_out = rf * spec.in_channels, rf * spec.out_channels
    elif spec.kind == "dense":
        fan_in, fan_out = spec.in_dim, spec.out_dim
    else:
        raise ArgumentError(f"{spec.kind} layers have no parameters")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=spec.weight_shape).astype(dtype)
    return w, np.zeros(spec.bias_shape, dtype=dtype)


def _batched(x, rank):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}", axes=("rank",))
    return x, False


def _pad_amounts(spec):
    if spec.padding == "same":
        return spec.kernel_h // 2, spec.kernel_w // 2
    return 0, 0


def _check_conv(x, spec, weights, bias):
    if spec.kind != "conv":
        raise ArgumentError(f"expected conv spec, got {spec.kind}")
    if tuple(weights.shape) != spec.weight_shape:
        raise DimensionError(
            f"weights shape {tuple(weights.shape)} != {spec.weight_shape}", axes=("kernel_h", "kernel_w", "in", "out")
        )
    if bias is not None and tuple(bias.shape) != spec.bias_shape:
        raise DimensionError(f"bias shape {tuple(bias.shape)} != {spec.bias_shape}", axes=("out",))
    if x.shape[-1] != spec.in_channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, spec wants {spec.in_channels}", axes=("C",))
    if spec.padding == "valid" and (x.shape[1] < spec.kernel_h or x.shape[2] < spec.kernel_w):
        bad = tuple(a for a, n, k in (("H", x.shape[1], spec.kernel_h), ("W", x.shape[2], spec.kernel_w)) if n < k)
        raise DimensionError(f"input {x.shape[1:3]} smaller than kernel", axes=bad)


def im2col(x, spec):
    """Patch matrix of shape ``[N*H'*W', kh*kw*Cin]`` in (p, q, c) order."""
    ph, pw = _pad_amounts(spec)
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    n = x.shape[0]
    win = sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    # win: [N, H', W', C, kh, kw]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return cols, (n, ho, wo)


def conv2d_forward(x, spec: LayerSpec, weights, bias, return_cols=False):
    x, squeeze = _batched(x, 4)
    _check_conv(x, spec, weights, bias)
    cols, (n, ho, wo) = im2col(x, spec)
    y = cols @ weights.reshape(-1, spec.out_channels).astype(cols.dtype, copy=False)
    y += bias
    y = y.reshape(n, ho, wo, spec.out_channels)
    if squeeze:
        y = y[0]
    return (y, cols) if return_cols else y


def conv2d_backward(x, spec: LayerSpec, weights, grad_out, cols=None):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    ``cols`` may be the im2col matrix saved by ``conv2d_forward`` to skip
    rebuilding it.
    """
    x, squeeze = _batched(x, 4)
    g, _ = _batched(grad_out, 4)
    _check_conv(x, spec, weights, None)
    if cols is None:
        cols, (n, ho, wo) = im2col(x, spec)
    else:
        n, ho, wo = g.shape[:3]
    if g.shape != (n, ho, wo, spec.out_channels):
        raise DimensionError(f"grad_out shape {g.shape} != {(n, ho, wo, spec.out_channels)}", axes=("N", "H", "W", "C"))
    kh, kw, cin, cout = spec.weight_shape
    g2 = g.reshape(-1, cout)
    grad_w = (cols.T @ g2).reshape(spec.weight_shape)
    grad_b = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
    dcols = (g2 @ weights.reshape(-1, cout).T.astype(g.dtype, copy=False)).reshape(n, ho, wo, kh, kw, cin)
    ph, pw = _pad_amounts(spec)
    grad_pad = np.zeros((n, x.shape[1] + 2 * ph, x.shape[2] + 2 * pw, cin), dtype=dcols.dtype)
    for p in range(kh):
        for q in range(kw):
            grad_pad[:, p:p + ho, q:q + wo, :] += dcols[:, :, :, p, q, :]
    grad_x = grad_pad[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :]
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """Subgradient at exactly zero is taken as 0."""
    return np.where(x > 0, grad_out, 0).astype(np.result_type(grad_out), copy=False)


def maxpool_forward(x, window: int, stride: int):
    """Return ``(y, argmax)``; ``argmax`` holds the row-major in-window index.

    Ties go to the first maximum in row-major order.
    """
    x, squeeze = _batched(x, 4)
    if window < 1 or stride < 1:
        raise ArgumentError("window and stride must be >= 1")
    if x.shape[1] < window or x.shape[2] < window:
        bad = tuple(a for a, n in (("H", x.shape[1]), ("W", x.shape[2])) if n < window)
        raise DimensionError(f"pool window {window} exceeds input {x.shape[1:3]}", axes=bad)
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, window * window)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    amap = PoolIndex(idx.astype(np.int32), x.shape, window, stride)
    if squeeze:
        return y[0], amap
    return y, amap


@dataclass
class PoolIndex:
    """Argmax positions from a max-pool forward pass."""

    index: np.ndarray
    input_shape: tuple
    window: int
    stride: int


def maxpool_backward(argmax: PoolIndex, grad_out):
    g, squeeze = _batched(grad_out, 4)
    if g.shape != argmax.index.shape:
        raise DimensionError(f"grad_out shape {g.shape} != pooled shape {argmax.index.shape}")
    n, ho, wo, c = g.shape
    s, k = argmax.stride, argmax.window
    grad_x = np.zeros(argmax.input_shape, dtype=g.dtype)
    # overlapping windows accumulate
    for p in range(k):
        for q in range(k):
            hit = argmax.index == p * k + q
            grad_x[:, p:p + s * (ho - 1) + 1:s, q:q + s * (wo - 1) + 1:s, :] += np.where(hit, g, 0)
    return grad_x[0] if squeeze else grad_x


def dense_forward(x, weights, bias):
    x, squeeze = _batched(x, 2)
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"input dim {x.shape[1]} does not match weights {weights.shape}", axes=("in_dim",))
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[1]},)", axes=("out_dim",))
    y = x @ weights.astype(x.dtype, copy=False) + bias
    return y[0] if squeeze else y


def dense_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x, squeeze = _batched(x, 2)
    g, _ = _batched(grad_out, 2)
    if g.shape != (x.shape[0], weights.shape[1]):
        raise DimensionError(f"grad_out shape {g.shape} incompatible with weights {weights.shape}")
    grad_w = x.T @ g
    grad_b = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
    grad_x = g @ weights.T.astype(g.dtype, copy=False)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def tansig(x):
    """Bounded sigmoid ``2 / (1 + exp(-2x)) - 1`` (numerically equal to tanh)."""
    x = np.asarray(x)
    # the exp form overflows for large negative x; tanh is the same function
    return np.tanh(x)


def tansig_backward(y, grad_out):
    return grad_out * (1 - y * y)


def softmax(scores):
    s = np.asarray(scores)
    if s.shape[-1] < 2:
        raise DimensionError("softmax needs at least 2 classes", axes=("k",))
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _labels_index(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ArgumentError(f"labels must lie in 1..{k}")
    return labels.astype(np.int64) - 1


def cross_entropy(probs, labels):
    """Per-sample ``-ln p_true`` with ``p`` clamped at 1e-12.

    ``labels`` are 1-based. Returns a scalar for a single probability row,
    an array of losses otherwise.
    """
    p = np.asarray(probs)
    single = p.ndim == 1
    p2 = p[None] if single else p
    idx = _labels_index(np.atleast_1d(labels), p2.shape[1])
    if idx.shape[0] != p2.shape[0]:
        raise DimensionError("one label per probability row required")
    pt = p2[np.arange(p2.shape[0]), idx].astype(np.float64)
    loss = -np.log(np.maximum(pt, PROB_FLOOR))
    return float(loss[0]) if single else loss


def cross_entropy_grad(probs, labels):
    """Gradient of the summed loss w.r.t. the pre-softmax scores: ``p - onehot``."""
    p = np.asarray(probs)
    single = p.ndim == 1
    p2 = p[None] if single else p
    idx = _labels_index(np.atleast_1d(labels), p2.shape[1])
    g = p2.copy()
    g[np.arange(p2.shape[0]), idx] -= 1
    return g[0] if single else g


def sgd_step(weights, grads, lr: float):
    """Plain SGD, ``w - lr * g``; returns a new array."""
    if lr < 0:
        raise ArgumentError("learning rate must be non-negative")
    if np.shape(weights) != np.shape(grads):
        raise DimensionError(f"weights {np.shape(weights)} and grads {np.shape(grads)} differ")
    w = np.asarray(weights)
    return (w - np.asarray(lr, dtype=w.dtype) * np.asarray(grads).astype(w.dtype, copy=False)).astype(w.dtype, copy=False)
