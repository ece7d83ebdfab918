"""Dense float64 tensors and the differentiable layer primitives.

Everything runs at double precision.  Layers follow a functional style:
``<op>(...)`` returns ``(out, cache)`` and ``<op>_backward(dout, cache, ...)``
returns the gradient w.r.t. the input while accumulating parameter gradients
in place (``param.grad += ...``), so parameters shared between branches pick
up contributions from every use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array plus optional same-shape gradient storage."""

    __slots__ = ("data", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match data shape {self.data.shape}"
            )
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


@dataclass
class ConvParams:
    """Weights for a 2-D convolution: weight (outC, inC, kH, kW), bias (outC,)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0


@dataclass
class LinearParams:
    """Weights for an affine map: weight (D, M), bias (M,)."""

    weight: Tensor
    bias: Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def make_conv(rng, out_c, in_c, k, stride=1, pad=None) -> ConvParams:
    """Fresh conv parameters with variance-preserving init and zero bias."""
    if pad is None:
        pad = (k - 1) // 2
    fan_in = in_c * k * k
    fan_out = out_c * k * k
    w = glorot_uniform(rng, (out_c, in_c, k, k), fan_in, fan_out)
    return ConvParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(out_c), requires_grad=True),
        stride=stride,
        pad=pad,
    )


def make_linear(rng, d, m) -> LinearParams:
    w = glorot_uniform(rng, (d, m), d, m)
    return LinearParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(m), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, p: ConvParams):
    """2-D convolution on NCHW input via window gather + matmul.

    Output spatial size is floor((H + 2*pad - kH)/stride) + 1 per axis.
    """
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = p.weight.data.shape
    if c != in_c:
        raise ShapeError(f"conv2d: input has {c} channels {x.shape} but kernel expects {in_c} {p.weight.data.shape}")
    if h + 2 * p.pad < kh or w + 2 * p.pad < kw:
        raise ShapeError(f"conv2d: padded input {x.shape} smaller than kernel {p.weight.data.shape}")
    s = p.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad))) if p.pad else x
    ho = conv_out_size(h, kh, s, p.pad)
    wo = conv_out_size(w, kw, s, p.pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = p.weight.data.reshape(out_c, -1)
    out = (cols @ wmat.T + p.bias.data).reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)
    cache = (cols, x.shape, p)
    return out, cache


def conv2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    cols, x_shape, p = cache
    n, c, h, w = x_shape
    out_c, _, kh, kw = p.weight.data.shape
    s, pad = p.stride, p.pad
    _, _, ho, wo = dout.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, out_c)
    p.bias.ensure_grad()[...] += dmat.sum(axis=0)
    p.weight.ensure_grad()[...] += (dmat.T @ cols).reshape(p.weight.data.shape)
    dcols = dmat @ p.weight.data.reshape(out_c, -1)
    dc = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dc[:, :, :, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: np.ndarray, window: int, stride: int):
    """Max pooling with an argmax map; ties go to the lowest linear index."""
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} exceeds input extent {x.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    wins = np.ascontiguousarray(win).reshape(n, c, ho, wo, window * window)
    arg = wins.argmax(axis=-1)
    out = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]
    # flat indices into (h, w) of each winner, for gradient routing
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy * stride + arg // window
    cols_ = ox * stride + arg % window
    flat = rows * w + cols_
    return out, (x.shape, flat)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, flat = cache
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w))
    idx = flat.reshape(n * c, -1)
    np.add.at(dx, (np.arange(n * c)[:, None], idx), dout.reshape(n * c, -1))
    return dx.reshape(x_shape)


# ---------------------------------------------------------------------------
# elementwise / dense


def relu(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    return dout * cache


def fully_connected(x: np.ndarray, p: LinearParams):
    """Affine map on (N, D) input with (D, M) weights."""
    if x.ndim != 2 or x.shape[1] != p.weight.data.shape[0]:
        raise ShapeError(
            f"fully_connected: input {x.shape} incompatible with weights {p.weight.data.shape}"
        )
    return x @ p.weight.data + p.bias.data, (x, p)


def fully_connected_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, p = cache
    p.weight.ensure_grad()[...] += x.T @ dout
    p.bias.ensure_grad()[...] += dout.sum(axis=0)
    return dout @ p.weight.data.T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood over rows; max-subtraction stabilized.

    Returns (loss, probs, cache); the gradient w.r.t. logits is
    (probs - onehot) / N.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} for logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    probs = softmax(logits)
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean()) if n else 0.0
    return loss, probs, (probs, labels)


def softmax_cross_entropy_backward(cache) -> np.ndarray:
    probs, labels = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Sum over masked elements of the quadratic-then-linear penalty.

    f(d) = 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, with d = pred - target.
    """
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"smooth_l1: shapes differ pred={pred.shape} target={target.shape} mask={mask.shape}"
        )
    d = pred - target
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    loss = float((per * mask).sum())
    grad = np.where(a < 1.0, d, np.sign(d)) * mask
    return loss, grad


def smooth_l1_backward(dloss: float, grad: np.ndarray) -> np.ndarray:
    return dloss * grad
