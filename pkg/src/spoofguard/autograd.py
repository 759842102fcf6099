"""Dense tensors with reverse-mode differentiation.

The operator set is exactly what the two countermeasure architectures
need: conv2d, batch norm, leaky-ReLU, max-feature-map, 2x2 max pooling,
global average pooling, dense layers, dropout, reshape, residual add,
and a sigmoid + binary cross-entropy head.

Precision is whatever dtype the leaf arrays carry (float32 for training,
float64 for gradient checking). Backward passes accumulate in a fixed
deterministic order, so identical inputs give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import OddChannels, ShapeMismatch


class Tensor:
    """N-d array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Nodes are visited in exact reverse topological order of the
        recorded graph.
        """
        if self.data.size != 1:
            raise ShapeMismatch("backward() starts from a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _contig(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


# --- convolution -----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with bias over NCHW input.

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1 per axis.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects x[N,C,H,W] and w[F,C,kh,kw]")
    n, c, h, wdt = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatch(f"input channels {c} != kernel channels {cw}")
    if b.shape != (f,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({f},)")
    if h + 2 * pad < kh or wdt + 2 * pad < kw:
        raise ShapeMismatch("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1

    xp = _contig(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data)
    wd, bd = _contig(w.data), _contig(b.data)
    out = np.empty((n, f, ho, wo), dtype=x.dtype)
    kernels.conv2d_forward(xp, wd, bd, stride, out)

    def backward(g: np.ndarray) -> None:
        g = _contig(g)
        if x.requires_grad:
            dxp = np.empty_like(xp)
            kernels.conv2d_backward_dx(g, wd, stride, dxp)
            dx = dxp[:, :, pad : pad + h, pad : pad + wdt] if pad else dxp
            x.accumulate(dx)
        if w.requires_grad:
            dw = np.empty_like(wd)
            kernels.conv2d_backward_dw(g, xp, stride, dw)
            w.accumulate(dw)
        if b.requires_grad:
            db = np.empty_like(bd)
            kernels.conv2d_backward_db(g, db)
            b.accumulate(db)

    return _result(out, (x, w, b), backward)


# --- dense -----------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[N,D] @ w[D,K] + b[K]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeMismatch("dense expects x[N,D] and w[D,K]")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense shapes {x.shape} @ {w.shape} + {b.shape}")
    xd, wd, bd = _contig(x.data), _contig(w.data), _contig(b.data)
    out = np.empty((x.shape[0], w.shape[1]), dtype=x.dtype)
    kernels.dense_forward(xd, wd, bd, out)

    def backward(g: np.ndarray) -> None:
        g = _contig(g)
        if x.requires_grad:
            dx = np.empty_like(xd)
            kernels.dense_backward_dx(g, wd, dx)
            x.accumulate(dx)
        if w.requires_grad:
            dw = np.empty_like(wd)
            kernels.dense_backward_dw(xd, g, dw)
            w.accumulate(dw)
        if b.requires_grad:
            db = np.empty_like(bd)
            kernels.dense_backward_db(g, db)
            b.accumulate(db)

    return _result(out, (x, w, b), backward)


# --- activations -----------------------------------------------------------

LEAKY_SLOPE = 0.01


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    keep = x.data >= 0  # ties take the identity branch
    out = np.where(keep, x.data, x.dtype.type(alpha) * x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.where(keep, g, x.dtype.type(alpha) * g))

    return _result(out, (x,), backward)


def mfm(x: Tensor) -> Tensor:
    """Max-feature-map: split the channel axis in halves, take the max.

    Works on NCHW activations and on [N,D] dense outputs. Ties route the
    gradient to the first half.
    """
    channels = x.shape[1]
    if channels % 2:
        raise OddChannels(f"mfm needs an even channel count, got {channels}")
    half = channels // 2
    a = x.data[:, :half]
    b = x.data[:, half:]
    first = a >= b
    out = np.where(first, a, b)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, :half] = np.where(first, g, 0)
            dx[:, half:] = np.where(first, 0, g)
            x.accumulate(dx)

    return _result(out, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "mfm":
        return mfm(x)
    raise ValueError(f"unknown activation {kind!r}")


# --- pooling ---------------------------------------------------------------

def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped.

    Gradients route to the argmax; ties go to the first position in
    row-major window order.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch("max_pool2d expects NCHW")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatch("max_pool2d needs H,W >= 2")
    h2, w2 = h // 2, w // 2
    xc = x.data[:, :, : 2 * h2, : 2 * w2]
    windows = (
        xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            scat = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
            np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
            dxc = scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros_like(x.data)
            dx[:, :, : 2 * h2, : 2 * w2] = dxc.reshape(n, c, 2 * h2, 2 * w2)
            x.accumulate(dx)

    return _result(out, (x,), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over the spatial dims; returns [N,C] (the 1x1 map, flattened)."""
    if x.data.ndim != 4:
        raise ShapeMismatch("global_avg_pool2d expects NCHW")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            scale = x.dtype.type(1.0 / (h * w))
            x.accumulate(np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy())

    return _result(out, (x,), backward)


def pool2d(x: Tensor, kind: str) -> Tensor:
    if kind == "max":
        return max_pool2d(x)
    if kind == "global_avg":
        return global_avg_pool2d(x)
    raise ValueError(f"unknown pooling {kind!r}")


# --- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    return _result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(out, (a, b), backward)


# --- batch normalization -----------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class BatchNormState:
    """Running statistics, initialized to mean 0 / var 1.

    The arrays are updated in place in train mode (momentum 0.9 on the
    old value), so they can alias a model's stored buffers.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str
) -> Tensor:
    """Per-channel normalization of NCHW activations.

    Train mode normalizes by the batch statistics (biased variance) and
    updates the running stats; infer mode uses the running stats.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch("batchnorm2d expects NCHW")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must have shape ({c},)")
    eps = x.dtype.type(state.eps)

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = ((x.data - mu[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gg = g * gamma.data[None, :, None, None]
            if mode == "train":
                sum_gg = gg.sum(axis=(0, 2, 3))
                sum_gg_xhat = (gg * xhat).sum(axis=(0, 2, 3))
                dx = (
                    inv_std[None, :, None, None]
                    / count
                    * (count * gg - sum_gg[None, :, None, None] - xhat * sum_gg_xhat[None, :, None, None])
                )
            else:
                dx = gg * inv_std[None, :, None, None]
            x.accumulate(dx.astype(x.dtype, copy=False))

    return _result(out, (x, gamma, beta), backward)


# --- dropout -----------------------------------------------------------------

@dataclass
class DropoutRng:
    """Deterministic mask source: mask = f(seed, call counter)."""

    seed: int
    counter: int = 0

    def next_mask(self, shape, p: float) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.counter]))
        self.counter += 1
        return rng.random(shape) >= p


def dropout(x: Tensor, p: float, mode: str, rng: Optional[DropoutRng] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a DropoutRng")
    mask = rng.next_mask(x.shape, p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    out = x.data * mask

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * mask)

    return _result(out, (x,), backward)


# --- loss --------------------------------------------------------------------

PROB_CLAMP = 1e-7


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over sigmoid probabilities.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs; the
    backward pass is the fused stable form dlogit = (p - y)/N.
    """
    z = logits.data.reshape(-1)
    yv = np.asarray(y, dtype=z.dtype).reshape(-1)
    if yv.shape != z.shape:
        raise ShapeMismatch(f"labels {yv.shape} do not match logits {z.shape}")
    n = z.shape[0]
    p = np.clip(stable_sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(yv * np.log(p) + (1.0 - yv) * np.log1p(-p)).mean()
    out_data = np.asarray(loss, dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            dz = (p - yv) * (g.reshape(()) / n)
            logits.accumulate(dz.reshape(logits.shape).astype(logits.dtype, copy=False))

    return _result(out_data, (logits,), backward)
