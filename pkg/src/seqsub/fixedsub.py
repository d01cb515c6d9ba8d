"""Fixed-length subsampling and upsampling operators.

Average pooling, frame concatenation, strided convolution, frame repetition,
and transposed convolution, each with an explicit reverse-mode VJP. The
convolution kernels here are also reused by the variable-length subsampler's
weight predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seqcore import FrameSequence


@dataclass(frozen=True)
class ConvParams:
    """Strided 1-D convolution parameters; kernel size equals the stride."""

    weights: np.ndarray  # (C_out, C_in, k)
    bias: np.ndarray  # (C_out,)
    stride: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 3:
            raise ValueError("weights must have shape (C_out, C_in, k)")
        if b.shape != (w.shape[0],):
            raise ValueError("bias must have shape (C_out,)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite convolution parameters")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if w.shape[2] != self.stride:
            raise ValueError("subsampling convolution requires kernel == stride")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class DeconvParams:
    """Transposed-convolution parameters; kernel size equals the stride."""

    weights: np.ndarray  # (C_in, C_out, k)
    bias: np.ndarray  # (C_out,)
    stride: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 3:
            raise ValueError("weights must have shape (C_in, C_out, k)")
        if b.shape != (w.shape[1],):
            raise ValueError("bias must have shape (C_out,)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite deconvolution parameters")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if w.shape[2] != self.stride:
            raise ValueError("upsampling deconvolution requires kernel == stride")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


def init_conv_params(rng: np.random.Generator, c_in: int, c_out: int, stride: int) -> ConvParams:
    scale = 1.0 / math.sqrt(c_in * stride)
    return ConvParams(
        weights=rng.normal(0.0, scale, size=(c_out, c_in, stride)),
        bias=np.zeros(c_out),
        stride=stride,
    )


def init_deconv_params(rng: np.random.Generator, c_in: int, c_out: int, stride: int) -> DeconvParams:
    scale = 1.0 / math.sqrt(c_in)
    return DeconvParams(
        weights=rng.normal(0.0, scale, size=(c_in, c_out, stride)),
        bias=np.zeros(c_out),
        stride=stride,
    )


# ---------------------------------------------------------------------------
# pooling / repetition kernels
# ---------------------------------------------------------------------------

def avg_pool_forward(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean over windows of ``factor`` frames; trailing partial window is
    averaged over the frames present."""
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    T = x.shape[0]
    n_out = -(-T // factor)
    out = np.empty((n_out, x.shape[1]), dtype=np.float64)
    for j in range(n_out):
        out[j] = x[j * factor : min((j + 1) * factor, T)].mean(axis=0)
    return out


def avg_pool_vjp(g: np.ndarray, T: int, factor: int) -> np.ndarray:
    dx = np.empty((T, g.shape[1]), dtype=np.float64)
    for j in range(g.shape[0]):
        start = j * factor
        stop = min(start + factor, T)
        dx[start:stop] = g[j] / (stop - start)
    return dx


def concat_pool_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    T, D = x.shape
    if T < factor:
        raise ValueError(f"cannot concatenate {factor} frames from a length-{T} sequence")
    n_out = T // factor
    return x[: n_out * factor].reshape(n_out, factor * D)


def repeat_forward(y: np.ndarray, factor: int, target_len: int) -> np.ndarray:
    if -(-target_len // factor) != y.shape[0]:
        raise ValueError(
            f"repeat length mismatch: ceil({target_len}/{factor}) != {y.shape[0]}"
        )
    idx = np.arange(target_len) // factor
    return y[idx]


def repeat_vjp(g: np.ndarray, factor: int, n_in: int) -> np.ndarray:
    dy = np.zeros((n_in, g.shape[1]), dtype=np.float64)
    idx = np.arange(g.shape[0]) // factor
    np.add.at(dy, idx, g)
    return dy


# ---------------------------------------------------------------------------
# convolution kernels (shared with the CIF weight predictor)
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """1-D convolution over a (T, C_in) sequence with symmetric zero padding."""
    T, c_in = x.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ValueError(f"conv expects {c_in_w} input channels, got {c_in}")
    if T + 2 * pad < k:
        raise ValueError(f"sequence of length {T} too short for kernel {k}")
    xp = np.pad(x, ((pad, pad), (0, 0))) if pad else x
    n_out = (T + 2 * pad - k) // stride + 1
    win = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[win].reshape(n_out, k * c_in)
    w_mat = w.transpose(0, 2, 1).reshape(c_out, k * c_in)
    return cols @ w_mat.T + b


def conv1d_vjp(g, x, w, stride: int, pad: int):
    """Returns (dx, dw, db) for conv1d_forward."""
    T, c_in = x.shape
    c_out, _, k = w.shape
    n_out = g.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0))) if pad else x
    win = np.arange(n_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[win].reshape(n_out, k * c_in)
    w_mat = w.transpose(0, 2, 1).reshape(c_out, k * c_in)
    db = g.sum(axis=0)
    dw = (g.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1)
    dcols = (g @ w_mat).reshape(n_out, k, c_in)
    dxp = np.zeros_like(xp)
    np.add.at(dxp, win, dcols)
    dx = dxp[pad : pad + T] if pad else dxp
    return dx, dw, db


def deconv1d_forward(y: np.ndarray, w: np.ndarray, b: np.ndarray, target_len: int) -> np.ndarray:
    """Transposed convolution with kernel == stride (non-overlapping blocks),
    truncated or zero-padded to ``target_len``."""
    n_in, c_in = y.shape
    c_in_w, c_out, k = w.shape
    if c_in_w != c_in:
        raise ValueError(f"deconv expects {c_in_w} input channels, got {c_in}")
    natural = (y @ w.reshape(c_in, c_out * k)).reshape(n_in, c_out, k)
    natural = natural.transpose(0, 2, 1).reshape(n_in * k, c_out) + b
    if target_len <= natural.shape[0]:
        return natural[:target_len].copy()
    out = np.zeros((target_len, c_out), dtype=np.float64)
    out[: natural.shape[0]] = natural
    return out


def deconv1d_vjp(g, y, w):
    """Returns (dy, dw, db) for deconv1d_forward."""
    n_in, c_in = y.shape
    _, c_out, k = w.shape
    natural_len = n_in * k
    gn = np.zeros((natural_len, c_out), dtype=np.float64)
    kept = min(g.shape[0], natural_len)
    gn[:kept] = g[:kept]
    db = gn.sum(axis=0)
    g_blocks = gn.reshape(n_in, k, c_out).transpose(0, 2, 1).reshape(n_in, c_out * k)
    dy = g_blocks @ w.reshape(c_in, c_out * k).T
    dw = (y.T @ g_blocks).reshape(c_in, c_out, k)
    return dy, dw, db


# ---------------------------------------------------------------------------
# public FrameSequence operators
# ---------------------------------------------------------------------------

def avg_pool(x: FrameSequence, factor: int) -> FrameSequence:
    """Average pooling with stride ``factor``; output length ceil(T/factor)."""
    return FrameSequence(
        data=avg_pool_forward(x.data, factor),
        frame_period_ms=x.frame_period_ms * factor,
    )


def concat_pool(x: FrameSequence, factor: int) -> FrameSequence:
    """Concatenate each run of ``factor`` frames; leftover frames are dropped."""
    return FrameSequence(
        data=concat_pool_forward(x.data, factor),
        frame_period_ms=x.frame_period_ms * factor,
    )


def strided_conv(x: FrameSequence, p: ConvParams) -> FrameSequence:
    """Convolution subsampling: no padding, kernel == stride tiles the input."""
    if x.num_frames < p.kernel:
        raise ValueError("sequence shorter than the convolution kernel")
    return FrameSequence(
        data=conv1d_forward(x.data, p.weights, p.bias, p.stride, pad=0),
        frame_period_ms=x.frame_period_ms * p.stride,
    )


def strided_conv_backward(x: FrameSequence, p: ConvParams, grad_out: np.ndarray):
    """Gradients of a scalar loss wrt input and parameters; ``grad_out`` is
    the upstream gradient at the subsampled output."""
    return conv1d_vjp(grad_out, x.data, p.weights, p.stride, pad=0)


def repeat_upsample(y: FrameSequence, factor: int, target_len: int) -> FrameSequence:
    """Duplicate each frame ``factor`` times, truncating to ``target_len``."""
    return FrameSequence(
        data=repeat_forward(y.data, factor, target_len),
        frame_period_ms=y.frame_period_ms / factor,
    )


def deconv_upsample(y: FrameSequence, p: DeconvParams, target_len: int) -> FrameSequence:
    """Transposed-convolution upsampling to exactly ``target_len`` frames."""
    return FrameSequence(
        data=deconv1d_forward(y.data, p.weights, p.bias, target_len),
        frame_period_ms=y.frame_period_ms / p.stride,
    )


def deconv_upsample_backward(y: FrameSequence, p: DeconvParams, grad_out: np.ndarray):
    return deconv1d_vjp(grad_out, y.data, p.weights)


# ---------------------------------------------------------------------------
# tape wrappers
# ---------------------------------------------------------------------------

def avg_pool_v(x: ad.Var, factor: int) -> ad.Var:
    T = x.value.shape[0]
    out = avg_pool_forward(x.value, factor)
    return ad.custom(out, (x,), lambda g: (avg_pool_vjp(g, T, factor),))


def repeat_v(y: ad.Var, factor: int, target_len: int) -> ad.Var:
    n_in = y.value.shape[0]
    out = repeat_forward(y.value, factor, target_len)
    return ad.custom(out, (y,), lambda g: (repeat_vjp(g, factor, n_in),))


def conv1d_v(x: ad.Var, w: ad.Var, b: ad.Var, stride: int, pad: int) -> ad.Var:
    out = conv1d_forward(x.value, w.value, b.value, stride, pad)
    return ad.custom(
        out, (x, w, b), lambda g: conv1d_vjp(g, x.value, w.value, stride, pad)
    )


def deconv1d_v(y: ad.Var, w: ad.Var, b: ad.Var, target_len: int) -> ad.Var:
    out = deconv1d_forward(y.value, w.value, b.value, target_len)
    return ad.custom(out, (y, w, b), lambda g: deconv1d_vjp(g, y.value, w.value))
