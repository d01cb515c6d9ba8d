"""Variable-length subsampling with continuous integrate-and-fire.

A weight predictor (conv -> activation -> linear -> sigmoid) emits one
nonnegative weight per frame; the running sum of the weights fires a segment
boundary whenever it crosses an integer, splitting the boundary frame's
weight between the closing and opening segments. Segment representations are
weighted averages of the frames in each segment.

Gradients flow through the pooling weights, which are piecewise-linear
functions of the per-frame weights; the firing positions themselves are
treated as constants of the backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fixedsub import conv1d_forward, conv1d_vjp
from .seqcore import AlphaSequence, FrameSequence, FormatError, Segmentation, SegmentWeights

CIF_MAGIC = b"CIF1"

_ACTIVATIONS = {
    "relu": (lambda h: np.maximum(h, 0.0), lambda h: (h > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda h: 1.0 - np.tanh(h) ** 2),
}


@dataclass(frozen=True)
class CifParams:
    """Weight-predictor parameters: 1-D conv (stride 1, odd kernel, same
    padding) followed by a linear projection to one logit per frame."""

    conv_weights: np.ndarray  # (channels, D, kernel)
    conv_bias: np.ndarray  # (channels,)
    proj_weights: np.ndarray  # (channels,)
    proj_bias: float
    activation: str = "relu"

    def __post_init__(self):
        cw = np.asarray(self.conv_weights, dtype=np.float64)
        cb = np.asarray(self.conv_bias, dtype=np.float64)
        pw = np.asarray(self.proj_weights, dtype=np.float64)
        if cw.ndim != 3:
            raise ValueError("conv_weights must have shape (channels, D, kernel)")
        if cw.shape[2] % 2 != 1:
            raise ValueError("kernel width must be odd for same-length output")
        if cb.shape != (cw.shape[0],) or pw.shape != (cw.shape[0],):
            raise ValueError("bias/projection shapes do not match channel count")
        arrays = (cw, cb, pw, np.float64(self.proj_bias))
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("non-finite CIF parameters")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "conv_weights", cw)
        object.__setattr__(self, "conv_bias", cb)
        object.__setattr__(self, "proj_weights", pw)
        object.__setattr__(self, "proj_bias", float(self.proj_bias))

    @property
    def channels(self) -> int:
        return self.conv_weights.shape[0]

    @property
    def dim(self) -> int:
        return self.conv_weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.conv_weights.shape[2]


def init_cif_params(
    rng: np.random.Generator,
    dim: int,
    channels: int = 512,
    kernel: int = 5,
    activation: str = "relu",
) -> CifParams:
    scale = 1.0 / np.sqrt(dim * kernel)
    return CifParams(
        conv_weights=rng.normal(0.0, scale, size=(channels, dim, kernel)),
        conv_bias=np.zeros(channels),
        proj_weights=rng.normal(0.0, 1.0 / np.sqrt(channels), size=channels),
        proj_bias=0.0,
        activation=activation,
    )


@dataclass(frozen=True)
class FireTrace:
    """Everything integrate-and-fire produced for one weight sequence.

    ``weights`` is authoritative for segment membership; ``segmentation``
    reports the end frame of each segment and collapses the rare case where
    a trailing segment shares its end frame with the final fired boundary
    (two segments cannot end on the same frame of a strictly increasing
    boundary list). ``segmentation`` is None only when nothing was emitted.
    """

    segmentation: Segmentation | None
    weights: SegmentWeights
    cumulative: np.ndarray
    fired: np.ndarray  # 1-based boundary frames of fired segments

    @property
    def num_segments(self) -> int:
        return self.weights.num_segments

    @property
    def total_len(self) -> int:
        return self.cumulative.shape[0]


def integrate_and_fire(alpha: AlphaSequence) -> FireTrace:
    """Accumulate weights and fire a boundary at every integer crossing.

    The boundary frame's weight is split: the part below the integer closes
    the current segment, the leftover opens the next one. A trailing segment
    is emitted only when at least half a unit of mass remains after the last
    fire; smaller leftovers are recorded as residual and assigned nowhere.
    Raises if a single frame would cross more than one integer (cannot
    happen for sigmoid-produced weights).
    """
    values = alpha.values
    acc = 0.0
    current: list[tuple[int, float]] = []
    segments: list[list[tuple[int, float]]] = []
    fired: list[int] = []
    for t, v in enumerate(values, start=1):
        acc += v
        if acc >= 1.0:
            carry = acc - 1.0
            if carry >= 1.0:
                raise ValueError(
                    f"alpha[{t}]={v} crosses more than one integer in a single frame"
                )
            current.append((t, v - carry))
            segments.append(current)
            fired.append(t)
            current = [(t, carry)] if carry > 0.0 else []
            acc = carry
        else:
            current.append((t, v))

    residual = acc
    trailing = residual >= 0.5
    if trailing:
        segments.append(current)

    weights = SegmentWeights(segments=segments, residual=residual, trailing_emitted=trailing)
    T = len(values)
    bounds = list(fired)
    if trailing and (not bounds or bounds[-1] < T):
        bounds.append(T)
    segmentation = (
        Segmentation(boundaries=np.asarray(bounds, dtype=np.int64), total_len=T)
        if bounds
        else None
    )
    return FireTrace(
        segmentation=segmentation,
        weights=weights,
        cumulative=np.cumsum(values),
        fired=np.asarray(fired, dtype=np.int64),
    )


def _pool_matrix_rows(x: np.ndarray, weights: SegmentWeights) -> np.ndarray:
    rows = []
    for k, seg in enumerate(weights.segments):
        row = np.zeros(x.shape[1], dtype=np.float64)
        for t, w in seg:
            row += w * x[t - 1]
        if weights.trailing_emitted and k == len(weights.segments) - 1:
            row /= weights.residual
        rows.append(row)
    return np.stack(rows)


def segment_pool(x: FrameSequence, trace: FireTrace) -> FrameSequence:
    """Weighted average of the frames in each segment of ``trace``.

    Fired segments need no normalization (their weights sum to 1); the
    trailing segment is normalized by its raw weight sum. The output frame
    period is the average input period per segment, bookkeeping only.
    """
    if trace.total_len != x.num_frames:
        raise ValueError("trace length does not match the sequence")
    K = trace.num_segments
    if K == 0:
        raise ValueError("empty segmentation: no segment fired and residual < 0.5")
    return FrameSequence(
        data=_pool_matrix_rows(x.data, trace.weights),
        frame_period_ms=x.frame_period_ms * x.num_frames / K,
    )


def shared_alpha_pool(u_teacher: FrameSequence, trace: FireTrace) -> FrameSequence:
    """Apply the student's pooling weights, unchanged, to teacher features."""
    if u_teacher.num_frames != trace.total_len:
        raise ValueError(
            f"teacher length {u_teacher.num_frames} != trace length {trace.total_len}"
        )
    return segment_pool(u_teacher, trace)


def mean_segment_pool(x: FrameSequence, seg: Segmentation) -> FrameSequence:
    """Plain average pooling within provided segments (oracle-boundary mode)."""
    if seg.total_len != x.num_frames:
        raise ValueError("segmentation length does not match the sequence")
    rows = [x.data[s:e].mean(axis=0) for s, e in seg.segment_slices()]
    return FrameSequence(
        data=np.stack(rows),
        frame_period_ms=x.frame_period_ms * x.num_frames / seg.num_segments,
    )


# ---------------------------------------------------------------------------
# weight prediction
# ---------------------------------------------------------------------------

def predict_alpha(x: FrameSequence, p: CifParams) -> AlphaSequence:
    """sigmoid(linear(act(conv(x)))), one weight per frame (same padding)."""
    pad = (p.kernel - 1) // 2
    h = conv1d_forward(x.data, p.conv_weights, p.conv_bias, stride=1, pad=pad)
    act, _ = _ACTIVATIONS[p.activation]
    logits = act(h) @ p.proj_weights + p.proj_bias
    return AlphaSequence(values=1.0 / (1.0 + np.exp(-logits)))


def predict_alpha_backward(x: FrameSequence, p: CifParams, grad_alpha: np.ndarray):
    """Gradients of a scalar loss wrt input and parameters given the upstream
    gradient at the predicted weights. Returns (dx, dparams dict)."""
    pad = (p.kernel - 1) // 2
    h = conv1d_forward(x.data, p.conv_weights, p.conv_bias, stride=1, pad=pad)
    act, dact = _ACTIVATIONS[p.activation]
    a = act(h)
    logits = a @ p.proj_weights + p.proj_bias
    s = 1.0 / (1.0 + np.exp(-logits))
    dlogits = grad_alpha * s * (1.0 - s)
    da = np.outer(dlogits, p.proj_weights)
    dh = da * dact(h)
    dx, dcw, dcb = conv1d_vjp(dh, x.data, p.conv_weights, stride=1, pad=pad)
    dparams = {
        "conv_weights": dcw,
        "conv_bias": dcb,
        "proj_weights": a.T @ dlogits,
        "proj_bias": float(np.sum(dlogits)),
    }
    return dx, dparams


# ---------------------------------------------------------------------------
# backward through the pooling weights
# ---------------------------------------------------------------------------

def firing_fingerprint(trace: FireTrace) -> tuple:
    """Structural identity of a trace: segment frame memberships and whether
    a trailing segment was emitted. Perturbations that change this are
    outside the differentiable regime."""
    return (
        tuple(tuple(t for t, _ in seg) for seg in trace.weights.segments),
        trace.weights.trailing_emitted,
    )


def segment_pool_vjp(grad_out: np.ndarray, x: np.ndarray, trace: FireTrace):
    """Gradients of pooled output wrt the frames and the per-frame weights.

    The pooling weights are affine in alpha for fired segments (interior
    weight alpha_t, opening weight = prefix excess, closing weight =
    integer minus prefix); the trailing segment adds a 1/residual
    normalization. Returns (dx, dalpha).
    """
    T = trace.total_len
    weights = trace.weights
    fired = trace.fired
    dx = np.zeros_like(x)
    point = np.zeros(T)  # direct dependence on alpha_t
    prefix = np.zeros(T)  # prefix[j] applies to every alpha_i with i <= j+1

    n_fired = fired.shape[0]
    for k, seg in enumerate(weights.segments):
        g = grad_out[k]
        is_trailing = weights.trailing_emitted and k == len(weights.segments) - 1
        inv = 1.0 / weights.residual if is_trailing else 1.0
        for t, w in seg:
            dx[t - 1] += (w * inv) * g
        dots = [float(g @ x[t - 1]) for t, _ in seg]
        if is_trailing:
            pooled = sum(w * x[t - 1] for t, w in seg) / weights.residual
            start = 0
            if n_fired and seg[0][0] == fired[-1]:
                # opening carry = prefix(fired[-1]) - n_fired
                prefix[fired[-1] - 1] += dots[0] * inv
                start = 1
            for (t, _), d in zip(seg[start:], dots[start:]):
                point[t - 1] += d * inv
            # normalization: residual = prefix(T) - n_fired
            prefix[T - 1] -= float(g @ pooled) * inv
        else:
            boundary = fired[k]
            start = 0
            if k > 0 and seg[0][0] == fired[k - 1]:
                # opening carry = prefix(fired[k-1]) - k
                prefix[fired[k - 1] - 1] += dots[0]
                start = 1
            for (t, _), d in zip(seg[start:-1], dots[start:-1]):
                point[t - 1] += d
            # closing weight = (k+1) - prefix(boundary - 1)
            if boundary >= 2:
                prefix[boundary - 2] -= dots[-1]

    dalpha = point + np.cumsum(prefix[::-1])[::-1]
    return dx, dalpha


def cif_subsample(x: FrameSequence, p: CifParams):
    """Full forward pass: predict weights, fire, pool.

    Returns (pooled FrameSequence, AlphaSequence, FireTrace).
    """
    alpha = predict_alpha(x, p)
    trace = integrate_and_fire(alpha)
    pooled = segment_pool(x, trace)
    return pooled, alpha, trace


def cif_backward(
    x: FrameSequence,
    p: CifParams,
    alpha: AlphaSequence,
    trace: FireTrace,
    grad_pooled: np.ndarray,
    extra_grad_alpha: np.ndarray | None = None,
):
    """Backward through pooling and weight prediction.

    ``extra_grad_alpha`` carries gradients reaching alpha from elsewhere
    (guidance losses, teacher-side pooling). Returns (dx, dalpha, dparams)
    where dalpha is the total gradient at the predicted weights.
    """
    pool_dx, dalpha = segment_pool_vjp(grad_pooled, x.data, trace)
    if extra_grad_alpha is not None:
        dalpha = dalpha + extra_grad_alpha
    pred_dx, dparams = predict_alpha_backward(x, p, dalpha)
    return pool_dx + pred_dx, dalpha, dparams


# ---------------------------------------------------------------------------
# tape wrappers
# ---------------------------------------------------------------------------

def predict_alpha_v(x: ad.Var, conv_w: ad.Var, conv_b: ad.Var, proj_w: ad.Var,
                    proj_b: ad.Var, activation: str = "relu") -> ad.Var:
    from .fixedsub import conv1d_v

    pad = (conv_w.value.shape[2] - 1) // 2
    h = conv1d_v(x, conv_w, conv_b, stride=1, pad=pad)
    if activation == "relu":
        a = ad.relu(h)
    elif activation == "tanh":
        a = ad.tanh(h)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return ad.sigmoid(ad.affine_vec(a, proj_w, proj_b))


def segment_pool_v(x: ad.Var, alpha: ad.Var, trace: FireTrace) -> ad.Var:
    out = _pool_matrix_rows(x.value, trace.weights)

    def vjp(g):
        return segment_pool_vjp(g, x.value, trace)

    return ad.custom(out, (x, alpha), vjp)


def shared_alpha_pool_v(u_teacher: np.ndarray, alpha: ad.Var, trace: FireTrace) -> ad.Var:
    """Teacher-side pooling: gradient flows to alpha only, never the teacher."""
    out = _pool_matrix_rows(u_teacher, trace.weights)

    def vjp(g):
        _, dalpha = segment_pool_vjp(g, u_teacher, trace)
        return (dalpha,)

    return ad.custom(out, (alpha,), vjp)


def mean_segment_pool_v(x: ad.Var, seg: Segmentation) -> ad.Var:
    slices = seg.segment_slices()
    out = np.stack([x.value[s:e].mean(axis=0) for s, e in slices])

    def vjp(g):
        dx = np.zeros_like(x.value)
        for k, (s, e) in enumerate(slices):
            dx[s:e] += g[k] / (e - s)
        return (dx,)

    return ad.custom(out, (x,), vjp)


# ---------------------------------------------------------------------------
# parameter serialization ("CIF1")
# ---------------------------------------------------------------------------

_ACT_CODES = {"relu": 0, "tanh": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_cif_params(p: CifParams, path) -> None:
    """Binary container: magic, u32 channels/dim/kernel, u8 activation code,
    then conv weights, conv bias, projection, bias as little-endian f32."""
    with open(path, "wb") as f:
        f.write(CIF_MAGIC)
        f.write(struct.pack("<IIIB", p.channels, p.dim, p.kernel, _ACT_CODES[p.activation]))
        for arr in (p.conv_weights, p.conv_bias, p.proj_weights):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(struct.pack("<f", p.proj_bias))


def load_cif_params(path) -> CifParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != CIF_MAGIC:
        raise FormatError("bad magic: not a CIF1 parameter file")
    if len(raw) < 17:
        raise FormatError("truncated header")
    channels, dim, kernel, act = struct.unpack("<IIIB", raw[4:17])
    if act not in _ACT_NAMES:
        raise FormatError(f"unknown activation code {act}")
    counts = [channels * dim * kernel, channels, channels, 1]
    expected = 17 + 4 * sum(counts)
    if len(raw) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(raw)}")
    offset = 17
    arrays = []
    for n in counts:
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float64))
        offset += 4 * n
    return CifParams(
        conv_weights=arrays[0].reshape(channels, dim, kernel),
        conv_bias=arrays[1],
        proj_weights=arrays[2],
        proj_bias=float(arrays[3][0]),
        activation=_ACT_NAMES[act],
    )
