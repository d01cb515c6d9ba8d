"""Boundary-guidance losses and the multi-head distillation objective.

Three guidance terms steer the integrate-and-fire weights: a cardinality
penalty on the total mass, a boundary-prefix penalty, and a per-frame L1
penalty against a target weight sequence built from a reference
segmentation. The distillation objective compares projected student frames
against one or more teacher layers under a configurable distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seqcore import AlphaSequence, FrameSequence, Segmentation

_NORM_EPS = 1e-8

DISTANCE_KINDS = ("euclidean_sq", "l1", "cosine_logsig", "l1_plus_cosine_logsig")


@dataclass(frozen=True)
class PredictionHead:
    """Learnable projection from student space into one teacher layer."""

    weights: np.ndarray  # (D_student, D_teacher)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ValueError("head weights must be a finite 2-D matrix")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class DistanceConfig:
    kind: str = "l1_plus_cosine_logsig"
    lambda_cos: float = 1.0

    def __post_init__(self):
        if self.kind not in DISTANCE_KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if not np.isfinite(self.lambda_cos) or self.lambda_cos < 0:
            raise ValueError("lambda_cos must be finite and nonnegative")


@dataclass(frozen=True)
class LossWeights:
    w_card: float = 0.5
    w_seg: float = 0.005
    w_frame: float = 0.25

    def __post_init__(self):
        for name in ("w_card", "w_seg", "w_frame"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")


def _alpha_values(alpha) -> np.ndarray:
    if isinstance(alpha, AlphaSequence):
        return alpha.values
    return np.asarray(alpha, dtype=np.float64)


def _matrix(seq) -> np.ndarray:
    if isinstance(seq, FrameSequence):
        return seq.data
    return np.asarray(seq, dtype=np.float64)


# ---------------------------------------------------------------------------
# guidance losses (value + analytic gradient wrt alpha)
# ---------------------------------------------------------------------------

def loss_card(alpha, k_target: float):
    """((sum(alpha) - K) / T)^2, normalized so utterances of different
    lengths are comparable. K may be fractional."""
    a = _alpha_values(alpha)
    T = a.shape[0]
    if T == 0:
        raise ValueError("empty alpha")
    if not (k_target > 0):
        raise ValueError("target segment count must be positive")
    gap = (np.sum(a) - k_target) / T
    grad = np.full(T, 2.0 * gap / T)
    return float(gap * gap), grad


def loss_seg(alpha, seg: Segmentation):
    """Sum over boundaries of |prefix(alpha at t_k) - k|.

    Zero exactly when the accumulated mass hits every integer at the given
    boundaries. Subgradient of |.| at zero is taken as 0.
    """
    a = _alpha_values(alpha)
    bounds = seg.boundaries
    if bounds[-1] > a.shape[0]:
        raise ValueError("segmentation extends past the weight sequence")
    csum = np.cumsum(a)
    diffs = csum[bounds - 1] - np.arange(1, bounds.shape[0] + 1)
    signs = np.sign(diffs)
    # each boundary term touches every alpha_i with i <= t_k
    suffix = np.zeros(a.shape[0])
    np.add.at(suffix, bounds - 1, signs)
    grad = np.cumsum(suffix[::-1])[::-1]
    return float(np.sum(np.abs(diffs))), grad


def make_alpha_sup(seg: Segmentation) -> AlphaSequence:
    """Target weights 1/(segment length) on each frame of each segment.

    Requires the segmentation to cover the whole sequence (t_K = T); the
    total mass then telescopes to the segment count.
    """
    if seg.boundaries[-1] != seg.total_len:
        raise ValueError("segmentation must end at the final frame (t_K = T)")
    out = np.empty(seg.total_len, dtype=np.float64)
    for start, stop in seg.segment_slices():
        out[start:stop] = 1.0 / (stop - start)
    return AlphaSequence(values=out)


def loss_frame(alpha, alpha_sup):
    """L1 distance to the target weight sequence, sign subgradient."""
    a = _alpha_values(alpha)
    target = _alpha_values(alpha_sup)
    if a.shape != target.shape:
        raise ValueError("alpha and target lengths differ")
    diff = a - target
    return float(np.sum(np.abs(diff))), np.sign(diff)


# ---------------------------------------------------------------------------
# distillation distances
# ---------------------------------------------------------------------------

def _euclidean_sq(u, p):
    diff = p - u
    return float(np.sum(diff * diff)), 2.0 * diff, -2.0 * diff


def _l1(u, p):
    diff = p - u
    s = np.sign(diff)
    return float(np.sum(np.abs(diff))), s, -s


def _cosine_logsig(u, p):
    """Sum over frames of -log(sigmoid(cos(u_t, p_t))); norms floored."""
    nu = np.maximum(np.linalg.norm(u, axis=1), _NORM_EPS)
    npn = np.maximum(np.linalg.norm(p, axis=1), _NORM_EPS)
    cos = np.sum(u * p, axis=1) / (nu * npn)
    sig = 1.0 / (1.0 + np.exp(-cos))
    value = float(np.sum(-np.log(sig)))
    dcos = (sig - 1.0)[:, None]
    dp = u / (nu * npn)[:, None]
    free_p = np.linalg.norm(p, axis=1) > _NORM_EPS
    dp[free_p] -= (cos[free_p] / npn[free_p] ** 2)[:, None] * p[free_p]
    du = p / (nu * npn)[:, None]
    free_u = np.linalg.norm(u, axis=1) > _NORM_EPS
    du[free_u] -= (cos[free_u] / nu[free_u] ** 2)[:, None] * u[free_u]
    return value, dcos * dp, dcos * du


def distance_eval_full(u: np.ndarray, p: np.ndarray, cfg: DistanceConfig):
    """Distance value with gradients wrt both sides: (value, dp, du)."""
    if cfg.kind == "euclidean_sq":
        return _euclidean_sq(u, p)
    if cfg.kind == "l1":
        return _l1(u, p)
    if cfg.kind == "cosine_logsig":
        return _cosine_logsig(u, p)
    v1, gp1, gu1 = _l1(u, p)
    v2, gp2, gu2 = _cosine_logsig(u, p)
    lam = cfg.lambda_cos
    return v1 + lam * v2, gp1 + lam * gp2, gu1 + lam * gu2


def distance_eval(u: np.ndarray, p: np.ndarray, cfg: DistanceConfig):
    """Distance value and gradient wrt the projected student frames."""
    value, dp, _ = distance_eval_full(u, p, cfg)
    return value, dp


def _head_matrix(head) -> np.ndarray:
    if isinstance(head, PredictionHead):
        return head.weights
    return np.asarray(head, dtype=np.float64)


def distill_loss(teacher_layers, student, heads, cfg: DistanceConfig = DistanceConfig()):
    """Sum over layers and frames of d(u_t, W v_t).

    Returns (value, grad wrt student frames, list of grads wrt each head).
    Teacher and student must be aligned to the same length before calling.
    """
    v = _matrix(student)
    us = [_matrix(u) for u in teacher_layers]
    ws = [_head_matrix(h) for h in heads]
    if len(us) != len(ws):
        raise ValueError("need exactly one head per teacher layer")
    total = 0.0
    grad_v = np.zeros_like(v)
    grads_w = []
    for u, w in zip(us, ws):
        if u.shape[0] != v.shape[0]:
            raise ValueError(
                f"teacher length {u.shape[0]} != student length {v.shape[0]}"
            )
        p = v @ w
        val, dp = distance_eval(u, p, cfg)
        total += val
        grad_v += dp @ w.T
        grads_w.append(v.T @ dp)
    return total, grad_v, grads_w


def topology_loss(mode: str, teacher_layers, student_subsampled, heads,
                  cfg: DistanceConfig = DistanceConfig(), *,
                  upsample=None, subsample_teacher=None) -> float:
    """Distillation under one of the two sequence-length topologies.

    ``subsample_upsample``: the subsampled student output is brought back to
    the teacher's length with ``upsample`` and compared against full-length
    teacher layers. ``subsample_targets``: each teacher layer is shortened
    with ``subsample_teacher`` and compared at the subsampled length.
    """
    if mode == "subsample_upsample":
        if upsample is None:
            raise ValueError("subsample_upsample mode needs an upsample callable")
        student_full = upsample(_matrix(student_subsampled))
        value, _, _ = distill_loss(teacher_layers, student_full, heads, cfg)
        return value
    if mode == "subsample_targets":
        if subsample_teacher is None:
            raise ValueError("subsample_targets mode needs a subsample_teacher callable")
        targets = [subsample_teacher(_matrix(u)) for u in teacher_layers]
        value, _, _ = distill_loss(targets, student_subsampled, heads, cfg)
        return value
    raise ValueError(f"unknown topology mode {mode!r}")


# ---------------------------------------------------------------------------
# tape wrappers
# ---------------------------------------------------------------------------

def loss_card_v(alpha: ad.Var, k_target: float) -> ad.Var:
    value, grad = loss_card(alpha.value, k_target)
    return ad.custom(value, (alpha,), lambda g: (g * grad,))


def loss_seg_v(alpha: ad.Var, seg: Segmentation) -> ad.Var:
    value, grad = loss_seg(alpha.value, seg)
    return ad.custom(value, (alpha,), lambda g: (g * grad,))


def loss_frame_v(alpha: ad.Var, alpha_sup: np.ndarray) -> ad.Var:
    value, grad = loss_frame(alpha.value, alpha_sup)
    return ad.custom(value, (alpha,), lambda g: (g * grad,))


def distill_v(teacher_layers, student: ad.Var, heads: list[ad.Var],
              cfg: DistanceConfig) -> ad.Var:
    """Tape node for the distillation objective.

    Teacher layers may be constants or Vars (the subsample-targets topology
    pools them with weights that carry gradients); gradients reach the
    student, every head, and any Var-valued target.
    """
    us = [t.value if isinstance(t, ad.Var) else _matrix(t) for t in teacher_layers]
    v = student.value
    ws = [h.value for h in heads]
    if len(us) != len(ws):
        raise ValueError("need exactly one head per teacher layer")
    total = 0.0
    grad_v = np.zeros_like(v)
    grads_w = []
    grads_u = []
    for u, w in zip(us, ws):
        if u.shape[0] != v.shape[0]:
            raise ValueError(
                f"teacher length {u.shape[0]} != student length {v.shape[0]}"
            )
        p = v @ w
        val, dp, du = distance_eval_full(u, p, cfg)
        total += val
        grad_v += dp @ w.T
        grads_w.append(v.T @ dp)
        grads_u.append(du)

    var_targets = [
        (t, du) for t, du in zip(teacher_layers, grads_u) if isinstance(t, ad.Var)
    ]

    def vjp(g):
        outs = [g * grad_v] + [g * gw for gw in grads_w]
        outs.extend(g * du for _, du in var_targets)
        return tuple(outs)

    return ad.custom(total, (student, *heads, *[t for t, _ in var_targets]), vjp)
