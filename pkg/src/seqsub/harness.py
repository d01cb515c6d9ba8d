"""Desk-scale teacher-student distillation on synthetic boundary data.

A frozen toy teacher maps feature sequences through a stack of nonlinear
layers; a student with a configurable subsampler is trained to match one or
more teacher layers under either topology (subsample-then-upsample on the
student side, or subsampling the teacher targets as well). Everything is
seeded and deterministic: identical configs produce identical loss curves.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import cif as cifmod
from .fixedsub import avg_pool_forward, avg_pool_v, conv1d_v, deconv1d_v, repeat_v
from .guidance import (
    DistanceConfig,
    LossWeights,
    distance_eval,
    distill_v,
    loss_card_v,
    loss_frame_v,
    loss_seg_v,
    make_alpha_sup,
)
from .seqcore import AlphaSequence, FormatError, FrameSequence, Segmentation

CKPT_MAGIC = b"CKP1"

SUBSAMPLERS = ("none", "avg", "conv", "cif", "oracle")
TOPOLOGIES = ("subsample_upsample", "subsample_targets")


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_utterances: int = 32
    min_len: int = 80
    max_len: int = 120
    dim: int = 8
    mean_segment_len: float = 5.0
    latent_dim: int | None = None
    noise_std: float = 0.1
    frame_period_ms: float = 20.0

    def __post_init__(self):
        if self.mean_segment_len < 1:
            raise ValueError("mean segment length must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise std must be nonnegative")
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError("bad utterance length range")


def synth_data(cfg: SynthConfig) -> list[tuple[FrameSequence, Segmentation]]:
    """Piecewise-constant sequences with geometric segment lengths.

    Each segment holds one latent vector repeated across its frames plus
    i.i.d. noise; the returned segmentation is the ground truth.
    """
    rng = np.random.default_rng(cfg.seed)
    latent_dim = cfg.latent_dim or cfg.dim
    project = (
        None
        if latent_dim == cfg.dim
        else rng.normal(0.0, 1.0 / math.sqrt(latent_dim), size=(latent_dim, cfg.dim))
    )
    data = []
    for _ in range(cfg.n_utterances):
        T = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        bounds: list[int] = []
        pos = 0
        while pos < T:
            pos = min(pos + int(rng.geometric(1.0 / cfg.mean_segment_len)), T)
            bounds.append(pos)
        seg = Segmentation(boundaries=np.asarray(bounds, dtype=np.int64), total_len=T)
        frames = np.empty((T, cfg.dim))
        for start, stop in seg.segment_slices():
            z = rng.normal(size=latent_dim)
            vec = z if project is None else z @ project
            frames[start:stop] = vec
        if cfg.noise_std > 0:
            frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
        data.append((FrameSequence(frames, cfg.frame_period_ms), seg))
    return data


# ---------------------------------------------------------------------------
# frozen teacher
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTeacher:
    """Fixed stack of tanh layers; exposes every layer's output."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @classmethod
    def create(cls, seed: int, dim: int, depth: int = 4) -> "ToyTeacher":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for _ in range(depth):
            ws.append(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, dim)))
            bs.append(rng.normal(0.0, 0.1, size=dim))
        return cls(weights=tuple(ws), biases=tuple(bs))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    def layer_outputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Outputs of layers 1..depth for a (T, D) input."""
        outs = []
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
            outs.append(h)
        return outs


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudentConfig:
    subsampler: str = "none"
    stride: int = 1  # F for avg/conv subsamplers
    upsampler: str = "repeat"  # repeat | deconv, topology (1) only
    encoder_layers: int = 2
    use_attention: bool = False
    front_end_kernel: int | None = None  # odd; stride-1 same-padded conv
    cif_channels: int = 512
    cif_kernel: int = 5
    cif_activation: str = "relu"
    head_layers: tuple[int, ...] = (2, 3, 4)
    seed: int = 0

    def __post_init__(self):
        if self.subsampler not in SUBSAMPLERS:
            raise ValueError(f"unknown subsampler {self.subsampler!r}")
        if self.subsampler in ("avg", "conv") and self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.upsampler not in ("repeat", "deconv"):
            raise ValueError(f"unknown upsampler {self.upsampler!r}")
        if self.front_end_kernel is not None and self.front_end_kernel % 2 != 1:
            raise ValueError("front-end kernel must be odd (stride-1 same padding)")
        if not self.head_layers:
            raise ValueError("at least one head layer is required")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    topology: str = "subsample_targets"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    card_divisor: float | None = None  # K = T / card_divisor
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.card_divisor is not None and self.card_divisor <= 0:
            raise ValueError("card_divisor must be positive")


class StudentModel:
    """Parameter store plus the tape-based forward pass."""

    def __init__(self, cfg: StudentConfig, dim: int, teacher_dim: int,
                 params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.dim = dim
        self.teacher_dim = teacher_dim
        self.params = params

    @classmethod
    def init(cls, cfg: StudentConfig, dim: int, teacher_dim: int) -> "StudentModel":
        rng = np.random.default_rng(cfg.seed)
        params: dict[str, np.ndarray] = {}
        scale = 1.0 / math.sqrt(dim)
        if cfg.front_end_kernel is not None:
            k = cfg.front_end_kernel
            params["fe_w"] = rng.normal(0.0, 1.0 / math.sqrt(dim * k), size=(dim, dim, k))
            params["fe_b"] = np.zeros(dim)
        if cfg.subsampler == "conv":
            f = cfg.stride
            params["sub_w"] = rng.normal(0.0, 1.0 / math.sqrt(dim * f), size=(dim, dim, f))
            params["sub_b"] = np.zeros(dim)
        if cfg.subsampler == "cif":
            cp = cifmod.init_cif_params(
                rng, dim, channels=cfg.cif_channels, kernel=cfg.cif_kernel,
                activation=cfg.cif_activation,
            )
            params["cif_conv_w"] = cp.conv_weights
            params["cif_conv_b"] = cp.conv_bias
            params["cif_proj_w"] = cp.proj_weights
            params["cif_proj_b"] = np.zeros(1)
        if cfg.use_attention:
            for name in ("att_wq", "att_wk", "att_wv", "att_wo"):
                params[name] = rng.normal(0.0, scale, size=(dim, dim))
        for i in range(cfg.encoder_layers):
            params[f"enc{i}_w"] = rng.normal(0.0, scale, size=(dim, dim))
            params[f"enc{i}_b"] = np.zeros(dim)
        if cfg.subsampler in ("conv",) and cfg.upsampler == "deconv":
            f = cfg.stride
            params["up_w"] = rng.normal(0.0, scale, size=(dim, dim, f))
            params["up_b"] = np.zeros(dim)
        for j, layer in enumerate(cfg.head_layers):
            params[f"head{j}_w"] = rng.normal(0.0, scale, size=(dim, teacher_dim))
        return cls(cfg, dim, teacher_dim, params)

    def cif_params(self) -> cifmod.CifParams:
        return cifmod.CifParams(
            conv_weights=self.params["cif_conv_w"],
            conv_bias=self.params["cif_conv_b"],
            proj_weights=self.params["cif_proj_w"],
            proj_bias=float(self.params["cif_proj_b"][0]),
            activation=self.cfg.cif_activation,
        )

    # -- forward ------------------------------------------------------------

    def _encode(self, h: ad.Var, pv: dict[str, ad.Var]) -> ad.Var:
        cfg = self.cfg
        if cfg.use_attention:
            q = ad.matmul(h, pv["att_wq"])
            k = ad.matmul(h, pv["att_wk"])
            v = ad.matmul(h, pv["att_wv"])
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.dim))
            ctx = ad.matmul(ad.softmax_rows(scores), v)
            h = ad.add(h, ad.matmul(ctx, pv["att_wo"]))
        for i in range(cfg.encoder_layers):
            h = ad.tanh(ad.add(ad.matmul(h, pv[f"enc{i}_w"]), pv[f"enc{i}_b"]))
        return h

    def forward(self, x: FrameSequence, pv: dict[str, ad.Var],
                oracle_seg: Segmentation | None = None):
        """Build the subsample-encode graph for one utterance.

        Returns (encoded Var at the subsampled length, alpha Var or None,
        FireTrace or None).
        """
        cfg = self.cfg
        h = ad.leaf(x.data)
        if cfg.front_end_kernel is not None:
            pad = (cfg.front_end_kernel - 1) // 2
            h = ad.tanh(conv1d_v(h, pv["fe_w"], pv["fe_b"], stride=1, pad=pad))
        alpha_var = None
        trace = None
        if cfg.subsampler == "none":
            sub = h
        elif cfg.subsampler == "avg":
            sub = avg_pool_v(h, cfg.stride)
        elif cfg.subsampler == "conv":
            sub = conv1d_v(h, pv["sub_w"], pv["sub_b"], stride=cfg.stride, pad=0)
        elif cfg.subsampler == "cif":
            alpha_var = cifmod.predict_alpha_v(
                h, pv["cif_conv_w"], pv["cif_conv_b"], pv["cif_proj_w"],
                pv["cif_proj_b"], activation=cfg.cif_activation,
            )
            trace = cifmod.integrate_and_fire(AlphaSequence(alpha_var.value))
            if trace.num_segments == 0:
                raise DivergenceError(-1, float("nan"))
            sub = cifmod.segment_pool_v(h, alpha_var, trace)
        else:  # oracle
            if oracle_seg is None:
                raise ValueError("oracle subsampler needs a ground-truth segmentation")
            sub = cifmod.mean_segment_pool_v(h, oracle_seg)
        return self._encode(sub, pv), alpha_var, trace

    def leaf_params(self) -> dict[str, ad.Var]:
        return {name: ad.leaf(arr) for name, arr in self.params.items()}


def validate_setup(student_cfg: StudentConfig, train_cfg: TrainConfig) -> None:
    """Reject combinations with no defined teacher/student length alignment."""
    if student_cfg.subsampler in ("cif", "oracle") and train_cfg.topology != "subsample_targets":
        raise ValueError(
            f"{student_cfg.subsampler} subsampling is defined for topology "
            "subsample_targets only"
        )
    if train_cfg.topology == "subsample_upsample":
        if student_cfg.subsampler == "conv" and student_cfg.upsampler != "deconv":
            raise ValueError("conv subsampling pairs with the deconv upsampler")
        if student_cfg.subsampler == "avg" and student_cfg.upsampler != "repeat":
            raise ValueError("avg subsampling pairs with the repeat upsampler")


# ---------------------------------------------------------------------------
# objective graph
# ---------------------------------------------------------------------------

def utterance_loss(model: StudentModel, pv: dict[str, ad.Var], x: FrameSequence,
                   gt_seg: Segmentation, teacher_outs: list[np.ndarray],
                   train_cfg: TrainConfig):
    """Scalar loss Var for one utterance plus the unweighted term values."""
    cfg = model.cfg
    head_layers = cfg.head_layers
    heads = [pv[f"head{j}_w"] for j in range(len(head_layers))]
    targets_full = [teacher_outs[layer - 1] for layer in head_layers]
    T = x.num_frames

    encoded, alpha_var, trace = model.forward(x, pv, oracle_seg=gt_seg)

    if train_cfg.topology == "subsample_targets":
        if cfg.subsampler == "none":
            targets = targets_full
        elif cfg.subsampler in ("avg", "conv"):
            K = encoded.value.shape[0]
            targets = [avg_pool_forward(u, cfg.stride)[:K] for u in targets_full]
        elif cfg.subsampler == "cif":
            targets = [
                cifmod.shared_alpha_pool_v(u, alpha_var, trace) for u in targets_full
            ]
        else:  # oracle: average-pool the teacher within ground-truth segments
            slices = gt_seg.segment_slices()
            targets = [
                np.stack([u[s:e].mean(axis=0) for s, e in slices]) for u in targets_full
            ]
        student_at_loss = encoded
    else:  # subsample_upsample
        if cfg.subsampler == "none":
            student_at_loss = encoded
        elif cfg.upsampler == "repeat":
            student_at_loss = repeat_v(encoded, cfg.stride, T)
        else:
            student_at_loss = deconv1d_v(encoded, pv["up_w"], pv["up_b"], T)
        targets = targets_full

    target_lens = {
        t.value.shape[0] if isinstance(t, ad.Var) else t.shape[0] for t in targets
    }
    assert target_lens == {student_at_loss.value.shape[0]}, (
        "teacher/student length mismatch at the loss site"
    )

    distill = distill_v(targets, student_at_loss, heads, train_cfg.distance)
    terms = {"distill": float(distill.value), "card": 0.0, "seg": 0.0, "frame": 0.0}
    total = distill
    lw = train_cfg.loss_weights
    if alpha_var is not None:
        if lw.w_card > 0 and train_cfg.card_divisor is not None:
            card = loss_card_v(alpha_var, T / train_cfg.card_divisor)
            terms["card"] = float(card.value)
            total = ad.add_scalars([total, ad.scale(card, lw.w_card)])
        if lw.w_seg > 0:
            seg = loss_seg_v(alpha_var, gt_seg)
            terms["seg"] = float(seg.value)
            total = ad.add_scalars([total, ad.scale(seg, lw.w_seg)])
        if lw.w_frame > 0:
            frame = loss_frame_v(alpha_var, make_alpha_sup(gt_seg).values)
            terms["frame"] = float(frame.value)
            total = ad.add_scalars([total, ad.scale(frame, lw.w_frame)])
    return total, terms


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    """Per-parameter adaptive step scaling with bias correction."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batch_indices(data, batch_size: int, seed: int, step: int) -> list[int]:
    """Deterministic bucketed sampling: all utterances in a batch share a
    length, so no padding or masking is needed."""
    buckets: dict[int, list[int]] = {}
    for i, (x, _) in enumerate(data):
        buckets.setdefault(x.num_frames, []).append(i)
    keys = sorted(buckets)
    rng = np.random.default_rng([seed, step])
    sizes = np.asarray([len(buckets[k]) for k in keys], dtype=np.float64)
    key = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
    pool = buckets[key]
    picks = rng.choice(len(pool), size=batch_size, replace=len(pool) < batch_size)
    return [pool[int(i)] for i in picks]


def train(data, teacher: ToyTeacher, student_cfg: StudentConfig,
          train_cfg: TrainConfig, model: StudentModel | None = None,
          optimizer: Adam | None = None, start_step: int = 0):
    """Run the distillation loop; returns (model, per-step loss records).

    Passing a model/optimizer/start_step resumes from a checkpoint and
    continues the exact same trajectory.
    """
    validate_setup(student_cfg, train_cfg)
    if model is None:
        model = StudentModel.init(student_cfg, data[0][0].dim, teacher.dim)
    if optimizer is None:
        optimizer = Adam(model.params, train_cfg.lr, train_cfg.beta1,
                         train_cfg.beta2, train_cfg.eps)
        optimizer.t = start_step
    teacher_cache = [teacher.layer_outputs(x.data) for x, _ in data]

    records = []
    for step in range(start_step, train_cfg.steps):
        batch = _batch_indices(data, train_cfg.batch_size, train_cfg.seed, step)
        pv = model.leaf_params()
        per_utt = []
        term_sums = {"distill": 0.0, "card": 0.0, "seg": 0.0, "frame": 0.0}
        for i in batch:
            x, gt_seg = data[i]
            total, terms = utterance_loss(model, pv, x, gt_seg, teacher_cache[i], train_cfg)
            per_utt.append(total)
            for k in term_sums:
                term_sums[k] += terms[k]
        batch_loss = ad.scale(ad.add_scalars(per_utt), 1.0 / len(batch))
        loss_value = float(batch_loss.value)
        if not np.isfinite(loss_value):
            raise DivergenceError(step, loss_value)
        ad.backward(batch_loss)
        grads = {
            name: (var.grad if var.grad is not None else np.zeros_like(var.value))
            for name, var in pv.items()
        }
        optimizer.step(grads)
        records.append({
            "step": step,
            "total": loss_value,
            **{k: term_sums[k] / len(batch) for k in ("distill", "card", "seg", "frame")},
        })
    return model, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def match_boundaries(predicted, reference, tol: int = 2):
    """Greedy one-to-one matching of sorted boundary lists within ``tol``
    frames; returns (hits, n_predicted, n_reference)."""
    predicted = sorted(int(b) for b in predicted)
    reference = sorted(int(b) for b in reference)
    hits = 0
    j = 0
    for ref in reference:
        while j < len(predicted) and predicted[j] < ref - tol:
            j += 1
        if j < len(predicted) and abs(predicted[j] - ref) <= tol:
            hits += 1
            j += 1
    return hits, len(predicted), len(reference)


def boundary_prf(predicted, reference, tol: int = 2) -> tuple[float, float, float]:
    hits, n_pred, n_ref = match_boundaries(predicted, reference, tol)
    precision = hits / n_pred if n_pred else 0.0
    recall = hits / n_ref if n_ref else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1


def _interior(bounds, total_len: int) -> list[int]:
    """Drop the structural final boundary at T before scoring."""
    return [int(b) for b in bounds if b < total_len]


def evaluate(model: StudentModel, teacher: ToyTeacher, data,
             train_cfg: TrainConfig, boundary_tol: int = 2) -> dict:
    """Held-out distillation loss, achieved segment rate, and boundary
    precision/recall/F1 against the ground truth."""
    if not data:
        raise ValueError("empty evaluation set")
    eval_cfg = replace(train_cfg, loss_weights=LossWeights(0.0, 0.0, 0.0))
    model_pv = model.leaf_params()
    total_loss = 0.0
    total_segments = 0
    total_seconds = 0.0
    hits = n_pred = n_ref = 0
    for x, gt_seg in data:
        teacher_outs = teacher.layer_outputs(x.data)
        loss_var, _ = utterance_loss(model, model_pv, x, gt_seg, teacher_outs, eval_cfg)
        total_loss += float(loss_var.value)
        total_seconds += x.duration_s
        cfg = model.cfg
        if cfg.subsampler == "cif":
            alpha = cifmod.predict_alpha(x, model.cif_params())
            trace = cifmod.integrate_and_fire(alpha)
            total_segments += trace.num_segments
            pred = _interior(trace.fired, x.num_frames)
        elif cfg.subsampler == "oracle":
            total_segments += gt_seg.num_segments
            pred = _interior(gt_seg.boundaries, x.num_frames)
        elif cfg.subsampler in ("avg", "conv"):
            K = -(-x.num_frames // cfg.stride) if cfg.subsampler == "avg" else x.num_frames // cfg.stride
            total_segments += K
            pred = [t for t in range(cfg.stride, x.num_frames, cfg.stride)]
        else:
            total_segments += x.num_frames
            pred = list(range(1, x.num_frames))
        ref = _interior(gt_seg.boundaries, x.num_frames)
        h, p, r = match_boundaries(pred, ref, boundary_tol)
        hits += h
        n_pred += p
        n_ref += r
    precision = hits / n_pred if n_pred else 0.0
    recall = hits / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        "distill_loss": total_loss / len(data),
        "achieved_rate_hz": total_segments / total_seconds,
        "boundary_precision": precision,
        "boundary_recall": recall,
        "boundary_f1": f1,
        "n_utterances": len(data),
    }


def ground_truth_rate_hz(data) -> float:
    """Pooled segments-per-second of the reference segmentations."""
    segments = sum(seg.num_segments for _, seg in data)
    seconds = sum(x.duration_s for x, _ in data)
    return segments / seconds


def posthoc_subsample_eval(model: StudentModel, teacher: ToyTeacher, data,
                           factor: int, method: str,
                           distance: DistanceConfig = DistanceConfig()) -> dict:
    """Pool a no-subsampler student's projections and the teacher targets
    post hoc and report the distillation loss plus frame-rate bookkeeping."""
    if model.cfg.subsampler != "none":
        raise ValueError("post-hoc subsampling expects a baseline without a subsampler")
    if method not in ("avg", "cat"):
        raise ValueError(f"unknown post-hoc method {method!r}")
    pv = model.leaf_params()
    heads = [pv[f"head{j}_w"].value for j in range(len(model.cfg.head_layers))]
    total = 0.0
    period = None
    for x, gt_seg in data:
        if factor > x.num_frames:
            raise ValueError(f"factor {factor} exceeds sequence length {x.num_frames}")
        period = x.frame_period_ms * factor
        teacher_outs = teacher.layer_outputs(x.data)
        encoded, _, _ = model.forward(x, pv)
        v = encoded.value
        for layer, w in zip(model.cfg.head_layers, heads):
            u = teacher_outs[layer - 1]
            p = v @ w
            if method == "avg":
                u_pooled = avg_pool_forward(u, factor)
                p_pooled = avg_pool_forward(p, factor)
            else:
                n = u.shape[0] // factor
                u_pooled = u[: n * factor].reshape(n, -1)
                p_pooled = p[: n * factor].reshape(n, -1)
            val, _ = distance_eval(u_pooled, p_pooled, distance)
            total += val
    return {
        "distill_loss": total / len(data),
        "method": method,
        "factor": factor,
        "fp_ms": period,
        "fr_hz": 1000.0 / period,
    }


# ---------------------------------------------------------------------------
# checkpoints ("CKP1")
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: StudentModel, optimizer: Adam, step: int) -> None:
    """Binary container: magic, entry count, then named float64 arrays.

    Parameters and optimizer moments are stored at full precision so a
    resumed run reproduces the uninterrupted trajectory bit-exactly.
    """
    entries: dict[str, np.ndarray] = {"__step__": np.asarray([float(step)])}
    for name, arr in model.params.items():
        entries[f"p:{name}"] = arr
        entries[f"m:{name}"] = optimizer.m[name]
        entries[f"v:{name}"] = optimizer.v[name]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    """Returns (entries, step); entries hold p:/m:/v:-prefixed arrays."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CKPT_MAGIC:
        raise FormatError("bad magic: not a CKP1 checkpoint")
    (count,) = struct.unpack("<I", raw[4:8])
    offset = 8
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).copy()
            offset += 8 * n
            entries[name] = arr.reshape(shape)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if "__step__" not in entries:
        raise FormatError("checkpoint missing step entry")
    step = int(entries.pop("__step__")[0])
    return entries, step


def restore(entries: dict[str, np.ndarray], step: int, student_cfg: StudentConfig,
            dim: int, teacher_dim: int, train_cfg: TrainConfig):
    """Rebuild (model, optimizer) from checkpoint entries."""
    params = {k[2:]: v.copy() for k, v in entries.items() if k.startswith("p:")}
    model = StudentModel(student_cfg, dim, teacher_dim, params)
    optimizer = Adam(model.params, train_cfg.lr, train_cfg.beta1,
                     train_cfg.beta2, train_cfg.eps)
    optimizer.t = step
    for k, v in entries.items():
        if k.startswith("m:"):
            optimizer.m[k[2:]] = v.copy()
        elif k.startswith("v:"):
            optimizer.v[k[2:]] = v.copy()
    return model, optimizer
