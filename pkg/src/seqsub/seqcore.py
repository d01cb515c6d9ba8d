"""Core domain types, binary/JSON file formats, and the gradient-check harness.

Conventions used across the package:

- Feature sequences are T x D float64 matrices, one row per frame.
- Frame indices and segment boundaries are 1-based, matching the usual
  "boundary at time t" convention; a boundary t marks the last frame of
  its segment, so a segmentation of 1..T always satisfies t_K <= T.
- All computation is float64; binary payloads are float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FRAMES_MAGIC = b"SQP1"


class FormatError(ValueError):
    """Raised for malformed or truncated files."""


@dataclass(frozen=True)
class FrameSequence:
    """A T x D feature matrix with the frame period it was sampled at."""

    data: np.ndarray
    frame_period_ms: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"frame data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("empty sequence")
        if not np.all(np.isfinite(data)):
            raise ValueError("frame data contains non-finite values")
        if not (self.frame_period_ms > 0):
            raise ValueError("frame_period_ms must be positive")
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def frame_rate_hz(self) -> float:
        return 1000.0 / self.frame_period_ms

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_period_ms / 1000.0


@dataclass(frozen=True)
class AlphaSequence:
    """Per-frame nonnegative firing weights."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] < 1:
            raise ValueError("alpha must be a nonempty 1-D vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("alpha contains non-finite values")
        if np.any(values < 0):
            raise ValueError("alpha values must be nonnegative")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def total(self) -> float:
        return float(np.sum(self.values))


@dataclass(frozen=True)
class Segmentation:
    """Strictly increasing 1-based boundary indices with optional labels.

    Boundary t_k is the (1-based) index of the last frame of segment k,
    so segment k covers frames t_{k-1}+1 .. t_k with t_0 = 0.
    """

    boundaries: np.ndarray
    total_len: int
    labels: list[int] | None = None

    def __post_init__(self):
        bounds = np.asarray(self.boundaries, dtype=np.int64)
        if bounds.ndim != 1 or bounds.shape[0] < 1:
            raise ValueError("segmentation needs at least one boundary")
        if np.any(bounds < 1):
            raise ValueError("boundaries are 1-based and must be >= 1")
        if np.any(np.diff(bounds) <= 0):
            raise ValueError("boundaries must be strictly increasing")
        if self.total_len < 1:
            raise ValueError("total_len must be >= 1")
        if bounds[-1] > self.total_len:
            raise ValueError(
                f"final boundary {bounds[-1]} exceeds total_len {self.total_len}"
            )
        if self.labels is not None and len(self.labels) != bounds.shape[0]:
            raise ValueError("labels length must equal the number of segments")
        object.__setattr__(self, "boundaries", bounds)

    @property
    def num_segments(self) -> int:
        return self.boundaries.shape[0]

    def segment_slices(self) -> list[tuple[int, int]]:
        """0-based half-open (start, stop) per segment, ignoring any tail."""
        starts = np.concatenate(([0], self.boundaries[:-1]))
        return [(int(s), int(e)) for s, e in zip(starts, self.boundaries)]

    def average_rate_hz(self, frame_period_ms: float) -> float:
        """Segments per second over the whole sequence."""
        return self.num_segments / (self.total_len * frame_period_ms / 1000.0)


@dataclass(frozen=True)
class SegmentWeights:
    """Per-segment (1-based frame index, weight) pairs plus the trailing mass.

    Fired segments carry weights summing to 1. When a trailing segment is
    emitted its weights are stored raw (summing to ``residual``); pooling
    normalizes them. ``residual`` is the mass accumulated after the last
    fire, whether or not a trailing segment was emitted.
    """

    segments: list[list[tuple[int, float]]]
    residual: float
    trailing_emitted: bool = False

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")
        for seg in self.segments:
            if any(w < 0 for _, w in seg):
                raise ValueError("segment weights must be nonnegative")
            idx = [i for i, _ in seg]
            if idx != sorted(idx):
                raise ValueError("frame indices within a segment must increase")

    @property
    def num_segments(self) -> int:
        return len(self.segments)


@dataclass
class GradCheckReport:
    """Relative errors of analytic gradients against central differences."""

    per_param: dict[str, float]
    max_rel_err: float
    h: float
    skipped: dict[str, int] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


# ---------------------------------------------------------------------------
# binary frame format ("SQP1")
# ---------------------------------------------------------------------------

def save_frames(seq: FrameSequence, path) -> None:
    """Write a FrameSequence: magic, u32 T, u32 D, f64 period, T*D f32 rows."""
    T, D = seq.data.shape
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<IId", T, D, seq.frame_period_ms))
        f.write(payload)


def load_frames(path) -> FrameSequence:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != FRAMES_MAGIC:
        raise FormatError("bad magic: not an SQP1 frame file")
    header = raw[4:20]
    if len(header) < 16:
        raise FormatError("truncated header")
    T, D, period = struct.unpack("<IId", header)
    if T == 0 or D == 0:
        raise FormatError("empty sequence")
    body = raw[20:]
    expected = 4 * T * D
    if len(body) != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(body)}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(T, D)
    if not np.all(np.isfinite(data)):
        raise FormatError("payload contains non-finite values")
    return FrameSequence(data=data, frame_period_ms=period)


# ---------------------------------------------------------------------------
# segmentation JSON
# ---------------------------------------------------------------------------

def save_segmentation(seg: Segmentation, path) -> None:
    doc = {
        "total_len": int(seg.total_len),
        "boundaries": [int(b) for b in seg.boundaries],
        "labels": None if seg.labels is None else [int(x) for x in seg.labels],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_segmentation(path) -> Segmentation:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("total_len", "boundaries"):
        if key not in doc:
            raise FormatError(f"segmentation JSON missing key {key!r}")
    labels = doc.get("labels")
    return Segmentation(
        boundaries=np.asarray(doc["boundaries"], dtype=np.int64),
        total_len=int(doc["total_len"]),
        labels=None if labels is None else [int(x) for x in labels],
    )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, params, h: float = 1e-4, fingerprint=None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f(params) -> (value, grads)`` where ``params`` and ``grads`` are dicts
    mapping names to float64 arrays (scalars allowed). Each coordinate is
    perturbed by +-h; the relative error is |g_a - g_n| / max(|g_a|, |g_n|,
    1e-8).

    ``fingerprint(params) -> hashable`` optionally identifies a discrete
    regime (e.g. a firing pattern); coordinates whose perturbation changes
    the fingerprint are excluded from the check and counted in ``skipped``.
    """
    params = {k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    value, grads = f(params)
    if not np.isfinite(value):
        raise ValueError(f"f returned non-finite value {value!r}")
    base_fp = fingerprint(params) if fingerprint is not None else None

    per_param: dict[str, float] = {}
    skipped: dict[str, int] = {}
    worst = 0.0
    for name, p in params.items():
        g_a = np.atleast_1d(np.asarray(grads[name], dtype=np.float64))
        if g_a.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        flat = p.reshape(-1)
        g_flat = g_a.reshape(-1)
        worst_here = 0.0
        n_skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            if fingerprint is not None and fingerprint(params) != base_fp:
                flat[i] = orig
                n_skipped += 1
                continue
            f_plus, _ = f(params)
            flat[i] = orig - h
            if fingerprint is not None and fingerprint(params) != base_fp:
                flat[i] = orig
                n_skipped += 1
                continue
            f_minus, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("f returned non-finite value during perturbation")
            g_n = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_flat[i] - g_n) / max(abs(g_flat[i]), abs(g_n), 1e-8)
            worst_here = max(worst_here, rel)
        per_param[name] = worst_here
        if n_skipped:
            skipped[name] = n_skipped
        worst = max(worst, worst_here)
    return GradCheckReport(per_param=per_param, max_rel_err=worst, h=h, skipped=skipped)
