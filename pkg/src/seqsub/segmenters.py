"""Segmentation providers: clustered codes, DP smoothing, silence overwrite,
and alignment-file ingestion.

The dynamic program re-segments a frame-wise code sequence by trading
per-frame distance against a constant per-segment penalty; sweeping the
penalty selects an average segment rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .seqcore import FrameSequence, Segmentation

SILENCE_LABEL = -1


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (C, D)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("codebook needs at least one centroid")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite centroids")
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class DpConfig:
    """Per-segment penalty for the smoothing dynamic program."""

    lam: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("penalty must be finite and nonnegative")


def _stack_features(features) -> np.ndarray:
    mats = []
    for f in features:
        mats.append(f.data if isinstance(f, FrameSequence) else np.asarray(f, dtype=np.float64))
    return np.vstack(mats)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, C) squared Euclidean, computed exactly (no ||x||^2 expansion)
    diff = x[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def kmeans_fit(features, n_clusters: int, seed: int, iters: int = 50) -> Codebook:
    """Lloyd's algorithm from a seeded uniform sample of the frames.

    Deterministic given the seed; an empty cluster is reseeded to the frame
    currently farthest from its assigned centroid.
    """
    x = _stack_features(features)
    n = x.shape[0]
    if n_clusters > n:
        raise ValueError(f"cannot fit {n_clusters} clusters to {n} frames")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=n_clusters, replace=False)].copy()
    codes = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        d2 = _sq_distances(x, centroids)
        new_codes = np.argmin(d2, axis=1)
        if np.array_equal(new_codes, codes):
            break
        codes = new_codes
        assigned_d2 = d2[np.arange(n), codes]
        farthest_order = np.argsort(-assigned_d2, kind="stable")
        next_reseed = 0
        for c in range(n_clusters):
            members = x[codes == c]
            if members.shape[0] == 0:
                centroids[c] = x[farthest_order[next_reseed]]
                next_reseed += 1
            else:
                centroids[c] = members.mean(axis=0)
    return Codebook(centroids=centroids)


def centroid_distances(x: FrameSequence, cb: Codebook) -> np.ndarray:
    """(T, C) squared Euclidean frame-to-centroid distances."""
    if x.dim != cb.centroids.shape[1]:
        raise ValueError(f"feature dim {x.dim} != codebook dim {cb.centroids.shape[1]}")
    return _sq_distances(x.data, cb.centroids)


def assign_codes(x: FrameSequence, cb: Codebook) -> np.ndarray:
    """Nearest centroid per frame; ties break toward the lowest index."""
    return np.argmin(centroid_distances(x, cb), axis=1)


def merge_contiguous(codes) -> Segmentation:
    """One segment per maximal run of equal codes; boundary at each run end."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 1 or codes.shape[0] == 0:
        raise ValueError("empty code sequence")
    change = np.nonzero(np.diff(codes))[0]
    bounds = np.concatenate((change + 1, [codes.shape[0]]))
    labels = [int(codes[b - 1]) for b in bounds]
    return Segmentation(boundaries=bounds, total_len=codes.shape[0], labels=labels)


# ---------------------------------------------------------------------------
# smoothing dynamic program
# ---------------------------------------------------------------------------

def _segment_cost_table(dist: np.ndarray):
    """cost[s, t] = min over codes of the distance sum on frames s..t
    (0-based inclusive), accumulated left to right; code[s, t] = argmin."""
    T, C = dist.shape
    cost = np.empty((T, T))
    code = np.empty((T, T), dtype=np.int64)
    for s in range(T):
        acc = dist[s].copy()
        cost[s, s] = acc.min()
        code[s, s] = int(np.argmin(acc))
        for t in range(s + 1, T):
            acc = acc + dist[t]
            cost[s, t] = acc.min()
            code[s, t] = int(np.argmin(acc))
    return cost, code


def dp_smooth(dist: np.ndarray, cfg: DpConfig):
    """Optimal segmentation under per-frame distances plus a per-segment
    penalty.

    Minimizes sum over segments of (best single-code distance) plus
    lam * (number of segments), exactly. Ties prefer fewer segments, then
    the lexicographically earliest cut positions. Returns (codes per frame,
    Segmentation).
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] == 0 or dist.shape[1] == 0:
        raise ValueError("distance matrix must be nonempty")
    if np.any(dist < 0) or not np.all(np.isfinite(dist)):
        raise ValueError("distances must be finite and nonnegative")
    T = dist.shape[0]
    seg_cost, seg_code = _segment_cost_table(dist)

    # suffix DP; parent[s] = end of the first segment of the optimal suffix
    best_cost = np.empty(T + 1)
    best_cnt = np.empty(T + 1, dtype=np.int64)
    parent = np.empty(T, dtype=np.int64)
    best_cost[T] = 0.0
    best_cnt[T] = 0
    for s in range(T - 1, -1, -1):
        chosen_cost = math.inf
        chosen_cnt = 0
        chosen_t = -1
        for t in range(s, T):
            cand = (seg_cost[s, t] + cfg.lam) + best_cost[t + 1]
            cnt = 1 + best_cnt[t + 1]
            if cand < chosen_cost or (cand == chosen_cost and cnt < chosen_cnt):
                chosen_cost = cand
                chosen_cnt = cnt
                chosen_t = t
        best_cost[s] = chosen_cost
        best_cnt[s] = chosen_cnt
        parent[s] = chosen_t

    bounds = []
    labels = []
    codes = np.empty(T, dtype=np.int64)
    s = 0
    while s < T:
        t = int(parent[s])
        c = int(seg_code[s, t])
        codes[s : t + 1] = c
        bounds.append(t + 1)
        labels.append(c)
        s = t + 1
    seg = Segmentation(boundaries=np.asarray(bounds, dtype=np.int64), total_len=T, labels=labels)
    return codes, seg


def dp_objective(dist: np.ndarray, seg: Segmentation, lam: float) -> float:
    """Objective value of a given segmentation under the smoothing DP's cost,
    folded in the DP's suffix order."""
    dist = np.asarray(dist, dtype=np.float64)
    acc = 0.0
    for start, stop in reversed(seg.segment_slices()):
        col = dist[start].copy()
        for t in range(start + 1, stop):
            col = col + dist[t]
        acc = (float(col.min()) + lam) + acc
    return acc


def lambda_sweep(dist: np.ndarray, target_rate_hz: float, frame_period_ms: float,
                 max_iters: int = 30, rel_tol: float = 0.05) -> DpConfig:
    """Bisection over the per-segment penalty toward a target segment rate.

    The segment count is nonincreasing in the penalty (asserted on the
    values probed); the search stops when the achieved rate is within
    ``rel_tol`` of the target or after ``max_iters`` bisection steps,
    returning the best penalty found.
    """
    return lambda_sweep_corpus([dist], target_rate_hz, frame_period_ms,
                               max_iters=max_iters, rel_tol=rel_tol)


def lambda_sweep_corpus(dists: list, target_rate_hz: float, frame_period_ms: float,
                        max_iters: int = 30, rel_tol: float = 0.05) -> DpConfig:
    """Corpus-level penalty sweep: one penalty, rate pooled over utterances."""
    input_rate = 1000.0 / frame_period_ms
    if not (0 < target_rate_hz <= input_rate):
        raise ValueError(
            f"unreachable target rate {target_rate_hz} Hz for {input_rate} Hz input"
        )
    duration_s = sum(np.asarray(d).shape[0] for d in dists) * frame_period_ms / 1000.0
    probes: list[tuple[float, int]] = []

    def rate_at(lam: float) -> float:
        count = sum(dp_smooth(d, DpConfig(lam=lam))[1].num_segments for d in dists)
        probes.append((lam, count))
        return count / duration_s

    lo, rate_lo = 0.0, rate_at(0.0)
    best_lam, best_gap = 0.0, abs(rate_lo - target_rate_hz)
    if rate_lo <= target_rate_hz or best_gap <= rel_tol * target_rate_hz:
        _assert_monotone(probes)
        return DpConfig(lam=best_lam)

    hi = 1.0
    while rate_at(hi) > target_rate_hz:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        r = rate_at(mid)
        gap = abs(r - target_rate_hz)
        if gap < best_gap:
            best_lam, best_gap = mid, gap
        if gap <= rel_tol * target_rate_hz:
            break
        if r > target_rate_hz:
            lo = mid
        else:
            hi = mid
    _assert_monotone(probes)
    return DpConfig(lam=best_lam)


def _assert_monotone(probes: list[tuple[float, int]]) -> None:
    ordered = sorted(probes)
    for (l1, k1), (l2, k2) in zip(ordered, ordered[1:]):
        if l2 > l1 and k2 > k1:
            raise AssertionError(
                f"segment count increased with the penalty: K({l1})={k1}, K({l2})={k2}"
            )


# ---------------------------------------------------------------------------
# silence handling and alignment files
# ---------------------------------------------------------------------------

def overwrite_silence(seg: Segmentation, silence_mask) -> Segmentation:
    """Make each maximal silent run its own segment, splitting any segment
    it intersects. Silent segments get the reserved label; speech pieces
    keep their original label (0 when the input had none)."""
    mask = np.asarray(silence_mask, dtype=bool)
    if mask.shape != (seg.total_len,):
        raise ValueError("mask length does not match the segmentation")
    if not mask.any():
        return seg

    # maximal silent runs as 0-based half-open intervals
    padded = np.concatenate(([False], mask, [False]))
    edges = np.nonzero(np.diff(padded.astype(np.int8)))[0]
    runs = list(zip(edges[::2], edges[1::2]))

    pieces: list[tuple[int, int, int]] = []  # (start, stop, label), 0-based half-open
    labels = seg.labels if seg.labels is not None else [0] * seg.num_segments
    for (start, stop), label in zip(seg.segment_slices(), labels):
        cursor = start
        for a, b in runs:
            if b <= cursor or a >= stop:
                continue
            if a > cursor:
                pieces.append((cursor, a, label))
            cursor = min(b, stop)
        if cursor < stop:
            pieces.append((cursor, stop, label))
    pieces.extend((a, b, SILENCE_LABEL) for a, b in runs)
    pieces.sort()
    return Segmentation(
        boundaries=np.asarray([stop for _, stop, _ in pieces], dtype=np.int64),
        total_len=seg.total_len,
        labels=[lab for _, _, lab in pieces],
    )


def read_silence_mask(path) -> np.ndarray:
    """One character per frame, '1' marking silence, on a single line."""
    with open(path, "r", encoding="utf-8") as f:
        line = f.read().strip()
    if not line or any(ch not in "01" for ch in line):
        raise ValueError("silence mask must be a nonempty line of 0/1 characters")
    return np.frombuffer(line.encode("ascii"), dtype=np.uint8) == ord("1")


def write_silence_mask(mask, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join("1" if m else "0" for m in np.asarray(mask, dtype=bool)))
        f.write("\n")


def read_alignment(path, frame_period_ms: float, total_len: int,
                   label_map: dict[str, int] | None = None) -> Segmentation:
    """Convert sorted, contiguous (start_ms, end_ms, label) rows into a
    segmentation at the given frame period.

    Ends are rounded half up to frame indices (end-exclusive); the final end
    is clamped to ``total_len``. String labels are interned in order of
    first appearance into ``label_map`` when one is supplied. Gaps or
    overlaps longer than one frame are rejected; intervals that round to
    zero frames are dropped.
    """
    rows: list[tuple[float, float, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'start_ms,end_ms,label'")
            start, end = float(parts[0]), float(parts[1])
            if end <= start:
                raise ValueError(f"line {lineno}: empty or inverted interval")
            rows.append((start, end, parts[2].strip()))
    if not rows:
        raise ValueError("alignment file has no rows")

    for i in range(1, len(rows)):
        if rows[i][0] < rows[i - 1][0]:
            raise ValueError(f"row {i + 1}: rows are not sorted by start time")
        jump = rows[i][0] - rows[i - 1][1]
        if abs(jump) > frame_period_ms:
            kind = "gap" if jump > 0 else "overlap"
            raise ValueError(f"row {i + 1}: {kind} of {abs(jump)} ms exceeds one frame")

    if label_map is None:
        label_map = {}
    bounds: list[int] = []
    labels: list[int] = []
    for _, end, label in rows:
        b = math.floor(end / frame_period_ms + 0.5)
        b = min(b, total_len)
        if b < 1 or (bounds and b <= bounds[-1]):
            continue  # segment shorter than one frame after rounding
        if label not in label_map:
            label_map[label] = len(label_map)
        bounds.append(b)
        labels.append(label_map[label])
    if not bounds:
        raise ValueError("all alignment rows rounded to zero frames")
    bounds[-1] = total_len
    if len(bounds) >= 2 and bounds[-1] <= bounds[-2]:
        raise ValueError("alignment does not reach the final frame monotonically")
    return Segmentation(
        boundaries=np.asarray(bounds, dtype=np.int64), total_len=total_len, labels=labels
    )
