"""Discrete-unit front end: temporal mean pooling of frame features and
K-means vector quantization (Lloyd's algorithm with k-means++ seeding).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import TokenSequence
from .errors import FormatError, ValidationError

FRAMES_MAGIC = b"LIDFRMS1"
CODEBOOK_MAGIC = b"LIDCBK1\x00"


@dataclass(frozen=True)
class FrameMatrix:
    """Frame-level feature matrix for one utterance (T_f x D)."""

    utt_id: str
    frames: np.ndarray
    frame_stride_ms: int = 20

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValidationError(f"{self.utt_id}: frames must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError(f"{self.utt_id}: non-finite frame values")
        if self.frame_stride_ms <= 0:
            raise ValidationError(f"{self.utt_id}: frame_stride_ms must be positive")


@dataclass(frozen=True)
class Codebook:
    """K centroid vectors; rows double as frozen embedding vectors."""

    centroids: np.ndarray
    seed: int = 0
    iterations: int = 0
    inertia: float = 0.0
    inertia_trace: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValidationError("codebook needs a K x D matrix with K >= 2")
        if not np.all(np.isfinite(self.centroids)):
            raise ValidationError("non-finite centroid values")
        uniq = np.unique(self.centroids, axis=0)
        if uniq.shape[0] != self.centroids.shape[0]:
            raise ValidationError("duplicate centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


# ---------------------------------------------------------------------------
# Pooling

def pool_frames(m: FrameMatrix, window_ms: int) -> FrameMatrix:
    """Mean-pool consecutive groups of window_ms/stride frames; a trailing
    partial group is pooled as-is rather than dropped."""
    if window_ms <= 0 or window_ms % m.frame_stride_ms != 0:
        raise ValidationError(
            f"window_ms={window_ms} is not a positive multiple of stride {m.frame_stride_ms}"
        )
    g = window_ms // m.frame_stride_ms
    t = m.frames.shape[0]
    pooled = [m.frames[s:s + g].mean(axis=0) for s in range(0, t, g)]
    return FrameMatrix(utt_id=m.utt_id, frames=np.stack(pooled), frame_stride_ms=window_ms)


# ---------------------------------------------------------------------------
# K-means

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances, clipped to avoid tiny negatives
    d = (
        np.sum(points ** 2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids ** 2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all mass on existing centroids: pick any remaining distinct point
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[j:j + 1]).ravel())
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    trace = []
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        assign = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(points)), assign].sum())
        trace.append(inertia)
        new = np.empty_like(centroids)
        for j in range(centroids.shape[0]):
            members = points[assign == j]
            if len(members) == 0:
                # re-seed an empty cluster with the point farthest from its centroid
                far = int(np.argmax(d[np.arange(len(points)), assign]))
                new[j] = points[far]
            else:
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(points, centroids)
    assign = np.argmin(d, axis=1)
    final_inertia = float(d[np.arange(len(points)), assign].sum())
    trace.append(final_inertia)
    return centroids, final_inertia, it, trace


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
    n_restarts: int = 3,
    max_points: int | None = None,
) -> Codebook:
    """Best-of-n_restarts Lloyd's algorithm with k-means++ initialization.

    max_points caps the training set by seeded reservoir-style subsampling
    (a uniform choice without replacement), for corpora too large to cluster
    in full.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be a 2-D array")
    if not np.all(np.isfinite(points)):
        raise ValidationError("non-finite points")
    if max_points is not None and points.shape[0] > max_points:
        sub_rng = np.random.default_rng(seed)
        idx = np.sort(sub_rng.choice(points.shape[0], size=max_points, replace=False))
        points = points[idx]
    if points.shape[0] < k:
        raise ValidationError(f"need at least k={k} points, got {points.shape[0]}")
    if max_iters < 1 or n_restarts < 1:
        raise ValidationError("max_iters and n_restarts must be >= 1")

    best = None
    for r in range(n_restarts):
        rng = np.random.default_rng((seed, r))
        init = _kmeanspp_init(points, k, rng)
        centroids, inertia, iters, trace = _lloyd(points, init, max_iters, tol)
        if best is None or inertia < best[1] - 0.0:
            best = (centroids, inertia, iters, trace)
    centroids, inertia, iters, trace = best
    uniq = np.unique(centroids, axis=0)
    if uniq.shape[0] != centroids.shape[0]:
        raise ValidationError("degenerate clustering produced duplicate centroids; lower k")
    return Codebook(
        centroids=centroids,
        seed=seed,
        iterations=iters,
        inertia=inertia,
        inertia_trace=tuple(trace),
    )


def assign_indices(cb: Codebook, frames: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per row; ties go to the smallest index."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[1] != cb.dim:
        raise ValidationError(f"dimension mismatch: frames D={frames.shape[1]}, codebook D={cb.dim}")
    # exact distances (no expansion trick) so ties are broken exactly by argmin
    d = np.sum((frames[:, None, :] - cb.centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1)


def kmeans_assign(cb: Codebook, m: FrameMatrix) -> TokenSequence:
    idx = assign_indices(cb, m.frames)
    return TokenSequence(utt_id=m.utt_id, tokens=tuple(str(int(i)) for i in idx))


# ---------------------------------------------------------------------------
# Binary formats

def save_frames(m: FrameMatrix, path: str | Path) -> None:
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<III", frames.shape[0], frames.shape[1], m.frame_stride_ms))
        fh.write(frames.tobytes())


def load_frames(path: str | Path, utt_id: str | None = None) -> FrameMatrix:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != FRAMES_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    t, d, stride = struct.unpack("<III", data[8:20])
    expected = 20 + 4 * t * d
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    frames = np.frombuffer(data[20:], dtype="<f4").reshape(t, d).astype(np.float64)
    if utt_id is None:
        utt_id = path.name.removesuffix(".frm")
    return FrameMatrix(utt_id=utt_id, frames=frames, frame_stride_ms=stride)


def save_codebook(cb: Codebook, path: str | Path) -> None:
    cents = np.ascontiguousarray(cb.centroids, dtype="<f4")
    meta = {
        "seed": cb.seed,
        "iterations": cb.iterations,
        "inertia": cb.inertia,
        "inertia_trace": list(cb.inertia_trace),
    }
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<II", cents.shape[0], cents.shape[1]))
        fh.write(cents.tobytes())
        fh.write(json.dumps(meta, sort_keys=True).encode("utf-8"))


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic")
    k, d = struct.unpack("<II", data[8:16])
    end = 16 + 4 * k * d
    if len(data) < end:
        raise FormatError(f"{path}: truncated centroid payload")
    cents = np.frombuffer(data[16:end], dtype="<f4").reshape(k, d).astype(np.float64)
    try:
        meta = json.loads(data[end:].decode("utf-8")) if len(data) > end else {}
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: bad metadata trailer: {e}") from None
    return Codebook(
        centroids=cents,
        seed=meta.get("seed", 0),
        iterations=meta.get("iterations", 0),
        inertia=meta.get("inertia", 0.0),
        inertia_trace=tuple(meta.get("inertia_trace", ())),
    )
