"""Prediction records, probability-space fusion, run alignment, and the
binary prediction/embedding matrix format with .ids/.labels sidecars."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

PRED_MAGIC = b"LIDPRD1\x00"
SCORE_SUM_TOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    """Per-utterance score vector over a label list plus its argmax label."""

    utt_id: str
    scores: np.ndarray
    labels: tuple[str, ...]
    predicted: str
    source: str = ""
    votes: tuple[str, ...] | None = None   # per-window votes when produced by voting

    def __post_init__(self):
        if self.scores.shape != (len(self.labels),):
            raise ValidationError(f"{self.utt_id}: scores length != label count")

    @classmethod
    def from_scores(
        cls,
        utt_id: str,
        scores: np.ndarray,
        labels: tuple[str, ...] | list[str],
        source: str = "",
        votes: tuple[str, ...] | None = None,
    ) -> "PredictionRecord":
        scores = np.asarray(scores, dtype=np.float64)
        if abs(float(scores.sum()) - 1.0) > SCORE_SUM_TOL or np.any(scores < 0):
            raise ValidationError(f"{utt_id}: scores are not a probability vector")
        # np.argmax already breaks ties by lowest index
        predicted = labels[int(np.argmax(scores))]
        return cls(
            utt_id=utt_id,
            scores=scores,
            labels=tuple(labels),
            predicted=predicted,
            source=source,
            votes=votes,
        )


def fuse_average(a: PredictionRecord, b: PredictionRecord, weight: float = 0.5) -> PredictionRecord:
    """Convex combination weight*a + (1-weight)*b of two score vectors."""
    if a.utt_id != b.utt_id:
        raise ValidationError(f"utt_id mismatch: {a.utt_id!r} vs {b.utt_id!r}")
    if a.labels != b.labels:
        raise ValidationError(f"{a.utt_id}: label space mismatch")
    if not 0.0 <= weight <= 1.0:
        raise ValidationError("weight must lie in [0, 1]")
    scores = weight * a.scores + (1.0 - weight) * b.scores
    return PredictionRecord.from_scores(
        a.utt_id, scores, a.labels, source=f"fused({a.source},{b.source},w={weight:g})"
    )


def align_predictions(
    runs: list[list[PredictionRecord]], strict: bool = True
) -> tuple[dict[str, list[PredictionRecord]], dict]:
    """Join runs by utt_id in lexicographic order.

    Strict mode requires identical id sets; lenient mode joins the
    intersection and reports per-run unmatched counts.
    """
    if not runs:
        raise ValidationError("no runs to align")
    id_sets = [set(r.utt_id for r in run) for run in runs]
    common = set.intersection(*id_sets)
    union = set.union(*id_sets)
    if strict and common != union:
        missing = sorted(union - common)
        raise ValidationError(f"strict alignment: ids missing from some runs: {missing[:20]}")
    by_id = [{r.utt_id: r for r in run} for run in runs]
    table = {uid: [m[uid] for m in by_id] for uid in sorted(common)}
    report = {
        "n_joined": len(common),
        "n_unmatched": len(union) - len(common),
        "unmatched_per_run": [sorted(ids - common) for ids in id_sets],
    }
    return table, report


# ---------------------------------------------------------------------------
# Binary matrix container: used for prediction score matrices (with .labels)
# and for acoustic embedding matrices (without).

def _write_matrix(path: Path, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PRED_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def _read_matrix(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if data[:8] != PRED_MAGIC:
        raise FormatError(f"{path}: bad magic")
    rows, cols = struct.unpack("<II", data[8:16])
    expected = 16 + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(rows, cols).astype(np.float64)


def _read_id_sidecar(path: Path, n: int) -> list[str]:
    ids = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln]
    if len(ids) != n:
        raise FormatError(f"{path}: {len(ids)} ids for {n} matrix rows")
    return ids


def save_predictions(records: list[PredictionRecord], path: str | Path,
                     normalization: str = "none") -> None:
    if not records:
        raise ValidationError("no records to save")
    labels = records[0].labels
    for r in records:
        if r.labels != labels:
            raise ValidationError("records span multiple label spaces")
    path = Path(path)
    _write_matrix(path, np.stack([r.scores for r in records]))
    path.with_suffix(path.suffix + ".ids").write_text(
        "".join(r.utt_id + "\n" for r in records), encoding="utf-8")
    path.with_suffix(path.suffix + ".labels").write_text(
        "".join(lab + "\n" for lab in labels), encoding="utf-8")
    meta = {"source": records[0].source, "normalization": normalization}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_predictions(path: str | Path, normalize: str = "none") -> list[PredictionRecord]:
    """Load a score matrix; normalize='softmax' converts logit rows to
    probabilities at load time (for externally produced acoustic scores)."""
    path = Path(path)
    mat = _read_matrix(path)
    ids = _read_id_sidecar(path.with_suffix(path.suffix + ".ids"), mat.shape[0])
    labels = [ln for ln in path.with_suffix(path.suffix + ".labels")
              .read_text(encoding="utf-8").splitlines() if ln]
    if len(labels) != mat.shape[1]:
        raise FormatError(f"{path}: {len(labels)} labels for {mat.shape[1]} columns")
    if normalize == "softmax":
        mat = mat - mat.max(axis=1, keepdims=True)
        e = np.exp(mat)
        mat = e / e.sum(axis=1, keepdims=True)
    elif normalize != "none":
        raise ValidationError(f"unknown normalization {normalize!r}")
    source = path.name
    meta_path = path.with_suffix(path.suffix + ".meta.json")
    if meta_path.exists():
        source = json.loads(meta_path.read_text(encoding="utf-8")).get("source", source)
    return [
        PredictionRecord.from_scores(uid, row, labels, source=source)
        for uid, row in zip(ids, mat)
    ]


def save_embeddings(vectors: dict[str, np.ndarray], path: str | Path) -> None:
    """Acoustic utterance embeddings as a matrix + .ids sidecar."""
    if not vectors:
        raise ValidationError("no embeddings to save")
    ids = sorted(vectors)
    mat = np.stack([vectors[u] for u in ids])
    path = Path(path)
    _write_matrix(path, mat)
    path.with_suffix(path.suffix + ".ids").write_text(
        "".join(u + "\n" for u in ids), encoding="utf-8")


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    mat = _read_matrix(path)
    ids = _read_id_sidecar(path.with_suffix(path.suffix + ".ids"), mat.shape[0])
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate ids in sidecar")
    return {u: mat[i] for i, u in enumerate(ids)}
