"""Writers for the interchange formats the classifier toolkit consumes.

All binary layouts are little-endian with an 8-byte magic:

- frames:  ``LIDFRMS1`` | uint32 T, D, stride_ms | float32 T*D row-major
- matrix:  ``LIDPRD1\\0`` | uint32 rows, cols    | float32 rows*cols row-major,
  with one row id per line in a ``.ids`` sidecar, optional ``.labels`` column
  names, and an optional ``.meta.json`` sidecar
- tokens:  TSV ``utt_id<TAB>tok1 tok2 ...``
- vocab:   one symbol per line; reserved ``<pad>``/``<unk>`` rows first, then
  symbols in first-seen order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ExtractError

FRAMES_MAGIC = b"LIDFRMS1"
MATRIX_MAGIC = b"LIDPRD1\x00"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


def write_frames(path: str | Path, frames: np.ndarray, stride_ms: int) -> None:
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ExtractError("frames must be a non-empty 2-D matrix")
    if stride_ms <= 0:
        raise ExtractError("stride_ms must be positive")
    payload = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAMES_MAGIC)
        fh.write(struct.pack("<III", payload.shape[0], payload.shape[1], stride_ms))
        fh.write(payload.tobytes())


def write_matrix(path: str | Path, ids: list[str], mat: np.ndarray,
                 labels: list[str] | None = None,
                 meta: dict | None = None) -> None:
    if mat.ndim != 2 or mat.shape[0] != len(ids):
        raise ExtractError(f"matrix rows ({mat.shape[0]}) must match ids ({len(ids)})")
    if len(set(ids)) != len(ids):
        raise ExtractError("duplicate row ids")
    path = Path(path)
    payload = np.ascontiguousarray(mat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", payload.shape[0], payload.shape[1]))
        fh.write(payload.tobytes())
    path.with_suffix(path.suffix + ".ids").write_text(
        "".join(u + "\n" for u in ids), encoding="utf-8")
    if labels is not None:
        if len(labels) != mat.shape[1]:
            raise ExtractError(f"{len(labels)} labels for {mat.shape[1]} columns")
        path.with_suffix(path.suffix + ".labels").write_text(
            "".join(lab + "\n" for lab in labels), encoding="utf-8")
    if meta is not None:
        path.with_suffix(path.suffix + ".meta.json").write_text(
            json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def write_token_file(seqs: list[tuple[str, tuple[str, ...]]], path: str | Path) -> None:
    seen = set()
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, tokens in seqs:
            if utt_id in seen:
                raise ExtractError(f"duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            if any(t == "" or " " in t or "\t" in t for t in tokens):
                raise ExtractError(f"{utt_id}: token with whitespace or empty token")
            fh.write(utt_id + "\t" + " ".join(tokens) + "\n")


def harvest_vocab(seqs: list[tuple[str, tuple[str, ...]]]) -> list[str]:
    """Reserved rows first, then symbols in first-seen order."""
    vocab = [PAD_TOKEN, UNK_TOKEN]
    seen = set(vocab)
    for _, tokens in seqs:
        for t in tokens:
            if t not in seen:
                seen.add(t)
                vocab.append(t)
    return vocab


def write_vocab(vocab: list[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for symbol in vocab:
            fh.write(symbol + "\n")
