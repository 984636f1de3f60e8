"""Batch extraction over a JSON-lines manifest.

Per-utterance failures are caught, recorded in the summary, and skipped —
one unreadable clip never aborts the batch. The summary JSON records the
model id, per-kind counts, every failure with its error text, and warnings
for degenerate outputs (e.g. a silent clip yielding no phones).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .audio import read_wav
from .backends import resolve_backend
from .errors import ExtractError, UtteranceError

KINDS = ("phones", "frames", "embedding", "logits")

MIN_PHONES = 2   # shorter phone outputs are flagged as warnings


@dataclass(frozen=True)
class ExtractionJob:
    manifest: Path
    kind: str
    model_id: str
    out_dir: Path
    device: str = "cpu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExtractError(f"unknown extraction kind {self.kind!r}; "
                               f"expected one of {KINDS}")


def load_manifest(path: Path) -> list[dict]:
    """Read the classifier toolkit's JSON-lines manifest; every record needs
    utt_id, language, and an audio path (relative to the manifest)."""
    if not path.exists():
        raise ExtractError(f"manifest not found: {path}")
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ExtractError(f"{path}:{lineno}: invalid JSON: {e}") from None
            missing = {"utt_id", "language", "audio"} - set(rec)
            if missing:
                raise ExtractError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            if rec["utt_id"] in seen:
                raise ExtractError(f"{path}:{lineno}: duplicate utt_id {rec['utt_id']!r}")
            seen.add(rec["utt_id"])
            records.append(rec)
    if not records:
        raise ExtractError(f"{path}: empty manifest")
    return records


def run_job(job: ExtractionJob) -> dict:
    records = load_manifest(Path(job.manifest))
    backend = resolve_backend(job.model_id, job.device)
    audio_base = Path(job.manifest).parent
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    labels = sorted({r["language"] for r in records})
    failures: list[dict] = []
    warnings: list[dict] = []
    outputs: list[str] = []

    token_seqs: list[tuple[str, tuple[str, ...]]] = []
    vectors: dict[str, np.ndarray] = {}
    stride_ms = None
    if job.kind == "frames":
        (out / "frames").mkdir(exist_ok=True)

    n_ok = 0
    for rec in records:
        utt_id = rec["utt_id"]
        try:
            wav = read_wav(audio_base / rec["audio"])
            if job.kind == "frames":
                feats, stride_ms = backend.frames(wav)
                path = out / "frames" / f"{utt_id}.frm"
                formats.write_frames(path, feats, stride_ms)
                outputs.append(str(path.relative_to(out)))
            elif job.kind == "phones":
                tokens = backend.phones(wav)
                if len(tokens) < MIN_PHONES:
                    warnings.append({"utt_id": utt_id,
                                     "warning": f"short phone output ({len(tokens)} tokens)"})
                token_seqs.append((utt_id, tokens))
            elif job.kind == "embedding":
                vectors[utt_id] = backend.embedding(wav)
            else:
                vectors[utt_id] = backend.logits(wav, labels)
            n_ok += 1
        except (UtteranceError, ExtractError) as e:
            failures.append({"utt_id": utt_id, "error": str(e)})

    if n_ok == 0:
        raise ExtractError("every utterance failed; refusing to write outputs")

    if job.kind == "phones":
        formats.write_token_file(token_seqs, out / "tokens.tsv")
        formats.write_vocab(formats.harvest_vocab(token_seqs), out / "vocab.txt")
        outputs += ["tokens.tsv", "vocab.txt"]
    elif job.kind == "embedding":
        ids = sorted(vectors)
        formats.write_matrix(out / "embeddings.bin", ids,
                             np.stack([vectors[u] for u in ids]))
        outputs += ["embeddings.bin"]
    elif job.kind == "logits":
        ids = sorted(vectors)
        formats.write_matrix(out / "logits.bin", ids,
                             np.stack([vectors[u] for u in ids]),
                             labels=labels,
                             meta={"source": job.model_id, "normalization": "logits"})
        outputs += ["logits.bin"]

    summary = {
        "kind": job.kind,
        "model_id": job.model_id,
        "n_utterances": len(records),
        "n_ok": n_ok,
        "n_failed": len(failures),
        "failures": failures,
        "warnings": warnings,
        "outputs": sorted(outputs),
    }
    if stride_ms is not None:
        summary["stride_ms"] = stride_ms
    if job.kind == "logits":
        summary["labels"] = labels
    (out / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return summary
