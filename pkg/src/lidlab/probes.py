"""Behavioral probes: block-order reversal and windowed majority voting.

Both probes run at the token level against any scorer callable
(TokenSequence -> PredictionRecord); waveform-level reversal emits WAV files
for scoring by external acoustic models.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenSequence, Utterance, Waveform, write_wav
from .errors import ValidationError
from .fusion import PredictionRecord


@dataclass(frozen=True)
class ProbeConfig:
    chunk_s: float
    mode: str = "reverse_blocks"         # or "window_vote"
    level: str = "tokens"                # or "waveform"
    token_rate_hz: float = 10.0

    def __post_init__(self):
        if self.chunk_s <= 0:
            raise ValidationError("chunk_s must be > 0")
        if self.mode not in ("reverse_blocks", "window_vote"):
            raise ValidationError(f"unknown probe mode {self.mode!r}")
        if self.level not in ("tokens", "waveform"):
            raise ValidationError(f"unknown probe level {self.level!r}")
        if self.level == "tokens" and self.token_rate_hz <= 0:
            raise ValidationError("token_rate_hz must be > 0")


def block_spans(length: int, block_len: int) -> list[tuple[int, int]]:
    """(start, end) boundaries of the consecutive blocks, last one possibly
    short. These are the boundaries a reversal records; undoing a reversal of
    a non-multiple length must reuse them rather than re-chunking."""
    if block_len < 1:
        raise ValidationError("block_len must be >= 1")
    if length == 0:
        raise ValidationError("empty input")
    return [(s, min(s + block_len, length)) for s in range(0, length, block_len)]


def _block_reverse_seq(seq, block_len: int):
    return [seq[s:e] for s, e in reversed(block_spans(len(seq), block_len))]


def block_reverse_tokens(ts: TokenSequence, block_len: int) -> TokenSequence:
    """Reverse the order of consecutive token blocks, keeping within-block
    order; a short final block is kept short. block_len >= length is the
    identity."""
    blocks = _block_reverse_seq(ts.tokens, block_len)
    tokens = tuple(t for b in blocks for t in b)
    return TokenSequence(utt_id=ts.utt_id, tokens=tokens)


def block_reverse_waveform(w: Waveform, block_len_samples: int) -> Waveform:
    blocks = _block_reverse_seq(w.samples, block_len_samples)
    return Waveform(samples=np.concatenate(blocks), sample_rate_hz=w.sample_rate_hz)


def emit_reversed_wavs(items: list[tuple[Utterance, Waveform]], chunk_s: float,
                       out_dir: str | Path) -> list[Path]:
    """Write ``<utt_id>.rev<T>.wav`` files for external acoustic scoring."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for utt, w in items:
        block = int(round(chunk_s * w.sample_rate_hz))
        rev = block_reverse_waveform(w, block)
        path = out_dir / f"{utt.utt_id}.rev{chunk_s:g}.wav"
        write_wav(rev, path)
        paths.append(path)
    return paths


def reversal_degradation(
    scorer,
    items: list[tuple[Utterance, TokenSequence]],
    block_sizes: list[int],
    group_by: str = "accent",
) -> list[dict]:
    """Relative accuracy change (%) under block reversal, per group and block
    size. Groups with no eligible utterances are reported with n=0."""
    if group_by not in ("accent", "language", "none"):
        raise ValidationError(f"unknown group_by {group_by!r}")

    def group_of(u: Utterance) -> str:
        if group_by == "accent":
            return u.accent
        if group_by == "language":
            return u.language
        return "all"

    rows = []
    groups = sorted({group_of(u) for u, _ in items})
    for block in block_sizes:
        eligible = [(u, ts) for u, ts in items if len(ts) >= 2 * block]
        for grp in groups:
            members = [(u, ts) for u, ts in eligible if group_of(u) == grp]
            if not members:
                rows.append({"group": grp, "block": block, "n": 0,
                             "acc_original": None, "acc_reversed": None,
                             "relative_change_pct": None})
                continue
            n_orig = sum(scorer(ts).predicted == u.language for u, ts in members)
            n_rev = sum(
                scorer(block_reverse_tokens(ts, block)).predicted == u.language
                for u, ts in members)
            acc_o = n_orig / len(members)
            acc_r = n_rev / len(members)
            change = 100.0 * (acc_r - acc_o) / acc_o if acc_o > 0 else float("nan")
            rows.append({"group": grp, "block": block, "n": len(members),
                         "acc_original": acc_o, "acc_reversed": acc_r,
                         "relative_change_pct": change})
    return rows


def window_vote(scorer, ts: TokenSequence, window_len: int,
                min_tail: int = 1) -> PredictionRecord:
    """Score non-overlapping windows and majority-vote the predicted labels.

    Ties break by highest summed probability over the tied labels, then by
    lowest label index. The returned record's scores are the mean window
    scores (for auditing; the vote decides ``predicted``).
    """
    if window_len < 1:
        raise ValidationError("window_len must be >= 1")
    if len(ts) < window_len:
        raise ValidationError(f"{ts.utt_id}: shorter than one window")
    windows = []
    for s in range(0, len(ts), window_len):
        piece = ts.tokens[s:s + window_len]
        if len(piece) == window_len or len(piece) >= min_tail:
            windows.append(TokenSequence(utt_id=ts.utt_id, tokens=piece))
    records = [scorer(w) for w in windows]
    labels = records[0].labels
    votes = tuple(r.predicted for r in records)
    counts = Counter(votes)
    top = max(counts.values())
    tied = [lab for lab, c in counts.items() if c == top]
    if len(tied) == 1:
        winner = tied[0]
    else:
        sums = {lab: sum(float(r.scores[labels.index(lab)]) for r in records)
                for lab in tied}
        best = max(sums.values())
        tied_again = [lab for lab in tied if sums[lab] == best]
        winner = min(tied_again, key=labels.index)
    # scores carry the mean window distribution for auditing; the voted label
    # decides `predicted` and may differ from the argmax of the mean
    mean_scores = np.mean([r.scores for r in records], axis=0)
    return PredictionRecord(
        utt_id=ts.utt_id, scores=mean_scores, labels=labels,
        predicted=winner, source="vote", votes=votes)


def vote_accuracy_sweep(
    scorer,
    items: list[tuple[Utterance, TokenSequence]],
    window_sizes: list[int],
    group_by: str = "accent",
    min_tail: int = 1,
) -> tuple[list[dict], list[dict]]:
    """Accuracy per (group, window size) plus a per-utterance audit log."""
    if group_by not in ("accent", "language", "none"):
        raise ValidationError(f"unknown group_by {group_by!r}")

    def group_of(u: Utterance) -> str:
        if group_by == "accent":
            return u.accent
        if group_by == "language":
            return u.language
        return "all"

    rows = []
    audit = []
    groups = sorted({group_of(u) for u, _ in items})
    for win in window_sizes:
        eligible = [(u, ts) for u, ts in items if len(ts) >= win]
        per_group: dict[str, list[bool]] = {g: [] for g in groups}
        for u, ts in sorted(eligible, key=lambda p: p[0].utt_id):
            rec = window_vote(scorer, ts, win, min_tail=min_tail)
            ok = rec.predicted == u.language
            per_group[group_of(u)].append(ok)
            audit.append({"utt_id": u.utt_id, "window": win,
                          "votes": list(rec.votes), "predicted": rec.predicted,
                          "language": u.language, "correct": ok})
        for grp in groups:
            marks = per_group[grp]
            rows.append({"group": grp, "window": win, "n": len(marks),
                         "accuracy": (sum(marks) / len(marks)) if marks else None})
    return rows, audit
