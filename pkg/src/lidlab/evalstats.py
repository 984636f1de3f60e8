"""Evaluation statistics: grouped accuracy, speaker cluster bootstrap,
macro averages, McNemar paired tests, error profiles, and accent-language
confusion rates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

EVAL_TSV_HEADER = ["utt_id", "speaker_id", "language", "accent", "predicted"]


@dataclass(frozen=True)
class EvalRow:
    utt_id: str
    speaker_id: str
    language: str
    accent: str
    predicted: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.language


class EvalResult:
    """Per-utterance outcomes, keyed by unique utt_id."""

    def __init__(self, rows: list[EvalRow]):
        if not rows:
            raise ValidationError("empty eval result")
        ids = [r.utt_id for r in rows]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate utt_ids in eval result")
        self.rows = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def load_tsv(cls, path: str | Path) -> "EvalResult":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].split("\t") != EVAL_TSV_HEADER:
            raise ValidationError(f"{path}: missing or bad header")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(EVAL_TSV_HEADER):
                raise ValidationError(f"{path}:{lineno}: expected {len(EVAL_TSV_HEADER)} fields")
            rows.append(EvalRow(*parts))
        return cls(rows)

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(EVAL_TSV_HEADER) + "\n")
            for r in self.rows:
                fh.write("\t".join([r.utt_id, r.speaker_id, r.language, r.accent,
                                    r.predicted]) + "\n")


def _group_key(row: EvalRow, group_by: str) -> str:
    if group_by == "accent":
        return row.accent
    if group_by == "language":
        return row.language
    if group_by == "none":
        return "all"
    raise ValidationError(f"unknown group_by {group_by!r}")


def accuracy(r: EvalResult, group_by: str = "none") -> dict[str, dict]:
    """Fraction correct per group with counts."""
    groups: dict[str, list[bool]] = {}
    for row in r.rows:
        groups.setdefault(_group_key(row, group_by), []).append(row.correct)
    return {
        g: {"n": len(marks), "accuracy": sum(marks) / len(marks)}
        for g, marks in sorted(groups.items())
    }


def bootstrap_speaker_ci(
    r: EvalResult,
    n_boot: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
    equal_speaker_weight: bool = False,
) -> tuple[float, float, float]:
    """Speaker-level cluster bootstrap of overall accuracy.

    Each replicate resamples speakers with replacement and pools their
    utterances (so speakers weigh by utterance count); equal_speaker_weight
    instead averages per-speaker accuracies. Replicate i draws from a
    generator seeded by (seed, i), so results do not depend on scheduling.
    Returns (mean of replicates, lo, hi) percentile bounds.
    """
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    speakers = sorted({row.speaker_id for row in r.rows})
    n_correct = np.zeros(len(speakers))
    n_total = np.zeros(len(speakers))
    idx = {s: i for i, s in enumerate(speakers)}
    for row in r.rows:
        i = idx[row.speaker_id]
        n_total[i] += 1
        n_correct[i] += row.correct
    per_speaker = n_correct / n_total
    stats = np.empty(n_boot)
    ns = len(speakers)
    for i in range(n_boot):
        rng = np.random.default_rng((seed, i))
        pick = rng.integers(0, ns, size=ns)
        if equal_speaker_weight:
            stats[i] = per_speaker[pick].mean()
        else:
            stats[i] = n_correct[pick].sum() / n_total[pick].sum()
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(stats.mean()), float(lo), float(hi)


def macro_average(r: EvalResult, group_by: str = "accent") -> tuple[float, float]:
    """Unweighted mean and population std of per-group accuracies."""
    table = accuracy(r, group_by)
    accs = np.array([v["accuracy"] for v in table.values()])
    return float(accs.mean()), float(accs.std())


@dataclass(frozen=True)
class McNemarResult:
    method: str            # "exact" or "chi2"
    statistic: float | None
    p_value: float
    b_count: int           # a correct, b wrong
    c_count: int           # a wrong, b correct


EXACT_THRESHOLD = 20


def mcnemar(a: EvalResult, b: EvalResult) -> McNemarResult:
    """Paired McNemar test on discordant outcomes.

    Fewer than 20 discordant pairs: exact two-sided binomial
    p = min(1, 2 * P(X <= min(b,c))) with X ~ Binomial(b+c, 1/2); otherwise
    the continuity-corrected chi-square statistic (|b-c|-1)^2/(b+c) with the
    chi-square(1) tail erfc(sqrt(x/2)).
    """
    a_map = {row.utt_id: row.correct for row in a.rows}
    b_map = {row.utt_id: row.correct for row in b.rows}
    if set(a_map) != set(b_map):
        diff = sorted(set(a_map) ^ set(b_map))
        raise ValidationError(f"utt_id sets differ: {diff[:10]}")
    bc = sum(1 for u, ok in a_map.items() if ok and not b_map[u])
    cc = sum(1 for u, ok in a_map.items() if not ok and b_map[u])
    n = bc + cc
    if n == 0:
        return McNemarResult("exact", None, 1.0, bc, cc)
    if n < EXACT_THRESHOLD:
        m = min(bc, cc)
        tail = sum(math.comb(n, k) for k in range(m + 1)) / 2 ** n
        return McNemarResult("exact", None, min(1.0, 2.0 * tail), bc, cc)
    stat = (abs(bc - cc) - 1) ** 2 / n
    p = math.erfc(math.sqrt(stat / 2.0))
    return McNemarResult("chi2", stat, p, bc, cc)


def error_profile(r: EvalResult, top_k: int = 3,
                  labels: list[str] | None = None) -> dict[str, list[tuple[str, float]]]:
    """Per accent: the top_k wrongly predicted languages with their share of
    that accent's total error (percent). Ties break by label index."""
    by_accent: dict[str, dict[str, int]] = {}
    for row in r.rows:
        by_accent.setdefault(row.accent, {})
        if not row.correct:
            by_accent[row.accent][row.predicted] = \
                by_accent[row.accent].get(row.predicted, 0) + 1
    if labels is None:
        labels = sorted({row.predicted for row in r.rows} | {row.language for row in r.rows})
    order = {lab: i for i, lab in enumerate(labels)}
    out: dict[str, list[tuple[str, float]]] = {}
    for accent, counts in sorted(by_accent.items()):
        total = sum(counts.values())
        if total == 0:
            out[accent] = []
            continue
        ranked = sorted(counts.items(),
                        key=lambda kv: (-kv[1], order.get(kv[0], len(order))))
        out[accent] = [(lab, 100.0 * c / total) for lab, c in ranked[:top_k]]
    return out


def confusion_rate(
    r: EvalResult,
    confusion_map: dict[str, set[str] | list[str]],
    strict: bool = True,
    skip: set[str] | None = None,
) -> tuple[dict[str, dict], float]:
    """Per accent, the fraction of errors predicted inside the accent's
    confusion set; plus the error-weighted aggregate. Accents with zero
    errors report rate 0.0."""
    skip = skip or set()
    per_accent: dict[str, dict] = {}
    total_errors = 0
    total_confused = 0
    accents = sorted({row.accent for row in r.rows})
    for accent in accents:
        if accent in skip:
            continue
        if accent not in confusion_map:
            if strict:
                raise ValidationError(f"accent {accent!r} not in confusion map")
            continue
        conf = set(confusion_map[accent])
        errors = [row for row in r.rows if row.accent == accent and not row.correct]
        confused = sum(row.predicted in conf for row in errors)
        rate = confused / len(errors) if errors else 0.0
        per_accent[accent] = {"n_errors": len(errors), "n_confused": confused,
                              "rate": rate}
        total_errors += len(errors)
        total_confused += confused
    aggregate = total_confused / total_errors if total_errors else 0.0
    return per_accent, aggregate


def load_confusion_map(path: str | Path) -> dict[str, set[str]]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected an object accent -> [languages]")
    return {acc: set(langs) for acc, langs in raw.items()}


# ---------------------------------------------------------------------------
# Report rendering

def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table."""
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"
