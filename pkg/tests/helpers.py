"""Importable constructors shared across test modules."""

from __future__ import annotations

import numpy as np

from lidlab.corpus import TokenSequence
from lidlab.fusion import PredictionRecord


def make_record(utt_id: str, scores, labels=("lang_a", "lang_b"), **kw) -> PredictionRecord:
    return PredictionRecord.from_scores(utt_id, np.asarray(scores, dtype=np.float64),
                                        tuple(labels), **kw)


def make_seq(utt_id: str, tokens) -> TokenSequence:
    return TokenSequence(utt_id=utt_id, tokens=tuple(tokens))
