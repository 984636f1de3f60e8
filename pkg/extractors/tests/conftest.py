"""Shared fixtures: a small synthetic WAV corpus with a manifest."""

import json

import numpy as np
import pytest

from extract_helpers import make_clip, write_wav


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    """Ten clips of varying length with a manifest, as (directory, records)."""
    root = tmp_path_factory.mktemp("smoke")
    rng = np.random.default_rng(20240613)
    durations = [0.5, 0.6, 0.75, 0.8, 1.0, 1.0, 1.1, 1.25, 1.4, 1.5]
    records = []
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for i, dur in enumerate(durations):
            utt_id = f"u{i:03d}"
            wav_name = f"{utt_id}.wav"
            write_wav(root / wav_name, make_clip(rng, dur))
            rec = {"utt_id": utt_id, "speaker_id": f"s{i % 4}",
                   "language": "lang_a" if i % 2 == 0 else "lang_b",
                   "accent": "native", "duration_s": dur,
                   "audio": wav_name, "split": "test"}
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return root, records
