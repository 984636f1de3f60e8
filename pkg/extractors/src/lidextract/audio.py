"""WAV input: RIFF PCM 16-bit LE, 16 kHz, mono.

Other rates/layouts are rejected rather than resampled; conversion from
arbitrary upstream formats happens before extraction.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import UtteranceError

SAMPLE_RATE = 16_000


def read_wav(path: str | Path) -> np.ndarray:
    """Decode to float64 samples in [-1, 1)."""
    path = Path(path)
    if not path.exists():
        raise UtteranceError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise UtteranceError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise UtteranceError(f"{path}: expected 16-bit PCM")
            if wf.getframerate() != SAMPLE_RATE:
                raise UtteranceError(
                    f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as e:
        raise UtteranceError(f"{path}: not a valid WAV file: {e}") from None
    if not raw:
        raise UtteranceError(f"{path}: zero-length audio")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
