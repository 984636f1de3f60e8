"""Importable test helpers: WAV writing and clip synthesis."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16_000


def write_wav(path: Path, samples: np.ndarray) -> None:
    ints = np.clip(np.rint(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(ints.tobytes())


def make_clip(rng, duration_s: float) -> np.ndarray:
    """A tone-plus-noise clip with an amplitude contour, so energy and
    zero-crossing statistics vary across frames."""
    n = int(duration_s * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    freq = float(rng.uniform(120, 2000))
    envelope = 0.3 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t)
    clip = envelope * np.sin(2 * np.pi * freq * t)
    clip += 0.05 * rng.standard_normal(n)
    return np.clip(clip, -0.99, 0.99)
