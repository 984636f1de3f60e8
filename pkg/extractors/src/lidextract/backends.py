"""Extraction backends.

A backend turns a 16 kHz mono waveform into one of four outputs:

- ``frames``: a T x D frame feature matrix plus its stride in ms
- ``phones``: a discrete symbol sequence
- ``embedding``: a fixed-size utterance vector
- ``logits``: one unnormalized score per candidate language

Model ids select the backend by scheme:

- ``mock:<name>`` — deterministic signal-derived features (log filterbank
  energies, energy/zero-crossing phone states, stats-pooled embeddings, and a
  seeded linear head). No pretrained weights, no network; the ``<name>``
  seeds the logit head so different mock ids give different score functions.
  These exercise the full pipeline and are what the tests run on.
- ``hf:<repo-id>`` — pretrained checkpoints through ``transformers``
  (e.g. ``hf:facebook/wav2vec2-base`` for frames, a phoneme-CTC checkpoint
  for phones). Requires the ``[hf]`` extra and downloadable weights.
"""

from __future__ import annotations

import zlib

import numpy as np

from .audio import SAMPLE_RATE
from .errors import ExtractError

STRIDE_MS = 20
WINDOW_MS = 25
N_BANDS = 16

_HOP = SAMPLE_RATE * STRIDE_MS // 1000      # 320 samples
_WIN = SAMPLE_RATE * WINDOW_MS // 1000      # 400 samples

# phone-state thresholds: frame log-energy split, zero-crossing-rate split
_SILENCE_ENERGY = 1e-6
_ZCR_SPLIT = 0.25
_PHONE_SYMBOLS = (("aa", "eh"), ("ss", "sh"))   # [zcr_high][energy_high]


class MockBackend:
    """Deterministic signal-derived extraction; the waveform is the only
    input, so identical audio always yields identical outputs."""

    def __init__(self, model_id: str):
        self.model_id = model_id
        self._seed = zlib.crc32(model_id.encode("utf-8"))

    def frames(self, wav: np.ndarray) -> tuple[np.ndarray, int]:
        """Log filterbank energies; one frame per STRIDE_MS hop, so the frame
        count is ceil(n_samples / hop). Final frames are zero-padded to the
        analysis window."""
        window = np.hanning(_WIN)
        rows = []
        for start in range(0, len(wav), _HOP):
            seg = wav[start:start + _WIN]
            if len(seg) < _WIN:
                seg = np.pad(seg, (0, _WIN - len(seg)))
            spectrum = np.abs(np.fft.rfft(seg * window)) ** 2
            bands = [float(b.sum()) for b in np.array_split(spectrum, N_BANDS)]
            rows.append(np.log(np.asarray(bands) + 1e-10))
        return np.stack(rows), STRIDE_MS

    def phones(self, wav: np.ndarray) -> tuple[str, ...]:
        """Energy/zero-crossing state per hop, consecutive repeats collapsed;
        sub-threshold (silent) hops emit nothing."""
        symbols: list[str] = []
        for start in range(0, len(wav), _HOP):
            seg = wav[start:start + _HOP]
            energy = float(np.mean(seg ** 2))
            if energy < _SILENCE_ENERGY:
                continue
            zcr = float(np.mean(np.signbit(seg[:-1]) != np.signbit(seg[1:]))) \
                if len(seg) > 1 else 0.0
            sym = _PHONE_SYMBOLS[zcr >= _ZCR_SPLIT][energy >= 1e-2]
            if not symbols or symbols[-1] != sym:
                symbols.append(sym)
        return tuple(symbols)

    def embedding(self, wav: np.ndarray) -> np.ndarray:
        """Stats pooling over the frame features: mean and std per band."""
        feats, _ = self.frames(wav)
        return np.concatenate([feats.mean(axis=0), feats.std(axis=0)])

    def logits(self, wav: np.ndarray, labels: list[str]) -> np.ndarray:
        """Seeded linear head over the utterance embedding; the head depends
        only on (model id, label count), so scores are reproducible."""
        emb = self.embedding(wav)
        rng = np.random.default_rng((self._seed, len(labels)))
        head = rng.normal(scale=1.0 / np.sqrt(len(emb)), size=(len(labels), len(emb)))
        return head @ emb


class HFBackend:
    """Pretrained checkpoints through transformers; loaded lazily so backend
    resolution never touches the network."""

    FEATURE_LAYER = 8   # hidden layer used for frame features

    def __init__(self, repo_id: str, device: str = "cpu"):
        try:
            import torch                    # noqa: F401
            import transformers             # noqa: F401
        except ImportError as e:
            raise ExtractError(
                f"model {repo_id!r} needs the [hf] extra (torch + transformers): {e}"
            ) from None
        self.repo_id = repo_id
        self.device = device
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            from transformers import AutoModel, AutoProcessor
            self._processor = AutoProcessor.from_pretrained(self.repo_id)
            self._model = AutoModel.from_pretrained(
                self.repo_id, output_hidden_states=True).to(self.device).eval()
        return self._model, self._processor

    def frames(self, wav: np.ndarray) -> tuple[np.ndarray, int]:
        import torch
        model, processor = self._load()
        inputs = processor(wav, sampling_rate=SAMPLE_RATE, return_tensors="pt")
        with torch.no_grad():
            out = model(**{k: v.to(self.device) for k, v in inputs.items()})
        feats = out.hidden_states[self.FEATURE_LAYER][0].cpu().numpy()
        return feats, STRIDE_MS

    def phones(self, wav: np.ndarray) -> tuple[str, ...]:
        import torch
        from transformers import AutoModelForCTC, AutoProcessor
        if self._model is None or not hasattr(self._model, "lm_head"):
            self._processor = AutoProcessor.from_pretrained(self.repo_id)
            self._model = AutoModelForCTC.from_pretrained(
                self.repo_id).to(self.device).eval()
        inputs = self._processor(wav, sampling_rate=SAMPLE_RATE, return_tensors="pt")
        with torch.no_grad():
            logits = self._model(**{k: v.to(self.device) for k, v in inputs.items()}).logits
        ids = logits.argmax(dim=-1)[0].cpu().tolist()
        text = self._processor.batch_decode([ids])[0]
        return tuple(text.split())

    def embedding(self, wav: np.ndarray) -> np.ndarray:
        feats, _ = self.frames(wav)
        return np.concatenate([feats.mean(axis=0), feats.std(axis=0)])

    def logits(self, wav: np.ndarray, labels: list[str]) -> np.ndarray:
        raise ExtractError(
            "hf logits need a classification checkpoint whose label space "
            "matches the manifest; none is wired up here")


def resolve_backend(model_id: str, device: str = "cpu"):
    if model_id.startswith("mock:"):
        return MockBackend(model_id)
    if model_id.startswith("hf:"):
        return HFBackend(model_id[len("hf:"):], device)
    raise ExtractError(
        f"unknown model id scheme {model_id!r}; expected 'mock:<name>' or 'hf:<repo>'")
