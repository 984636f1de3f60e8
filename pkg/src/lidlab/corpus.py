"""Corpus data model: manifests, WAV I/O, fixed-length chunking, token files,
vocabularies, and a seeded synthetic phonotactic corpus generator.

The synthetic generator produces per-language bigram token streams optionally
distorted by per-accent phone substitution maps, which is the desk-scale
stand-in for L1-colored L2 speech used throughout the test suite.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

SAMPLE_RATE = 16_000
SPLITS = ("train", "dev", "test")

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

MANIFEST_KEYS = {"utt_id", "speaker_id", "language", "accent", "duration_s", "audio", "split"}


@dataclass(frozen=True)
class Utterance:
    """One labeled speech segment; the unit of training and evaluation."""

    utt_id: str
    speaker_id: str
    language: str
    accent: str
    duration_s: float
    audio_path: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValidationError(f"{self.utt_id}: duration_s must be > 0, got {self.duration_s}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.utt_id}: unknown split {self.split!r}")


@dataclass(frozen=True)
class TokenSequence:
    """Ordered discrete tokens (phones or codebook units) for one utterance."""

    utt_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if any(t == "" for t in self.tokens):
            raise ValidationError(f"{self.utt_id}: empty token")

    def __len__(self) -> int:
        return len(self.tokens)


class LabelSpace:
    """Ordered set of language labels; every score vector in the system has
    length ``len(labels)`` against exactly one of these."""

    def __init__(self, languages: list[str] | tuple[str, ...]):
        if len(set(languages)) != len(languages):
            raise ValidationError("duplicate language labels")
        self.languages: tuple[str, ...] = tuple(languages)
        self._index = {lab: i for i, lab in enumerate(self.languages)}

    def __len__(self) -> int:
        return len(self.languages)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSpace) and self.languages == other.languages

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"label {label!r} not in label space") from None

    def __contains__(self, label: str) -> bool:
        return label in self._index


@dataclass(frozen=True)
class Waveform:
    """Mono audio at a fixed sample rate; amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise ValidationError("waveform must be 1-D")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Manifest I/O (UTF-8 JSON lines)

def load_manifest(path: str | Path) -> list[Utterance]:
    """Parse a JSON-lines manifest; rejects the whole file on any bad line."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    utts: list[Utterance] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {e}") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: record is not an object")
            unknown = set(rec) - MANIFEST_KEYS
            if unknown:
                raise ValidationError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            missing = MANIFEST_KEYS - {"audio"} - set(rec)
            if missing:
                raise ValidationError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            try:
                utt = Utterance(
                    utt_id=rec["utt_id"],
                    speaker_id=rec["speaker_id"],
                    language=rec["language"],
                    accent=rec["accent"],
                    duration_s=float(rec["duration_s"]),
                    audio_path=rec.get("audio"),
                    split=rec["split"],
                )
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None
            if utt.utt_id in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate utt_id {utt.utt_id!r} "
                    f"(first seen on line {seen[utt.utt_id]})"
                )
            seen[utt.utt_id] = lineno
            utts.append(utt)
    return utts


def save_manifest(utts: list[Utterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            rec = {
                "utt_id": u.utt_id,
                "speaker_id": u.speaker_id,
                "language": u.language,
                "accent": u.accent,
                "duration_s": u.duration_s,
                "split": u.split,
            }
            if u.audio_path is not None:
                rec["audio"] = u.audio_path
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# WAV I/O: RIFF PCM 16-bit LE, 16 kHz, mono. Other rates are rejected, not
# resampled; feature extractors resample upstream.

def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate_hz=SAMPLE_RATE)


def write_wav(w: Waveform, path: str | Path) -> None:
    if w.sample_rate_hz != SAMPLE_RATE:
        raise ValidationError(f"can only write {SAMPLE_RATE} Hz audio")
    ints = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(ints.tobytes())


def check_audio_duration(utt: Utterance, w: Waveform, tol_s: float = 0.05) -> None:
    """Decoded duration must match the manifest within 50 ms."""
    if abs(w.duration_s - utt.duration_s) > tol_s:
        raise ValidationError(
            f"{utt.utt_id}: audio duration {w.duration_s:.3f}s disagrees with "
            f"manifest {utt.duration_s:.3f}s"
        )


# ---------------------------------------------------------------------------
# Chunking

def chunk_utterance(w: Waveform, chunk_s: float, min_tail_s: float = 1.0) -> list[Waveform]:
    """Split into consecutive non-overlapping chunks of exactly chunk_s; the
    final shorter chunk is kept iff it lasts at least min_tail_s."""
    if chunk_s <= 0:
        raise ValidationError("chunk_s must be > 0")
    if min_tail_s < 0:
        raise ValidationError("min_tail_s must be >= 0")
    if len(w) == 0:
        raise ValidationError("empty waveform")
    n = int(round(chunk_s * w.sample_rate_hz))
    min_tail = min_tail_s * w.sample_rate_hz
    chunks = []
    for start in range(0, len(w), n):
        piece = w.samples[start:start + n]
        if len(piece) == n or len(piece) >= min_tail:
            chunks.append(Waveform(samples=piece, sample_rate_hz=w.sample_rate_hz))
    return chunks


def chunk_tokens(tokens: tuple[str, ...], chunk_len: int, min_tail: int = 1) -> list[tuple[str, ...]]:
    """Token-level analogue of chunk_utterance."""
    if chunk_len <= 0:
        raise ValidationError("chunk_len must be > 0")
    if not tokens:
        raise ValidationError("empty token sequence")
    out = []
    for start in range(0, len(tokens), chunk_len):
        piece = tokens[start:start + chunk_len]
        if len(piece) == chunk_len or len(piece) >= min_tail:
            out.append(piece)
    return out


# ---------------------------------------------------------------------------
# Token files and vocabularies

def load_token_file(path: str | Path) -> list[TokenSequence]:
    """TSV: ``utt_id<TAB>tok1 tok2 ... tokL``."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"token file not found: {path}")
    seqs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValidationError(f"{path}:{lineno}: missing tab separator")
            utt_id, toks = line.split("\t", 1)
            if utt_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            tokens = tuple(toks.split(" ")) if toks else ()
            try:
                seqs.append(TokenSequence(utt_id=utt_id, tokens=tokens))
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None
    return seqs


def save_token_file(seqs: list[TokenSequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(s.utt_id + "\t" + " ".join(s.tokens) + "\n")


def build_vocab(seqs: list[TokenSequence]) -> list[str]:
    """Vocabulary with reserved <pad>/<unk> rows, then tokens in sorted order."""
    symbols = sorted({t for s in seqs for t in s.tokens})
    return [PAD_TOKEN, UNK_TOKEN] + symbols


def load_vocab(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        vocab = [line.rstrip("\n") for line in fh]
    while vocab and vocab[-1] == "":
        vocab.pop()
    if len(vocab) != len(set(vocab)):
        raise ValidationError(f"{path}: duplicate vocabulary entries")
    return vocab


def save_vocab(vocab: list[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab:
            fh.write(tok + "\n")


# ---------------------------------------------------------------------------
# Synthetic phonotactic corpus

@dataclass
class SynthSpec:
    """Bigram-Markov languages plus per-accent phone substitution maps.

    Bigram chains are the smallest family where sequence order carries signal
    beyond the token inventory, which is exactly the contrast the probes and
    the confusion analysis need.
    """

    phone_alphabet: list[str]
    languages: dict[str, dict]      # lang -> {"initial": {tok: p}, "bigrams": {tok: {tok: p}}}
    accent_maps: dict[str, dict[str, str]]   # accent -> total substitution map
    length_min: int
    length_max: int
    n_speakers: int = 8
    token_rate_hz: float = 10.0
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    _row_tol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        if len(set(self.phone_alphabet)) != len(self.phone_alphabet):
            raise ValidationError("duplicate phones in alphabet")
        alpha = set(self.phone_alphabet)
        if not self.languages:
            raise ValidationError("at least one language required")
        for lang, model in self.languages.items():
            for tok, row in model["bigrams"].items():
                if tok not in alpha:
                    raise ValidationError(f"{lang}: bigram row for unknown phone {tok!r}")
                if set(row) - alpha:
                    raise ValidationError(f"{lang}: bigram targets outside alphabet")
                total = sum(row.values())
                if abs(total - 1.0) > self._row_tol:
                    raise ValidationError(f"{lang}: bigram row {tok!r} sums to {total}")
            init = model.get("initial")
            if init is not None:
                if set(init) - alpha:
                    raise ValidationError(f"{lang}: initial distribution outside alphabet")
                if abs(sum(init.values()) - 1.0) > self._row_tol:
                    raise ValidationError(f"{lang}: initial distribution does not sum to 1")
        for accent, amap in self.accent_maps.items():
            # partial maps are completed with identity so the map is total
            full = {p: amap.get(p, p) for p in self.phone_alphabet}
            if set(amap) - alpha or set(full.values()) - alpha:
                raise ValidationError(f"{accent}: substitution map leaves the alphabet")
            self.accent_maps[accent] = full
        if not (0 < self.length_min <= self.length_max):
            raise ValidationError("need 0 < length_min <= length_max")
        if self.n_speakers < 1:
            raise ValidationError("n_speakers must be >= 1")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValidationError("split fractions must sum to 1")

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(
                phone_alphabet=raw["phone_alphabet"],
                languages=raw["languages"],
                accent_maps={a: dict(m) for a, m in raw["accents"].items()},
                length_min=raw["length"]["min"],
                length_max=raw["length"]["max"],
                n_speakers=raw.get("n_speakers", 8),
                token_rate_hz=raw.get("token_rate_hz", 10.0),
                seed=raw.get("seed", 0),
                split_fractions=tuple(raw.get("split_fractions", (0.8, 0.1, 0.1))),
            )
        except KeyError as e:
            raise ValidationError(f"{path}: missing key {e}") from None

    def label_space(self) -> LabelSpace:
        return LabelSpace(sorted(self.languages))


def _sample_sequence(rng: np.random.Generator, model: dict, alphabet: list[str], length: int) -> list[str]:
    bigrams = model["bigrams"]
    init = model.get("initial")
    if init is None:
        support = sorted(bigrams)
        init = {t: 1.0 / len(support) for t in support}
    toks_init = sorted(init)
    probs_init = np.array([init[t] for t in toks_init])
    cur = toks_init[rng.choice(len(toks_init), p=probs_init / probs_init.sum())]
    seq = [cur]
    for _ in range(length - 1):
        row = bigrams[cur]
        toks = sorted(row)
        p = np.array([row[t] for t in toks])
        cur = toks[rng.choice(len(toks), p=p / p.sum())]
        seq.append(cur)
    return seq


def _split_for_index(i: int, n: int, fractions: tuple[float, float, float]) -> str:
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    if i < n_train:
        return "train"
    if i < n_train + n_dev:
        return "dev"
    return "test"


def synth_corpus(spec: SynthSpec, n_per_cell: int) -> tuple[list[Utterance], list[TokenSequence]]:
    """Emit n_per_cell utterances for every (language, accent) cell.

    Deterministic given (spec, n_per_cell): languages and accents are visited
    in sorted order against a single seeded generator.
    """
    if n_per_cell <= 0:
        raise ValidationError("n_per_cell must be > 0")
    rng = np.random.default_rng(spec.seed)
    utts: list[Utterance] = []
    seqs: list[TokenSequence] = []
    for lang in sorted(spec.languages):
        model = spec.languages[lang]
        for accent in sorted(spec.accent_maps):
            amap = spec.accent_maps[accent]
            for i in range(n_per_cell):
                length = int(rng.integers(spec.length_min, spec.length_max + 1))
                raw = _sample_sequence(rng, model, spec.phone_alphabet, length)
                tokens = tuple(amap[t] for t in raw)
                utt_id = f"{lang}_{accent}_{i:05d}"
                speaker = f"spk_{lang}_{accent}_{i % spec.n_speakers:03d}"
                utts.append(Utterance(
                    utt_id=utt_id,
                    speaker_id=speaker,
                    language=lang,
                    accent=accent,
                    duration_s=length / spec.token_rate_hz,
                    split=_split_for_index(i, n_per_cell, spec.split_fractions),
                ))
                seqs.append(TokenSequence(utt_id=utt_id, tokens=tokens))
    return utts, seqs
