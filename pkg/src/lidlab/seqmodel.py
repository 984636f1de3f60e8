"""From-scratch transformer sequence classifier over discrete token streams.

Architecture: token embedding (learned, or a frozen codebook centroid table)
+ sinusoidal positions, a linear bridge from the embedding width to the
attention width, pre-norm self-attention/FFN blocks, masked mean pooling,
optional concatenation of a frozen acoustic utterance vector, and a softmax
classification layer.

Everything is plain numpy with hand-written backward passes so that gradients
can be audited against finite differences (see training.grad_check) and
training stays bit-reproducible.

A model with n_layers == 0 degenerates to a bag-of-tokens classifier: no
positional encoding, and pooling is computed from token counts in vocabulary
order, which makes its scores exactly invariant to any permutation of the
input sequence.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import PAD_TOKEN, UNK_TOKEN, TokenSequence
from .errors import FormatError, ValidationError
from .fusion import PredictionRecord
from .quantizer import Codebook

MODEL_MAGIC = b"LIDMDL1\x00"
LN_EPS = 1e-5


@dataclass(frozen=True)
class ClassifierConfig:
    vocab_size: int
    embed_dim: int
    model_dim: int
    n_layers: int
    n_heads: int
    ffn_dim: int
    max_seq_len: int
    n_labels: int
    acoustic_dim: int = 0
    embedding_mode: str = "learned"      # or "frozen_centroids"
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"               # float64 for gradient auditing

    def __post_init__(self):
        if self.n_layers > 0 and self.model_dim % self.n_heads != 0:
            raise ValidationError("model_dim must be divisible by n_heads")
        if self.max_seq_len < 1:
            raise ValidationError("max_seq_len must be >= 1")
        if self.n_labels < 2:
            raise ValidationError("need at least 2 labels")
        if self.embedding_mode not in ("learned", "frozen_centroids"):
            raise ValidationError(f"unknown embedding_mode {self.embedding_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")
        if self.acoustic_dim < 0 or self.vocab_size < 1:
            raise ValidationError("bad dimensions")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def param_shapes(cfg: ClassifierConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes serialization and reduction
    order everywhere."""
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (cfg.vocab_size, cfg.embed_dim),
        "w_in": (cfg.embed_dim, cfg.model_dim),
        "b_in": (cfg.model_dim,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (cfg.model_dim,)
        shapes[p + "ln1.b"] = (cfg.model_dim,)
        for w in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{w}"] = (cfg.model_dim, cfg.model_dim)
            shapes[p + f"attn.b{w}"] = (cfg.model_dim,)
        shapes[p + "ln2.g"] = (cfg.model_dim,)
        shapes[p + "ln2.b"] = (cfg.model_dim,)
        shapes[p + "ffn.w1"] = (cfg.model_dim, cfg.ffn_dim)
        shapes[p + "ffn.b1"] = (cfg.ffn_dim,)
        shapes[p + "ffn.w2"] = (cfg.ffn_dim, cfg.model_dim)
        shapes[p + "ffn.b2"] = (cfg.model_dim,)
    shapes["ln_f.g"] = (cfg.model_dim,)
    shapes["ln_f.b"] = (cfg.model_dim,)
    shapes["cls.w"] = (cfg.model_dim + cfg.acoustic_dim, cfg.n_labels)
    shapes["cls.b"] = (cfg.n_labels,)
    return shapes


class SequenceClassifier:
    """Parameter container plus vocabulary and label list."""

    def __init__(self, config: ClassifierConfig, params: dict[str, np.ndarray],
                 vocab: list[str], labels: list[str]):
        if len(vocab) != config.vocab_size:
            raise ValidationError(
                f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        if len(labels) != config.n_labels:
            raise ValidationError(
                f"{len(labels)} labels, config says {config.n_labels}")
        for name, shape in param_shapes(config).items():
            if name not in params:
                raise ValidationError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ValidationError(
                    f"parameter {name}: shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name])):
                raise ValidationError(f"parameter {name}: non-finite values")
        self.config = config
        self.params = params
        self.vocab = list(vocab)
        self.labels = list(labels)
        self._tok2id = {t: i for i, t in enumerate(self.vocab)}
        self._unk_id = self._tok2id.get(UNK_TOKEN)
        self._pad_id = self._tok2id.get(PAD_TOKEN, 0)
        self._pe = None

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: ClassifierConfig, vocab: list[str], labels: list[str],
              codebook: Codebook | None = None) -> "SequenceClassifier":
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        params: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(config).items():
            if name == "embed":
                if config.embedding_mode == "frozen_centroids":
                    if codebook is None:
                        raise ValidationError("frozen_centroids mode needs a codebook")
                    if (codebook.k, codebook.dim) != shape:
                        raise ValidationError(
                            f"codebook is {codebook.k}x{codebook.dim}, "
                            f"config expects {shape[0]}x{shape[1]}")
                    params[name] = codebook.centroids.astype(dt)
                else:
                    params[name] = (rng.standard_normal(shape) * 0.02).astype(dt)
            elif len(shape) == 1:
                # layer-norm gains start at 1, every bias at 0
                fill = 1.0 if name.endswith(".g") else 0.0
                params[name] = np.full(shape, fill, dtype=dt)
            else:
                scale = 1.0 / np.sqrt(shape[0])
                params[name] = (rng.standard_normal(shape) * scale).astype(dt)
        return cls(config, params, vocab, labels)

    # -- bookkeeping --------------------------------------------------------

    def trainable_names(self) -> list[str]:
        names = list(param_shapes(self.config))
        if self.config.embedding_mode == "frozen_centroids":
            names.remove("embed")
        return names

    def num_params(self) -> int:
        """Trainable parameter count (a frozen centroid table is excluded)."""
        return int(sum(self.params[n].size for n in self.trainable_names()))

    # -- encoding -----------------------------------------------------------

    def encode(self, tokens: tuple[str, ...]) -> np.ndarray:
        """Token strings -> ids, truncated to max_seq_len; OOV maps to <unk>."""
        toks = tokens[: self.config.max_seq_len]
        ids = np.empty(len(toks), dtype=np.int64)
        for i, t in enumerate(toks):
            j = self._tok2id.get(t)
            if j is None:
                if self._unk_id is None:
                    raise ValidationError(f"token {t!r} not in vocabulary (no {UNK_TOKEN})")
                j = self._unk_id
            ids[i] = j
        return ids

    def positional_encoding(self, length: int) -> np.ndarray:
        if self._pe is None:
            d = self.config.embed_dim
            pos = np.arange(self.config.max_seq_len, dtype=np.float64)[:, None]
            i = np.arange(0, d, 2, dtype=np.float64)[None, :]
            angle = pos / np.power(10000.0, i / d)
            pe = np.zeros((self.config.max_seq_len, d), dtype=np.float64)
            pe[:, 0::2] = np.sin(angle)
            pe[:, 1::2] = np.cos(angle)[:, : d // 2]
            self._pe = pe.astype(self.config.np_dtype)
        return self._pe[:length]


# ---------------------------------------------------------------------------
# Numerics

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * invstd
    return g * xhat + b, (xhat, invstd, g)


def _layernorm_bwd(dy, cache):
    xhat, invstd, g = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = invstd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate <= 0.0:
        return None
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / dtype(1.0 - rate)


def forward_batch(model: SequenceClassifier, ids: np.ndarray, mask: np.ndarray,
                  acoustic: np.ndarray | None = None,
                  dropout_rng: np.random.Generator | None = None):
    """Batched forward pass.

    ids: (B, L) int token ids (pad positions arbitrary), mask: (B, L) bool with
    True at real positions, acoustic: (B, A) or None. Returns (probs, cache).
    """
    cfg = model.config
    p = model.params
    dt = cfg.np_dtype
    if (acoustic is not None) != (cfg.acoustic_dim > 0):
        raise ValidationError("acoustic vector presence must match acoustic_dim")
    if acoustic is not None and acoustic.shape[1] != cfg.acoustic_dim:
        raise ValidationError(
            f"acoustic dim {acoustic.shape[1]} != config {cfg.acoustic_dim}")
    if not mask.any(axis=1).all():
        raise ValidationError("a sequence in the batch is empty")
    counts = mask.sum(axis=1).astype(dt)

    cache: dict = {"ids": ids, "mask": mask, "counts": counts, "acoustic": acoustic}

    if cfg.n_layers == 0:
        # order-invariant path: pool token counts in vocabulary order
        b = ids.shape[0]
        counts_v = np.zeros((b, cfg.vocab_size), dtype=dt)
        flat = np.where(mask, ids, -1)
        for row in range(b):
            vals, cnts = np.unique(flat[row][flat[row] >= 0], return_counts=True)
            counts_v[row, vals] = cnts.astype(dt)
        bag = (counts_v @ p["embed"]) / counts[:, None]
        x = bag @ p["w_in"] + p["b_in"]
        h, ln_f_cache = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
        cache.update(bag_counts=counts_v, bag=bag, ln_f=ln_f_cache)
        pooled = h
    else:
        emb = p["embed"][ids] * mask[:, :, None].astype(dt)
        pe = model.positional_encoding(ids.shape[1])
        x0 = emb + pe[None, :, :]
        x = x0 @ p["w_in"] + p["b_in"]
        cache.update(x0=x0)
        neg = dt(-1e9)
        attn_bias = np.where(mask, dt(0.0), neg)[:, None, None, :]
        layer_caches = []
        dh = cfg.model_dim // cfg.n_heads
        scale = dt(1.0 / np.sqrt(dh))
        for i in range(cfg.n_layers):
            pref = f"layers.{i}."
            lc: dict = {"x_in": x}
            h1, lc["ln1"] = _layernorm(x, p[pref + "ln1.g"], p[pref + "ln1.b"])
            lc["h1"] = h1
            q = _split_heads(h1 @ p[pref + "attn.wq"] + p[pref + "attn.bq"], cfg.n_heads)
            k = _split_heads(h1 @ p[pref + "attn.wk"] + p[pref + "attn.bk"], cfg.n_heads)
            v = _split_heads(h1 @ p[pref + "attn.wv"] + p[pref + "attn.bv"], cfg.n_heads)
            scores = (q * scale) @ k.transpose(0, 1, 3, 2) + attn_bias
            probs = _softmax(scores)
            ctx = _merge_heads(probs @ v)
            attn_out = ctx @ p[pref + "attn.wo"] + p[pref + "attn.bo"]
            m_attn = _dropout_mask(dropout_rng, attn_out.shape, cfg.dropout, dt)
            if m_attn is not None:
                attn_out = attn_out * m_attn
            x_mid = x + attn_out
            h2, lc["ln2"] = _layernorm(x_mid, p[pref + "ln2.g"], p[pref + "ln2.b"])
            f1 = h2 @ p[pref + "ffn.w1"] + p[pref + "ffn.b1"]
            r = np.maximum(f1, 0)
            f2 = r @ p[pref + "ffn.w2"] + p[pref + "ffn.b2"]
            m_ffn = _dropout_mask(dropout_rng, f2.shape, cfg.dropout, dt)
            if m_ffn is not None:
                f2 = f2 * m_ffn
            lc.update(q=q, k=k, v=v, probs=probs, ctx=ctx, x_mid=x_mid,
                      h2=h2, f1=f1, r=r, m_attn=m_attn, m_ffn=m_ffn)
            x = x_mid + f2
            layer_caches.append(lc)
        hN, ln_f_cache = _layernorm(x, p["ln_f.g"], p["ln_f.b"])
        cache.update(layers=layer_caches, ln_f=ln_f_cache, hN=hN, scale=scale)
        pooled = (hN * mask[:, :, None].astype(dt)).sum(axis=1) / counts[:, None]

    z = pooled if acoustic is None else np.concatenate([pooled, acoustic.astype(dt)], axis=1)
    logits = z @ p["cls.w"] + p["cls.b"]
    probs_out = _softmax(logits.astype(np.float64)).astype(dt)
    cache.update(z=z, probs=probs_out)
    return probs_out, cache


def backward_batch(model: SequenceClassifier, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable parameter, given the
    gradient at the pre-softmax logits."""
    cfg = model.config
    p = model.params
    dt = cfg.np_dtype
    dlogits = dlogits.astype(dt)
    grads: dict[str, np.ndarray] = {}
    z = cache["z"]
    grads["cls.w"] = z.T @ dlogits
    grads["cls.b"] = dlogits.sum(axis=0)
    dz = dlogits @ p["cls.w"].T
    dpooled = dz[:, : cfg.model_dim]
    mask = cache["mask"]
    counts = cache["counts"]

    if cfg.n_layers == 0:
        dh = dpooled
        dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_bwd(dh, cache["ln_f"])
        bag = cache["bag"]
        grads["w_in"] = bag.T @ dx
        grads["b_in"] = dx.sum(axis=0)
        dbag = dx @ p["w_in"].T
        dbag = dbag / counts[:, None]
        grads["embed"] = cache["bag_counts"].T @ dbag
    else:
        dhN = (dpooled[:, None, :] / counts[:, None, None]) * mask[:, :, None].astype(dt)
        dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_bwd(dhN, cache["ln_f"])
        scale = cache["scale"]
        for i in reversed(range(cfg.n_layers)):
            pref = f"layers.{i}."
            lc = cache["layers"][i]
            b, l, d = dx.shape
            # FFN block: x = x_mid + f2
            df2 = dx
            if lc["m_ffn"] is not None:
                df2 = df2 * lc["m_ffn"]
            r2 = lc["r"].reshape(b * l, cfg.ffn_dim)
            df2_2 = df2.reshape(b * l, d)
            grads[pref + "ffn.w2"] = r2.T @ df2_2
            grads[pref + "ffn.b2"] = df2_2.sum(axis=0)
            dr = df2 @ p[pref + "ffn.w2"].T
            df1 = dr * (lc["f1"] > 0)
            h2_2 = lc["h2"].reshape(b * l, d)
            df1_2 = df1.reshape(b * l, cfg.ffn_dim)
            grads[pref + "ffn.w1"] = h2_2.T @ df1_2
            grads[pref + "ffn.b1"] = df1_2.sum(axis=0)
            dh2 = df1 @ p[pref + "ffn.w1"].T
            dln2, grads[pref + "ln2.g"], grads[pref + "ln2.b"] = _layernorm_bwd(dh2, lc["ln2"])
            dx_mid = dx + dln2
            # attention block: x_mid = x_in + attn_out
            dattn = dx_mid
            if lc["m_attn"] is not None:
                dattn = dattn * lc["m_attn"]
            ctx2 = lc["ctx"].reshape(b * l, d)
            dattn2 = dattn.reshape(b * l, d)
            grads[pref + "attn.wo"] = ctx2.T @ dattn2
            grads[pref + "attn.bo"] = dattn2.sum(axis=0)
            dctx = _split_heads(dattn @ p[pref + "attn.wo"].T, cfg.n_heads)
            probs = lc["probs"]
            dprobs = dctx @ lc["v"].transpose(0, 1, 3, 2)
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dq = (dscores @ lc["k"]) * scale
            dk = dscores.transpose(0, 1, 3, 2) @ (lc["q"] * scale)
            dq_m = _merge_heads(dq).reshape(b * l, d)
            dk_m = _merge_heads(dk).reshape(b * l, d)
            dv_m = _merge_heads(dv).reshape(b * l, d)
            h1_2 = lc["h1"].reshape(b * l, d)
            grads[pref + "attn.wq"] = h1_2.T @ dq_m
            grads[pref + "attn.bq"] = dq_m.sum(axis=0)
            grads[pref + "attn.wk"] = h1_2.T @ dk_m
            grads[pref + "attn.bk"] = dk_m.sum(axis=0)
            grads[pref + "attn.wv"] = h1_2.T @ dv_m
            grads[pref + "attn.bv"] = dv_m.sum(axis=0)
            dh1 = (
                dq_m.reshape(b, l, d) @ p[pref + "attn.wq"].T
                + dk_m.reshape(b, l, d) @ p[pref + "attn.wk"].T
                + dv_m.reshape(b, l, d) @ p[pref + "attn.wv"].T
            )
            dln1, grads[pref + "ln1.g"], grads[pref + "ln1.b"] = _layernorm_bwd(dh1, lc["ln1"])
            dx = dx_mid + dln1
        b, l, d = dx.shape
        x0_2 = cache["x0"].reshape(b * l, cfg.embed_dim)
        dx_2 = dx.reshape(b * l, d)
        grads["w_in"] = x0_2.T @ dx_2
        grads["b_in"] = dx_2.sum(axis=0)
        dx0 = dx @ p["w_in"].T
        demb = dx0 * mask[:, :, None].astype(dt)
        if cfg.embedding_mode != "frozen_centroids":
            dE = np.zeros_like(p["embed"])
            np.add.at(dE, cache["ids"][mask], demb[mask])
            grads["embed"] = dE
    if cfg.embedding_mode == "frozen_centroids":
        grads.pop("embed", None)
    return grads


def cross_entropy(probs: np.ndarray, label_idx: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the gradient at the logits."""
    b = probs.shape[0]
    eps = np.finfo(np.float64).tiny
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(b), label_idx], eps))))
    dlogits = probs.astype(np.float64).copy()
    dlogits[np.arange(b), label_idx] -= 1.0
    dlogits /= b
    return loss, dlogits


def forward(model: SequenceClassifier, tokens: TokenSequence,
            acoustic: np.ndarray | None = None) -> PredictionRecord:
    """Score a single utterance; returns a normalized PredictionRecord.

    Trailing pad tokens are trimmed before encoding, so appending padding
    can never change the scores.
    """
    toks = tokens.tokens
    while toks and toks[-1] == PAD_TOKEN:
        toks = toks[:-1]
    if not toks:
        raise ValidationError(f"{tokens.utt_id}: empty token sequence")
    ids = model.encode(toks)
    mask = np.ones((1, len(ids)), dtype=bool)
    ac = None if acoustic is None else np.asarray(acoustic, dtype=np.float64)[None, :]
    probs, _ = forward_batch(model, ids[None, :], mask, ac)
    return PredictionRecord.from_scores(
        tokens.utt_id, probs[0].astype(np.float64), model.labels, source="seqmodel")


# ---------------------------------------------------------------------------
# Serialization

def save_model(model: SequenceClassifier, path: str | Path) -> None:
    names = list(param_shapes(model.config))
    manifest = []
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    header = json.dumps({
        "config": asdict(model.config),
        "vocab": model.vocab,
        "labels": model.labels,
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in payloads:
            fh.write(b)


def load_model(path: str | Path) -> SequenceClassifier:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: bad header: {e}") from None
    cfg = ClassifierConfig(**header["config"])
    expected = param_shapes(cfg)
    payload = data[12 + hlen:]
    params = {}
    total = 0
    for t in header["tensors"]:
        name, shape, off = t["name"], tuple(t["shape"]), t["offset"]
        if name not in expected:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(payload):
            raise FormatError(f"{path}: tensor {name!r} payload truncated")
        params[name] = (
            np.frombuffer(payload[off:off + nbytes], dtype="<f4")
            .reshape(shape).astype(cfg.np_dtype)
        )
        total += nbytes
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise FormatError(f"{path}: missing tensors {missing}")
    if total != len(payload):
        raise FormatError(f"{path}: {len(payload) - total} trailing bytes")
    return SequenceClassifier(cfg, params, header["vocab"], header["labels"])
