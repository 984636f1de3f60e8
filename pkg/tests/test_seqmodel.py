"""Tests for the transformer classifier: configuration, encoding, the
order-invariant bag path, padding invariance, and model serialization."""

import numpy as np
import pytest

from lidlab.corpus import PAD_TOKEN, TokenSequence
from lidlab.errors import FormatError, ValidationError
from lidlab.quantizer import Codebook
from lidlab.seqmodel import (
    ClassifierConfig,
    SequenceClassifier,
    forward,
    forward_batch,
    load_model,
    param_shapes,
    save_model,
)

LABELS = ["lang_a", "lang_b"]


def tiny_config(**kw):
    base = dict(vocab_size=8, embed_dim=8, model_dim=8, n_layers=1, n_heads=2,
                ffn_dim=16, max_seq_len=32, n_labels=2, seed=5)
    base.update(kw)
    return ClassifierConfig(**base)


def tiny_vocab(cfg):
    return [PAD_TOKEN, "<unk>"] + [f"t{i}" for i in range(cfg.vocab_size - 2)]


def build(**kw):
    cfg = tiny_config(**kw)
    return SequenceClassifier.build(cfg, tiny_vocab(cfg), LABELS)


class TestConfig:
    @pytest.mark.parametrize("kw,msg", [
        (dict(model_dim=10, n_heads=4), "divisible"),
        (dict(max_seq_len=0), "max_seq_len"),
        (dict(n_labels=1), "labels"),
        (dict(embedding_mode="weird"), "embedding_mode"),
        (dict(dropout=1.0), "dropout"),
        (dict(dtype="float16"), "dtype"),
        (dict(acoustic_dim=-1), "dimensions"),
    ])
    def test_validation(self, kw, msg):
        with pytest.raises(ValidationError, match=msg):
            tiny_config(**kw)

    def test_param_shapes_order_is_stable(self):
        cfg = tiny_config(n_layers=2)
        names = list(param_shapes(cfg))
        assert names[0] == "embed"
        assert names[-2:] == ["cls.w", "cls.b"]
        assert "layers.0.attn.wq" in names and "layers.1.ffn.w2" in names

    def test_acoustic_dim_widens_classifier(self):
        cfg = tiny_config(acoustic_dim=4)
        assert param_shapes(cfg)["cls.w"] == (cfg.model_dim + 4, 2)


class TestEncoding:
    def test_oov_maps_to_unk(self):
        model = build()
        ids = model.encode(("t0", "nope", "t1"))
        assert ids[1] == model.vocab.index("<unk>")

    def test_truncation(self):
        model = build(max_seq_len=4)
        assert len(model.encode(("t0",) * 10)) == 4

    def test_oov_without_unk_fails(self):
        cfg = tiny_config(vocab_size=2)
        model = SequenceClassifier.build(cfg, ["a", "b"], LABELS)
        with pytest.raises(ValidationError, match="not in vocabulary"):
            model.encode(("zzz",))


class TestForward:
    def test_probabilities(self):
        model = build()
        rec = forward(model, TokenSequence("u", ("t0", "t1", "t2")))
        assert rec.scores.shape == (2,)
        assert rec.scores.sum() == pytest.approx(1.0)
        assert rec.predicted in LABELS

    def test_trailing_padding_is_invisible(self):
        model = build()
        base = forward(model, TokenSequence("u", ("t0", "t1", "t2")))
        padded = forward(model, TokenSequence("u", ("t0", "t1", "t2") + (PAD_TOKEN,) * 5))
        assert base.scores.tobytes() == padded.scores.tobytes()

    def test_batch_padding_matches_single(self):
        # masked positions must not leak into the pooled representation
        model = build()
        a, b = ("t0", "t1", "t2", "t3"), ("t4",)
        single = [forward_batch(model, model.encode(t)[None, :],
                                np.ones((1, len(t)), dtype=bool))[0]
                  for t in (a, b)]
        ids = np.zeros((2, 4), dtype=np.int64)
        mask = np.zeros((2, 4), dtype=bool)
        for i, t in enumerate((a, b)):
            enc = model.encode(t)
            ids[i, :len(enc)] = enc
            mask[i, :len(enc)] = True
        batched, _ = forward_batch(model, ids, mask)
        np.testing.assert_allclose(batched[0], single[0][0], rtol=1e-5)
        np.testing.assert_allclose(batched[1], single[1][0], rtol=1e-5)

    def test_empty_sequence_rejected(self):
        model = build()
        with pytest.raises(ValidationError, match="empty"):
            forward_batch(model, np.zeros((1, 3), dtype=np.int64),
                          np.zeros((1, 3), dtype=bool))
        with pytest.raises(ValidationError, match="empty"):
            forward(model, TokenSequence("u", (PAD_TOKEN,)))

    def test_acoustic_presence_must_match(self):
        model = build()
        ids = model.encode(("t0",))[None, :]
        mask = np.ones((1, 1), dtype=bool)
        with pytest.raises(ValidationError, match="acoustic"):
            forward_batch(model, ids, mask, acoustic=np.zeros((1, 4)))
        model_ac = build(acoustic_dim=4)
        with pytest.raises(ValidationError, match="acoustic"):
            forward_batch(model_ac, ids, mask)


class TestBagPath:
    def test_permutation_invariance_bitwise(self, rng):
        model = build(n_layers=0)
        toks = tuple(rng.choice([f"t{i}" for i in range(6)], size=30))
        base = forward(model, TokenSequence("u", toks))
        for _ in range(5):
            perm = tuple(rng.permutation(list(toks)))
            assert forward(model, TokenSequence("u", perm)).scores.tobytes() \
                == base.scores.tobytes()

    def test_counts_match_mean_of_embeddings(self):
        model = build(n_layers=0, dtype="float64")
        toks = ("t0", "t1", "t1", "t3")
        ids = model.encode(toks)[None, :]
        mask = np.ones((1, len(toks)), dtype=bool)
        _, cache = forward_batch(model, ids, mask)
        naive = model.params["embed"][ids[0]].mean(axis=0)
        np.testing.assert_allclose(cache["bag"][0], naive, rtol=1e-12)

    def test_sequence_model_is_order_sensitive(self):
        model = build(n_layers=2)
        a = forward(model, TokenSequence("u", ("t0", "t1", "t2", "t3")))
        b = forward(model, TokenSequence("u", ("t3", "t2", "t1", "t0")))
        assert a.scores.tobytes() != b.scores.tobytes()


class TestFrozenCentroids:
    def test_embed_table_is_the_codebook(self, rng):
        cfg = tiny_config(embedding_mode="frozen_centroids", vocab_size=6, embed_dim=4)
        cb = Codebook(centroids=rng.normal(size=(6, 4)))
        vocab = [f"{i}" for i in range(6)]
        model = SequenceClassifier.build(cfg, vocab, LABELS, cb)
        assert np.array_equal(model.params["embed"],
                              cb.centroids.astype(np.float32))
        assert "embed" not in model.trainable_names()
        assert model.num_params() == sum(
            model.params[n].size for n in param_shapes(cfg) if n != "embed")

    def test_needs_codebook(self):
        cfg = tiny_config(embedding_mode="frozen_centroids")
        with pytest.raises(ValidationError, match="codebook"):
            SequenceClassifier.build(cfg, tiny_vocab(cfg), LABELS)

    def test_shape_mismatch(self, rng):
        cfg = tiny_config(embedding_mode="frozen_centroids", vocab_size=6, embed_dim=4)
        cb = Codebook(centroids=rng.normal(size=(5, 4)))
        with pytest.raises(ValidationError, match="codebook"):
            SequenceClassifier.build(cfg, [f"{i}" for i in range(6)], LABELS, cb)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build(n_layers=2)
        path = tmp_path / "m.bin"
        save_model(model, path)
        back = load_model(path)
        assert back.vocab == model.vocab
        assert back.labels == model.labels
        assert back.config == model.config
        for name in param_shapes(model.config):
            assert back.params[name].tobytes() == model.params[name].tobytes()
        ts = TokenSequence("u", ("t0", "t2", "t1"))
        assert forward(back, ts).scores.tobytes() == forward(model, ts).scores.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        model = build()
        save_model(model, tmp_path / "a.bin")
        save_model(model, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"BADMAGIC" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = build()
        path = tmp_path / "m.bin"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_model(path)

    def test_truncated_tensor_rejected(self, tmp_path):
        model = build()
        path = tmp_path / "m.bin"
        save_model(model, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated|trailing"):
            load_model(path)
