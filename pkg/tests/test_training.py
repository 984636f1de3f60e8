"""Tests for the trainer: gradient audit, Adam, reproducibility, checkpoint
selection, and the published model configurations."""

import json

import numpy as np
import pytest

from lidlab.corpus import LabelSpace, TokenSequence
from lidlab.errors import ValidationError
from lidlab.quantizer import Codebook
from lidlab.seqmodel import ClassifierConfig, SequenceClassifier, param_shapes
from lidlab.training import (
    Adam,
    Example,
    TrainConfig,
    duseqs_config,
    duseqsembed_config,
    grad_check,
    phoneseqs_config,
    save_trace,
    train,
)

LABELS = LabelSpace(["lang_a", "lang_b"])


def audit_config(**kw):
    base = dict(vocab_size=6, embed_dim=6, model_dim=8, n_layers=1, n_heads=2,
                ffn_dim=8, max_seq_len=16, n_labels=2, seed=3, dtype="float64")
    base.update(kw)
    return ClassifierConfig(**base)


def toy_dataset(n=24, seed=0):
    """Two classes separated by which token dominates the sequence."""
    rng = np.random.default_rng(seed)
    vocab = ["<pad>", "<unk>", "a", "b"]
    examples = []
    for i in range(n):
        lang = LABELS.languages[i % 2]
        major = "a" if lang == "lang_a" else "b"
        toks = tuple(rng.choice([major, "a", "b"], size=8, p=[0.7, 0.15, 0.15]))
        examples.append(Example(TokenSequence(f"u{i:03d}", toks), lang))
    return vocab, examples


class TestGradCheck:
    def test_transformer_path(self):
        err = grad_check(audit_config(),
                         TokenSequence("g", ("t1", "t2", "t0", "t3")), 1)
        assert err < 1e-4

    def test_with_acoustic_concat(self):
        err = grad_check(audit_config(acoustic_dim=3),
                         TokenSequence("g", ("t1", "t2", "t0")), 0,
                         acoustic=np.array([0.3, -0.2, 0.9]))
        assert err < 1e-4

    def test_bag_path(self):
        err = grad_check(audit_config(n_layers=0),
                         TokenSequence("g", ("t1", "t2", "t1")), 1)
        assert err < 1e-4

    def test_requires_float64_and_tiny_config(self):
        with pytest.raises(ValidationError, match="float64"):
            grad_check(audit_config(dtype="float32"), TokenSequence("g", ("t0",)), 0)
        with pytest.raises(ValidationError, match="tiny"):
            grad_check(audit_config(model_dim=64, n_heads=2),
                       TokenSequence("g", ("t0",)), 0)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValidationError):
            TrainConfig(epochs=0)
        with pytest.raises(ValidationError):
            TrainConfig(lr_schedule="linear")

    def test_cosine_schedule(self):
        tc = TrainConfig(learning_rate=1e-3, epochs=10, lr_schedule="cosine")
        assert tc.lr_at(1) == pytest.approx(1e-3)
        assert tc.lr_at(6) == pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 0.5)))
        assert tc.lr_at(10) < tc.lr_at(2) < tc.lr_at(1)

    def test_constant_schedule(self):
        tc = TrainConfig(learning_rate=1e-3, epochs=10)
        assert tc.lr_at(1) == tc.lr_at(10) == 1e-3


class TestAdam:
    def test_single_step_matches_reference(self):
        # one Adam step on a 2-vector, checked against the textbook update
        tc = TrainConfig(learning_rate=0.1, clip_norm=0.0)
        params = {"w": np.array([1.0, -2.0])}
        g = np.array([0.5, -0.25])
        opt = Adam(["w"], params, tc)
        opt.step(params, {"w": g.copy()})
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = np.array([1.0, -2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(params["w"], expected, rtol=1e-12)

    def test_global_norm_clip(self):
        tc = TrainConfig(learning_rate=0.1, clip_norm=1.0)
        params = {"w": np.zeros(2), "v": np.zeros(2)}
        grads = {"w": np.array([3.0, 0.0]), "v": np.array([0.0, 4.0])}
        opt = Adam(["w", "v"], params, tc)
        opt.step(params, grads)
        total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)


class TestTrain:
    def test_learns_toy_task_and_traces(self):
        vocab, examples = toy_dataset(48)
        cfg = ClassifierConfig(vocab_size=len(vocab), embed_dim=8, model_dim=8,
                               n_layers=0, n_heads=1, ffn_dim=8, max_seq_len=16,
                               n_labels=2, seed=1)
        tc = TrainConfig(learning_rate=3e-2, epochs=30, batch_size=16, seed=4)
        model, trace = train(cfg, tc, examples, examples[:8], LABELS, vocab)
        assert trace[-1]["best_dev_acc"] == 1.0
        epochs = [t["epoch"] for t in trace[:-1]]
        assert epochs == list(range(1, 31))
        assert all({"train_loss", "train_acc", "dev_acc", "wall_s"} <= set(t)
                   for t in trace[:-1])

    def test_bit_reproducible(self):
        vocab, examples = toy_dataset(24)
        cfg = ClassifierConfig(vocab_size=len(vocab), embed_dim=8, model_dim=8,
                               n_layers=1, n_heads=2, ffn_dim=8, max_seq_len=16,
                               n_labels=2, seed=1)
        tc = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=4)
        runs = [train(cfg, tc, examples, examples[:4], LABELS, vocab) for _ in range(2)]
        for name in param_shapes(cfg):
            assert runs[0][0].params[name].tobytes() == runs[1][0].params[name].tobytes()
        assert runs[0][1] != []
        tc2 = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=5)
        perturbed, _ = train(cfg, tc2, examples, examples[:4], LABELS, vocab)
        assert any(perturbed.params[n].tobytes() != runs[0][0].params[n].tobytes()
                   for n in param_shapes(cfg))

    def test_best_dev_checkpoint_returned(self):
        vocab, examples = toy_dataset(24)
        cfg = ClassifierConfig(vocab_size=len(vocab), embed_dim=8, model_dim=8,
                               n_layers=0, n_heads=1, ffn_dim=8, max_seq_len=16,
                               n_labels=2, seed=1)
        tc = TrainConfig(learning_rate=3e-2, epochs=20, batch_size=8, seed=4)
        model, trace = train(cfg, tc, examples, examples, LABELS, vocab)
        best = trace[-1]
        per_epoch = {t["epoch"]: t["dev_acc"] for t in trace[:-1]}
        assert best["best_dev_acc"] == max(per_epoch.values())
        # ties keep the later epoch
        top = best["best_dev_acc"]
        assert best["best_epoch"] == max(e for e, a in per_epoch.items() if a == top)

    def test_frozen_embeddings_stay_frozen(self, rng):
        cb = Codebook(centroids=rng.normal(size=(4, 6)))
        vocab = ["0", "1", "2", "3"]
        examples = [Example(TokenSequence(f"u{i}", (str(i % 4), str((i + 1) % 4))),
                            LABELS.languages[i % 2]) for i in range(8)]
        cfg = ClassifierConfig(vocab_size=4, embed_dim=6, model_dim=8, n_layers=1,
                               n_heads=2, ffn_dim=8, max_seq_len=8, n_labels=2,
                               embedding_mode="frozen_centroids", seed=1)
        tc = TrainConfig(learning_rate=1e-2, epochs=3, batch_size=4, seed=0)
        model, _ = train(cfg, tc, examples, examples, LABELS, vocab, codebook=cb)
        assert np.array_equal(model.params["embed"], cb.centroids.astype(np.float32))

    def test_validation(self):
        vocab, examples = toy_dataset(8)
        cfg = ClassifierConfig(vocab_size=len(vocab), embed_dim=8, model_dim=8,
                               n_layers=0, n_heads=1, ffn_dim=8, max_seq_len=16,
                               n_labels=2, seed=1)
        tc = TrainConfig()
        with pytest.raises(ValidationError, match="empty training set"):
            train(cfg, tc, [], examples, LABELS, vocab)
        bad = [Example(TokenSequence("u", ("a",)), "martian")]
        with pytest.raises(ValidationError, match="label"):
            train(cfg, tc, bad, [], LABELS, vocab)
        three = LabelSpace(["x", "y", "z"])
        in_space = [Example(TokenSequence("u", ("a",)), "x")]
        with pytest.raises(ValidationError, match="n_labels"):
            train(cfg, tc, in_space, [], three, vocab)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        vocab, examples = toy_dataset(16)
        cfg = ClassifierConfig(vocab_size=len(vocab), embed_dim=8, model_dim=8,
                               n_layers=1, n_heads=2, ffn_dim=8, max_seq_len=16,
                               n_labels=2, seed=1)
        tc = TrainConfig(learning_rate=1e18, epochs=5, batch_size=8,
                         clip_norm=0.0, seed=0)
        with pytest.raises(RuntimeError, match="loss"):
            train(cfg, tc, examples, examples, LABELS, vocab)

    def test_save_trace_jsonl(self, tmp_path):
        trace = [{"epoch": 1, "dev_acc": 0.5}, {"best_epoch": 1, "best_dev_acc": 0.5}]
        path = tmp_path / "trace.jsonl"
        save_trace(trace, path)
        lines = [json.loads(ln) for ln in path.read_text().splitlines()]
        assert lines == trace


class TestPublishedConfigs:
    def test_phoneseqs_parameter_count(self):
        cfg = phoneseqs_config()
        model = SequenceClassifier.build(
            cfg, [f"t{i}" for i in range(cfg.vocab_size)],
            [f"l{i}" for i in range(cfg.n_labels)])
        assert 1_000_000 <= model.num_params() <= 1_400_000

    def test_duseqs_parameter_count_excludes_frozen_table(self, rng):
        cfg = duseqs_config()
        cb = Codebook(centroids=rng.normal(size=(1000, 768)))
        model = SequenceClassifier.build(
            cfg, [f"{i}" for i in range(1000)],
            [f"l{i}" for i in range(cfg.n_labels)], cb)
        assert 450_000 <= model.num_params() <= 750_000

    def test_duseqsembed_learns_its_table(self):
        cfg = duseqsembed_config()
        assert cfg.embedding_mode == "learned"
        assert cfg.vocab_size == 1002   # 1000 units plus <pad>/<unk>
