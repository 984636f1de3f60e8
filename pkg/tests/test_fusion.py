"""Tests for prediction records, probability fusion, run alignment, and the
prediction/embedding matrix format."""

import numpy as np
import pytest

from helpers import make_record
from lidlab.errors import FormatError, ValidationError
from lidlab.fusion import (
    PredictionRecord,
    align_predictions,
    fuse_average,
    load_embeddings,
    load_predictions,
    save_embeddings,
    save_predictions,
)


class TestPredictionRecord:
    def test_argmax_and_tie_to_lowest_index(self):
        assert make_record("u", [0.2, 0.8]).predicted == "lang_b"
        assert make_record("u", [0.5, 0.5]).predicted == "lang_a"

    def test_rejects_non_probability(self):
        with pytest.raises(ValidationError, match="probability"):
            make_record("u", [0.5, 0.6])
        with pytest.raises(ValidationError, match="probability"):
            make_record("u", [1.2, -0.2])

    def test_scores_length_must_match_labels(self):
        with pytest.raises(ValidationError, match="length"):
            PredictionRecord("u", np.array([1.0]), ("a", "b"), "a")


class TestFuseAverage:
    def test_hand_example(self):
        a = make_record("u", [0.8, 0.2])
        b = make_record("u", [0.4, 0.6])
        fused = fuse_average(a, b)
        # exact up to one ulp of double rounding: 0.5*0.8 + 0.5*0.4 lands on
        # the representable neighbor of 0.6
        np.testing.assert_allclose(fused.scores, [0.6, 0.4], atol=1e-12, rtol=0)
        assert fused.predicted == "lang_a"

    def test_weight_endpoints(self):
        a = make_record("u", [0.8, 0.2])
        b = make_record("u", [0.4, 0.6])
        assert fuse_average(a, b, 1.0).scores.tolist() == a.scores.tolist()
        assert fuse_average(a, b, 0.0).scores.tolist() == b.scores.tolist()

    def test_invariants_on_random_pairs(self, rng):
        # convexity: fused scores lie between the inputs coordinate-wise;
        # agreement: identical argmax in both inputs survives fusion
        n_labels = 4
        labels = tuple(f"l{i}" for i in range(n_labels))
        for _ in range(2000):
            pa = rng.dirichlet(np.ones(n_labels))
            pb = rng.dirichlet(np.ones(n_labels))
            w = float(rng.random())
            a = make_record("u", pa, labels)
            b = make_record("u", pb, labels)
            fused = fuse_average(a, b, w)
            lo = np.minimum(pa, pb) - 1e-12
            hi = np.maximum(pa, pb) + 1e-12
            assert np.all(fused.scores >= lo) and np.all(fused.scores <= hi)
            assert fused.scores.sum() == pytest.approx(1.0)
            if a.predicted == b.predicted:
                assert fused.predicted == a.predicted

    def test_validation(self):
        a = make_record("u", [0.5, 0.5])
        with pytest.raises(ValidationError, match="utt_id"):
            fuse_average(a, make_record("v", [0.5, 0.5]))
        with pytest.raises(ValidationError, match="label space"):
            fuse_average(a, make_record("u", [0.5, 0.5], labels=("x", "y")))
        with pytest.raises(ValidationError, match="weight"):
            fuse_average(a, make_record("u", [0.5, 0.5]), weight=1.5)


class TestAlign:
    def test_strict_requires_identical_ids(self):
        run_a = [make_record("u0", [1.0, 0.0]), make_record("u1", [0.0, 1.0])]
        run_b = [make_record("u0", [0.5, 0.5])]
        with pytest.raises(ValidationError, match="missing"):
            align_predictions([run_a, run_b], strict=True)

    def test_lenient_reports_unmatched(self):
        run_a = [make_record("u0", [1.0, 0.0]), make_record("u1", [0.0, 1.0])]
        run_b = [make_record("u1", [0.5, 0.5]), make_record("u2", [0.5, 0.5])]
        table, report = align_predictions([run_a, run_b], strict=False)
        assert list(table) == ["u1"]
        assert report["n_joined"] == 1
        assert report["n_unmatched"] == 2
        assert report["unmatched_per_run"] == [["u0"], ["u2"]]

    def test_sorted_join(self):
        run = [make_record(u, [0.5, 0.5]) for u in ("b", "a", "c")]
        table, _ = align_predictions([run, run])
        assert list(table) == ["a", "b", "c"]


class TestPredictionFormat:
    def records(self):
        return [make_record("u0", [0.25, 0.75], source="m1"),
                make_record("u1", [0.5, 0.5], source="m1")]

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "pred.bin"
        save_predictions(self.records(), path)
        back = load_predictions(path)
        for orig, rec in zip(self.records(), back):
            assert rec.utt_id == orig.utt_id
            assert rec.labels == orig.labels
            assert rec.scores.astype("<f4").tobytes() == orig.scores.astype("<f4").tobytes()
            assert rec.source == "m1"   # restored from the .meta.json sidecar

    def test_softmax_normalization(self, tmp_path):
        # logit rows become probabilities at load
        path = tmp_path / "logits.bin"
        recs = [PredictionRecord("u0", np.array([2.0, 0.0]), ("a", "b"), "a")]
        save_predictions(recs, path)
        back = load_predictions(path, normalize="softmax")[0]
        expected = np.exp([0.0, -2.0]) / np.exp([0.0, -2.0]).sum()
        np.testing.assert_allclose(back.scores, expected, rtol=1e-6)
        with pytest.raises(ValidationError, match="normalization"):
            load_predictions(path, normalize="weird")

    def test_sidecar_mismatch(self, tmp_path):
        path = tmp_path / "pred.bin"
        save_predictions(self.records(), path)
        (tmp_path / "pred.bin.ids").write_text("only_one\n")
        with pytest.raises(FormatError, match="ids"):
            load_predictions(path)

    def test_label_count_mismatch(self, tmp_path):
        path = tmp_path / "pred.bin"
        save_predictions(self.records(), path)
        (tmp_path / "pred.bin.labels").write_text("a\nb\nc\n")
        with pytest.raises(FormatError, match="labels"):
            load_predictions(path)

    def test_mixed_label_spaces_rejected(self, tmp_path):
        recs = [make_record("u0", [0.5, 0.5]),
                make_record("u1", [0.5, 0.5], labels=("x", "y"))]
        with pytest.raises(ValidationError, match="label spaces"):
            save_predictions(recs, tmp_path / "pred.bin")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "pred.bin"
        path.write_bytes(b"WRONG!!!" + b"\x00" * 8)
        with pytest.raises(FormatError, match="magic"):
            load_predictions(path)


class TestEmbeddingFormat:
    def test_round_trip(self, tmp_path, rng):
        vecs = {f"u{i}": rng.normal(size=6).astype(np.float32).astype(np.float64)
                for i in range(5)}
        path = tmp_path / "emb.bin"
        save_embeddings(vecs, path)
        back = load_embeddings(path)
        assert set(back) == set(vecs)
        for u in vecs:
            assert back[u].astype("<f4").tobytes() == vecs[u].astype("<f4").tobytes()

    def test_duplicate_ids_rejected(self, tmp_path, rng):
        vecs = {"u0": rng.normal(size=3)}
        path = tmp_path / "emb.bin"
        save_embeddings(vecs, path)
        (tmp_path / "emb.bin.ids").write_text("u0\nu0\n")
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            save_embeddings({}, tmp_path / "emb.bin")
