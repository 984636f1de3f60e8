"""CLI and job-level behavior: exit codes, failure isolation, determinism,
and degenerate inputs."""

import json

import numpy as np
import pytest

from extract_helpers import write_wav

from lidextract.cli import main
from lidextract.errors import ExtractError
from lidextract.job import ExtractionJob, run_job


def run_cli(*argv):
    return main(list(argv))


class TestExitCodes:
    def test_happy_path(self, smoke_corpus, tmp_path, capsys):
        root, _ = smoke_corpus
        code = run_cli("--manifest", str(root / "manifest.jsonl"),
                       "--kind", "embedding", "--model", "mock:cli",
                       "--out", str(tmp_path / "emb"))
        assert code == 0
        assert "10/10 utterances ok" in capsys.readouterr().out
        assert (tmp_path / "emb" / "summary.json").exists()

    def test_bad_model_scheme(self, smoke_corpus, tmp_path, capsys):
        root, _ = smoke_corpus
        code = run_cli("--manifest", str(root / "manifest.jsonl"),
                       "--kind", "frames", "--model", "nope:x",
                       "--out", str(tmp_path / "f"))
        assert code == 1
        assert "scheme" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        code = run_cli("--manifest", str(tmp_path / "none.jsonl"),
                       "--kind", "frames", "--model", "mock:x",
                       "--out", str(tmp_path / "f"))
        assert code == 1
        assert "manifest" in capsys.readouterr().err

    def test_unknown_kind_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            run_cli("--manifest", "m", "--kind", "spectrogram",
                    "--model", "mock:x", "--out", str(tmp_path))


class TestFailureIsolation:
    @pytest.fixture()
    def corpus_with_bad_clip(self, tmp_path):
        rng = np.random.default_rng(7)
        recs = []
        for i in range(3):
            utt = f"u{i}"
            if i != 1:   # u1's audio is missing on disk
                write_wav(tmp_path / f"{utt}.wav",
                          0.3 * rng.standard_normal(8000))
            recs.append({"utt_id": utt, "speaker_id": "s0", "language": "nl",
                         "accent": "native", "duration_s": 0.5,
                         "audio": f"{utt}.wav", "split": "test"})
        path = tmp_path / "manifest.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        return path

    def test_failures_logged_not_fatal(self, corpus_with_bad_clip, tmp_path):
        out = tmp_path / "out"
        code = run_cli("--manifest", str(corpus_with_bad_clip),
                       "--kind", "frames", "--model", "mock:x",
                       "--out", str(out))
        assert code == 3
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_ok"] == 2 and summary["n_failed"] == 1
        assert summary["failures"][0]["utt_id"] == "u1"
        assert "not found" in summary["failures"][0]["error"]
        assert (out / "frames" / "u0.frm").exists()
        assert not (out / "frames" / "u1.frm").exists()

    def test_all_failures_abort(self, tmp_path):
        rec = {"utt_id": "u0", "speaker_id": "s", "language": "nl",
               "accent": "native", "duration_s": 1.0, "audio": "gone.wav",
               "split": "test"}
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ExtractError, match="every utterance failed"):
            run_job(ExtractionJob(manifest=path, kind="frames",
                                  model_id="mock:x", out_dir=tmp_path / "o"))


class TestDegenerateInputs:
    def test_silent_clip_warned_but_loadable(self, tmp_path):
        write_wav(tmp_path / "quiet.wav", np.zeros(16_000))
        write_wav(tmp_path / "loud.wav",
                  0.3 * np.sin(2 * np.pi * 440 * np.arange(16_000) / 16_000))
        recs = [{"utt_id": u, "speaker_id": "s", "language": "nl",
                 "accent": "native", "duration_s": 1.0, "audio": f"{u}.wav",
                 "split": "test"} for u in ("quiet", "loud")]
        path = tmp_path / "manifest.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))
        summary = run_job(ExtractionJob(manifest=path, kind="phones",
                                        model_id="mock:x",
                                        out_dir=tmp_path / "out"))
        assert summary["n_failed"] == 0
        assert any(w["utt_id"] == "quiet" and "short" in w["warning"]
                   for w in summary["warnings"])
        lines = (tmp_path / "out" / "tokens.tsv").read_text().splitlines()
        assert lines[0].startswith("quiet\t")   # empty sequence still listed


class TestDeterminism:
    def test_same_run_same_bytes(self, smoke_corpus, tmp_path):
        root, _ = smoke_corpus
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_job(ExtractionJob(manifest=root / "manifest.jsonl",
                                  kind="logits", model_id="mock:det",
                                  out_dir=out))
            digests.append((out / "logits.bin").read_bytes())
        assert digests[0] == digests[1]
