"""Single command-line entry point.

Exit codes: 0 success, 1 validation error (bad inputs/config), 2 runtime
error. Errors are emitted as single machine-parsable lines on stderr:
``ERROR<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:                     # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from . import corpus, evalstats, fusion, probes, quantizer, seqmodel, training
from .errors import FormatError, ValidationError

DEFAULT_SEED = 0


def _seed_default() -> int:
    env = os.environ.get("LIDLAB_SEED")
    return int(env) if env else DEFAULT_SEED


def _ensure_out(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ValidationError(f"output {path} exists; pass --force to overwrite")


def _write_run_record(out: Path, args: argparse.Namespace) -> None:
    rec = {k: (str(v) if isinstance(v, Path) else v)
           for k, v in vars(args).items() if k != "func"}
    rec["lidlab_version"] = __version__
    target = out / "run.json" if out.is_dir() else out.with_suffix(out.suffix + ".run.json")
    target.write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> None:
    spec = corpus.SynthSpec.from_json(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("manifest.jsonl", "tokens.tsv", "vocab.txt"):
        _ensure_out(out / name, args.force)
    utts, seqs = corpus.synth_corpus(spec, args.n)
    corpus.save_manifest(utts, out / "manifest.jsonl")
    corpus.save_token_file(seqs, out / "tokens.tsv")
    corpus.save_vocab(corpus.build_vocab(seqs), out / "vocab.txt")
    _write_run_record(out, args)
    print(f"wrote {len(utts)} utterances over "
          f"{len(spec.languages)}x{len(spec.accent_maps)} cells to {out}")


def cmd_chunk(args) -> None:
    utts = corpus.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _ensure_out(out / "manifest.jsonl", args.force)
    base = Path(args.manifest).parent
    new_utts = []
    for u in utts:
        if u.audio_path is None:
            raise ValidationError(f"{u.utt_id}: no audio path in manifest")
        w = corpus.read_wav(base / u.audio_path)
        corpus.check_audio_duration(u, w)
        for i, piece in enumerate(corpus.chunk_utterance(w, args.chunk_s, args.min_tail_s)):
            cid = f"{u.utt_id}.c{i}"
            wav_name = f"{cid}.wav"
            corpus.write_wav(piece, out / wav_name)
            new_utts.append(corpus.Utterance(
                utt_id=cid, speaker_id=u.speaker_id, language=u.language,
                accent=u.accent, duration_s=piece.duration_s,
                audio_path=wav_name, split=u.split))
    corpus.save_manifest(new_utts, out / "manifest.jsonl")
    _write_run_record(out, args)
    print(f"chunked {len(utts)} utterances into {len(new_utts)} segments")


def _pooled_frames(frames_dir: Path, window_ms: int):
    paths = sorted(frames_dir.glob("*.frm"))
    if not paths:
        raise ValidationError(f"no .frm files in {frames_dir}")
    for p in paths:
        m = quantizer.load_frames(p)
        yield quantizer.pool_frames(m, window_ms) if window_ms else m


def cmd_quantize_fit(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    points = np.concatenate([m.frames for m in
                             _pooled_frames(Path(args.frames_dir), args.window_ms)])
    cb = quantizer.kmeans_fit(points, args.k, seed=args.seed,
                              max_iters=args.max_iters, tol=args.tol,
                              n_restarts=args.restarts, max_points=args.max_points)
    quantizer.save_codebook(cb, out)
    _write_run_record(out, args)
    print(f"codebook {cb.k}x{cb.dim} inertia {cb.inertia:.4f} "
          f"after {cb.iterations} iterations -> {out}")


def cmd_quantize_apply(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    cb = quantizer.load_codebook(args.codebook)
    seqs = [quantizer.kmeans_assign(cb, m) for m in
            _pooled_frames(Path(args.frames_dir), args.window_ms)]
    corpus.save_token_file(seqs, out)
    _write_run_record(out, args)
    print(f"quantized {len(seqs)} utterances -> {out}")


MODEL_KEYS = {
    "embed_dim": 256, "model_dim": 128, "n_layers": 8, "n_heads": 8,
    "ffn_dim": 256, "max_seq_len": 256, "acoustic_dim": 0,
    "embedding_mode": "learned", "dropout": 0.0, "seed": 0, "dtype": "float32",
}
TRAIN_KEYS = {
    "learning_rate": 1e-4, "epochs": 20, "batch_size": 32, "beta1": 0.9,
    "beta2": 0.999, "adam_eps": 1e-8, "clip_norm": 5.0,
    "lr_schedule": "constant", "seed": 0,
}
DATA_KEYS = {"manifest": None, "tokens": None, "vocab": None,
             "codebook": None, "acoustic": None,
             "train_split": "train", "dev_split": "dev"}


def _load_train_config(path: Path) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {"model": MODEL_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}
    unknown_sections = set(raw) - set(known)
    if unknown_sections:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown_sections)}")
    cfg = {}
    for section, defaults in known.items():
        body = raw.get(section, {})
        unknown = set(body) - set(defaults)
        if unknown:
            raise ValidationError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
        cfg[section] = {**defaults, **body}
    for key in ("manifest", "tokens", "vocab", "codebook", "acoustic"):
        val = cfg["data"].get(key)
        if val is not None:
            cfg["data"][key] = str((path.parent / val).resolve())
    for key in ("manifest", "tokens", "vocab"):
        if cfg["data"][key] is None:
            raise ValidationError(f"{path}: [data].{key} is required")
    return cfg


def _load_examples(cfg_data: dict, splits: tuple[str, ...]):
    utts = corpus.load_manifest(cfg_data["manifest"])
    seqs = {s.utt_id: s for s in corpus.load_token_file(cfg_data["tokens"])}
    acoustic = (fusion.load_embeddings(cfg_data["acoustic"])
                if cfg_data.get("acoustic") else None)
    space = corpus.LabelSpace(sorted({u.language for u in utts}))
    out = {split: [] for split in splits}
    for u in utts:
        if u.split not in out:
            continue
        if u.utt_id not in seqs:
            raise ValidationError(f"{u.utt_id}: no token sequence")
        ac = None
        if acoustic is not None:
            if u.utt_id not in acoustic:
                raise ValidationError(f"{u.utt_id}: no acoustic embedding")
            ac = acoustic[u.utt_id]
        out[u.split].append(training.Example(seqs[u.utt_id], u.language, ac))
    return out, space


def cmd_train(args) -> None:
    cfg = _load_train_config(Path(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("model.bin", "trace.jsonl", "config.resolved.json"):
        _ensure_out(out / name, args.force)
    data = cfg["data"]
    sets, space = _load_examples(data, (data["train_split"], data["dev_split"]))
    vocab = corpus.load_vocab(data["vocab"])
    codebook = quantizer.load_codebook(data["codebook"]) if data["codebook"] else None
    mc = dict(cfg["model"])
    if args.seed is not None:
        mc["seed"] = args.seed
    model_cfg = seqmodel.ClassifierConfig(
        vocab_size=len(vocab), n_labels=len(space), **mc)
    tc_kwargs = dict(cfg["train"])
    if args.seed is not None:
        tc_kwargs["seed"] = args.seed
    tc = training.TrainConfig(**tc_kwargs)
    model, trace = training.train(
        model_cfg, tc, sets[data["train_split"]], sets[data["dev_split"]],
        space, vocab, codebook)
    seqmodel.save_model(model, out / "model.bin")
    training.save_trace(trace, out / "trace.jsonl")
    (out / "config.resolved.json").write_text(
        json.dumps({**cfg, "lidlab_version": __version__}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    _write_run_record(out, args)
    digest = hashlib.sha256((out / "model.bin").read_bytes()).hexdigest()
    print(f"trained {model.num_params()} parameters; best dev acc "
          f"{trace[-1]['best_dev_acc']:.4f} (epoch {trace[-1]['best_epoch']}); "
          f"model sha256 {digest[:16]}")


def cmd_predict(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    model = seqmodel.load_model(args.model)
    seqs = sorted(corpus.load_token_file(args.tokens), key=lambda s: s.utt_id)
    acoustic = fusion.load_embeddings(args.acoustic) if args.acoustic else None
    records = []
    for s in seqs:
        ac = None
        if model.config.acoustic_dim > 0:
            if acoustic is None or s.utt_id not in acoustic:
                raise ValidationError(f"{s.utt_id}: model needs an acoustic embedding")
            ac = acoustic[s.utt_id]
        records.append(seqmodel.forward(model, s, ac))
    fusion.save_predictions(records, out)
    _write_run_record(out, args)
    print(f"scored {len(records)} utterances -> {out}")


def cmd_fuse(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    run_a = fusion.load_predictions(args.a, normalize=args.normalize_a)
    run_b = fusion.load_predictions(args.b, normalize=args.normalize_b)
    table, _ = fusion.align_predictions([run_a, run_b], strict=True)
    fused = [fusion.fuse_average(a, b, args.weight) for a, b in table.values()]
    fusion.save_predictions(fused, out)
    _write_run_record(out, args)
    print(f"fused {len(fused)} predictions at weight {args.weight} -> {out}")


def _eval_result_from(pred_path: str, manifest_path: str) -> evalstats.EvalResult:
    records = fusion.load_predictions(pred_path)
    utts = {u.utt_id: u for u in corpus.load_manifest(manifest_path)}
    rows = []
    for r in records:
        if r.utt_id not in utts:
            raise ValidationError(f"{r.utt_id}: prediction for unknown utterance")
        u = utts[r.utt_id]
        rows.append(evalstats.EvalRow(u.utt_id, u.speaker_id, u.language,
                                      u.accent, r.predicted))
    return evalstats.EvalResult(rows)


def cmd_eval(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("result.tsv", "report.json", "report.txt"):
        _ensure_out(out / name, args.force)
    result = _eval_result_from(args.pred, args.manifest)
    mean, lo, hi = evalstats.bootstrap_speaker_ci(
        result, n_boot=args.bootstrap, seed=args.seed)
    report = {
        "n": len(result),
        "overall": evalstats.accuracy(result, "none")["all"],
        "by_accent": evalstats.accuracy(result, "accent"),
        "by_language": evalstats.accuracy(result, "language"),
        "bootstrap": {"mean": mean, "lo": lo, "hi": hi,
                      "n_boot": args.bootstrap, "seed": args.seed},
        "macro_accent": evalstats.macro_average(result, "accent"),
        "macro_language": evalstats.macro_average(result, "language"),
    }
    if args.confusions:
        cmap = evalstats.load_confusion_map(args.confusions)
        per_accent, aggregate = evalstats.confusion_rate(result, cmap, strict=False)
        report["confusion_rate"] = {"per_accent": per_accent, "aggregate": aggregate}
    result.save_tsv(out / "result.tsv")
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                                     encoding="utf-8")
    acc_rows = [{"group": g, **v} for g, v in report["by_accent"].items()]
    text = (f"n={report['n']} overall={report['overall']['accuracy']:.4f} "
            f"bootstrap mean={mean:.4f} ci=({lo:.4f},{hi:.4f})\n"
            + evalstats.render_table(acc_rows, ["group", "n", "accuracy"]))
    (out / "report.txt").write_text(text, encoding="utf-8")
    _write_run_record(out, args)
    print(text, end="")


def _token_items(manifest_path: str, tokens_path: str, split: str | None):
    utts = corpus.load_manifest(manifest_path)
    seqs = {s.utt_id: s for s in corpus.load_token_file(tokens_path)}
    items = []
    for u in utts:
        if split and u.split != split:
            continue
        if u.utt_id not in seqs:
            raise ValidationError(f"{u.utt_id}: no token sequence")
        items.append((u, seqs[u.utt_id]))
    return items


def cmd_probe_reverse(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    model = seqmodel.load_model(args.model)
    items = _token_items(args.manifest, args.tokens, args.split)
    rows = probes.reversal_degradation(
        lambda ts: seqmodel.forward(model, ts), items, _int_list(args.blocks),
        group_by=args.group_by)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("group\tblock\tn\tacc_original\tacc_reversed\trelative_change_pct\n")
        for r in rows:
            fh.write("\t".join("-" if r[k] is None else f"{r[k]}"
                               for k in ("group", "block", "n", "acc_original",
                                         "acc_reversed", "relative_change_pct")) + "\n")
    _write_run_record(out, args)
    print(f"wrote reversal table ({len(rows)} rows) -> {out}")


def cmd_probe_vote(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    model = seqmodel.load_model(args.model)
    items = _token_items(args.manifest, args.tokens, args.split)
    rows, audit = probes.vote_accuracy_sweep(
        lambda ts: seqmodel.forward(model, ts), items, _int_list(args.windows),
        group_by=args.group_by)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("group\twindow\tn\taccuracy\n")
        for r in rows:
            fh.write("\t".join("-" if r[k] is None else f"{r[k]}"
                               for k in ("group", "window", "n", "accuracy")) + "\n")
    audit_path = out.with_suffix(out.suffix + ".audit.jsonl")
    with open(audit_path, "w", encoding="utf-8") as fh:
        for rec in audit:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_run_record(out, args)
    print(f"wrote vote table ({len(rows)} rows) -> {out}")


def cmd_profile(args) -> None:
    out = Path(args.out)
    _ensure_out(out, args.force)
    result = evalstats.EvalResult.load_tsv(args.result)
    profile = evalstats.error_profile(result, top_k=args.top_k)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("accent\trank\tpredicted\tpct_of_total_error\n")
        for accent, entries in profile.items():
            for rank, (lab, pct) in enumerate(entries, start=1):
                fh.write(f"{accent}\t{rank}\t{lab}\t{pct:.2f}\n")
    if args.confusions:
        cmap = evalstats.load_confusion_map(args.confusions)
        per_accent, aggregate = evalstats.confusion_rate(result, cmap, strict=False)
        summary = {"per_accent": per_accent, "aggregate": aggregate}
        out.with_suffix(out.suffix + ".confusion.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_run_record(out, args)
    print(f"wrote error profile -> {out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidlab",
        description="Accent-robust spoken language identification laboratory.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        p.add_argument("--threads", type=int, default=0,
                       help="worker cap (0 = available parallelism); "
                            "reductions stay deterministic regardless")
        return p

    p = add("synth", cmd_synth, "Generate a synthetic phonotactic corpus.")
    p.add_argument("--spec", required=True, help="synthesis spec JSON file")
    p.add_argument("--n", type=int, required=True,
                   help="utterances per (language, accent) cell")
    p.add_argument("--out", required=True, help="output directory")

    p = add("chunk", cmd_chunk, "Chunk manifest audio into fixed-length segments.")
    p.add_argument("--manifest", required=True, help="input manifest (JSON lines)")
    p.add_argument("--chunk-s", type=float, default=6.0, help="chunk length, seconds")
    p.add_argument("--min-tail-s", type=float, default=1.0,
                   help="keep a final short chunk iff at least this long")
    p.add_argument("--out", required=True, help="output directory")

    p = add("quantize-fit", cmd_quantize_fit, "Fit a K-means codebook over frame files.")
    p.add_argument("--frames-dir", required=True, help="directory of .frm files")
    p.add_argument("--k", type=int, default=1000, help="number of clusters")
    p.add_argument("--window-ms", type=int, default=100,
                   help="mean-pooling window before clustering (0 = none)")
    p.add_argument("--seed", type=int, default=_seed_default(), help="random seed")
    p.add_argument("--max-iters", type=int, default=100, help="Lloyd iteration cap")
    p.add_argument("--tol", type=float, default=1e-4,
                   help="stop when max centroid movement drops below this")
    p.add_argument("--restarts", type=int, default=3, help="k-means++ restarts")
    p.add_argument("--max-points", type=int, default=None,
                   help="subsample cap on training points")
    p.add_argument("--out", required=True, help="output codebook file")

    p = add("quantize-apply", cmd_quantize_apply,
            "Assign pooled frames to nearest centroids, emitting token files.")
    p.add_argument("--codebook", required=True, help="codebook file")
    p.add_argument("--frames-dir", required=True, help="directory of .frm files")
    p.add_argument("--window-ms", type=int, default=100,
                   help="mean-pooling window (must match the fit; 0 = none)")
    p.add_argument("--out", required=True, help="output token TSV")

    p = add("train", cmd_train, "Train a sequence classifier from a TOML config.")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="override both model and trainer seeds")
    p.add_argument("--out", required=True, help="output directory")

    p = add("predict", cmd_predict, "Score token sequences with a trained model.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--tokens", required=True, help="token TSV")
    p.add_argument("--acoustic", default=None,
                   help="acoustic embedding matrix (for concatenation models)")
    p.add_argument("--out", required=True, help="output prediction file")

    p = add("fuse", cmd_fuse, "Average two prediction runs in probability space.")
    p.add_argument("--a", required=True, help="first prediction file")
    p.add_argument("--b", required=True, help="second prediction file")
    p.add_argument("--weight", type=float, default=0.5,
                   help="weight on the first run (second gets 1-weight)")
    p.add_argument("--normalize-a", default="none", choices=["none", "softmax"],
                   help="normalization applied to the first run at load")
    p.add_argument("--normalize-b", default="none", choices=["none", "softmax"],
                   help="normalization applied to the second run at load")
    p.add_argument("--out", required=True, help="output prediction file")

    p = add("eval", cmd_eval, "Evaluate predictions against a manifest.")
    p.add_argument("--pred", required=True, help="prediction file")
    p.add_argument("--manifest", required=True, help="manifest with references")
    p.add_argument("--bootstrap", type=int, default=10_000,
                   help="bootstrap replicates over speakers")
    p.add_argument("--seed", type=int, default=_seed_default(), help="bootstrap seed")
    p.add_argument("--confusions", default=None,
                   help="accent -> languages confusion-set JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = add("probe-reverse", cmd_probe_reverse,
            "Measure accuracy degradation under token block reversal.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--tokens", required=True, help="token TSV")
    p.add_argument("--manifest", required=True, help="manifest with references")
    p.add_argument("--blocks", default="1,2,4,8,16,32",
                   help="comma-separated block sizes in tokens")
    p.add_argument("--split", default="test", help="manifest split to probe")
    p.add_argument("--group-by", default="accent",
                   choices=["accent", "language", "none"], help="result grouping")
    p.add_argument("--out", required=True, help="output TSV")

    p = add("probe-vote", cmd_probe_vote,
            "Measure accuracy of windowed majority-vote aggregation.")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--tokens", required=True, help="token TSV")
    p.add_argument("--manifest", required=True, help="manifest with references")
    p.add_argument("--windows", default="5,10,20,40",
                   help="comma-separated window sizes in tokens")
    p.add_argument("--split", default="test", help="manifest split to probe")
    p.add_argument("--group-by", default="accent",
                   choices=["accent", "language", "none"], help="result grouping")
    p.add_argument("--out", required=True, help="output TSV")

    p = add("profile", cmd_profile, "Error profile and confusion rates per accent.")
    p.add_argument("--result", required=True, help="eval result TSV")
    p.add_argument("--top-k", type=int, default=3,
                   help="top predicted languages per accent")
    p.add_argument("--confusions", default=None,
                   help="accent -> languages confusion-set JSON")
    p.add_argument("--out", required=True, help="output TSV")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, FormatError) as e:
        print(f"ERROR\tvalidation\t{e}", file=sys.stderr)
        return 1
    except Exception as e:                      # noqa: BLE001 - CLI boundary
        print(f"ERROR\truntime\t{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
