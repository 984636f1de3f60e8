"""Command line front end.

Exit codes: 0 all utterances extracted; 1 configuration/validation error;
2 I/O or format error; 3 run completed but some utterances failed (their
errors are listed in summary.json).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .errors import ExtractError
from .job import KINDS, ExtractionJob, run_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidextract",
        description="Batch feature extraction into the classifier toolkit's "
                    "interchange formats.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--manifest", required=True,
                        help="JSON-lines manifest; audio paths resolve relative to it")
    parser.add_argument("--kind", required=True, choices=KINDS,
                        help="what to extract")
    parser.add_argument("--model", required=True,
                        help="model id: mock:<name> or hf:<repo-id>")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--device", default="cpu",
                        help="device hint for pretrained backends")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExtractionJob(manifest=Path(args.manifest), kind=args.kind,
                            model_id=args.model, out_dir=Path(args.out),
                            device=args.device)
        summary = run_job(job)
    except ExtractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"{summary['kind']}: {summary['n_ok']}/{summary['n_utterances']} "
          f"utterances ok, {summary['n_failed']} failed -> {args.out}")
    return 3 if summary["n_failed"] else 0


if __name__ == "__main__":
    sys.exit(main())
