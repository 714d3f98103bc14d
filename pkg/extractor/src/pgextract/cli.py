"""Command line for offline hidden-state extraction.

    pgextract --model llava-hf/llava-1.5-7b-hf \
        --input-manifest items.jsonl --out dumps/ --frames 8

The input manifest format is documented in `pgextract.jobs`. Outputs are a
`stacks/` directory of `.pgstack` dumps plus `extracted.manifest`.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .extract import extract
from .jobs import ExtractionJob, load_items


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgextract")
    parser.add_argument("--model", required=True, help="model hub name or local checkpoint path")
    parser.add_argument("--input-manifest", required=True, help="JSON-lines item list")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--frames", type=int, default=8, help="frames sampled uniformly per video")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--split", choices=("train", "test"), default="test")
    parser.add_argument(
        "--include-embedding-layer",
        action="store_true",
        help="also dump the embedding-layer output as row 0",
    )
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        job = ExtractionJob(
            model=args.model,
            items=load_items(args.input_manifest),
            out_dir=args.out,
            frames_per_video=args.frames,
            device=args.device,
            include_embedding_layer=args.include_embedding_layer,
            split=args.split,
        )
        job.validate()  # reject bad items before any model load
        report = extract(job)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {len(report.written)} stacks ({report.num_layers} x {report.dim}) "
        f"and {report.manifest_path}"
        + (f"; skipped {len(report.skipped)}: {report.skipped}" if report.skipped else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
