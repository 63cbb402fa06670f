"""capsembed command line: manifest CSV in, EMB1 file out.

Exit codes: 0 all records written, 1 some images skipped, 2 usage or
backend error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .encoders import BackendUnavailable, make_backend
from .extract import extract, read_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsembed",
        description="Build an EMB1 embedding file from a path,label[,caption] manifest",
    )
    parser.add_argument("--manifest", required=True, help="CSV manifest file")
    parser.add_argument("--out", required=True, help="output EMB1 path")
    parser.add_argument("--backend", default="seeded", choices=("seeded", "pretrained"))
    parser.add_argument("--visual-model", dest="visual_model",
                        default="openai/clip-vit-large-patch14")
    parser.add_argument("--caption-model", dest="caption_model",
                        default="Salesforce/blip-image-captioning-base")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        manifest = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.backend == "pretrained":
            backend = make_backend("pretrained", visual_model=args.visual_model,
                                   caption_model=args.caption_model)
        else:
            backend = make_backend("seeded")
    except (BackendUnavailable, ValueError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    summary = extract(manifest, args.out, backend)
    print(f"wrote {summary.written} records to {args.out}")
    if summary.skipped:
        print(f"skipped {len(summary.skipped)} unreadable image(s):", file=sys.stderr)
        for path in summary.skipped:
            print(f"  {path}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
