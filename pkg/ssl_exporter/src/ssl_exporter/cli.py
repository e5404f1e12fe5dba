"""Command line front end for the SSL feature exporter."""
from __future__ import annotations

import argparse
import sys

from .exporter import ExportError, ExportJob, export_batch, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssl-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="export one wav file")
    p_export.add_argument("--wav", required=True)
    p_export.add_argument("--model", required=True,
                          help="wav2vec2 | hubert | wavlm, or a local checkpoint directory")
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--labels", help="per-frame 0/1 file at the 20 ms hop")
    p_export.add_argument("--emotion", type=int, help="emotion id in [0,4)")
    p_export.add_argument("--id", help="utterance id (default: wav stem)")
    p_export.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_batch = sub.add_parser("batch", help="export every job in a JSON manifest")
    p_batch.add_argument("--manifest", required=True)
    p_batch.add_argument("--out-manifest", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            job = ExportJob(wav=args.wav, model=args.model, out=args.out,
                            labels=args.labels, emotion=args.emotion,
                            id=args.id, split=args.split)
            out = export_features(job)
            print(out)
            return 0
        return export_batch(args.manifest, args.out_manifest)
    except (ExportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
