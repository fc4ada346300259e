"""bagexport command line: image folders in, .bagemb bags out."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import BACKBONE_DIMS
from .export import ExportJob, export


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="bagexport",
        description="Run a vision backbone over per-patient image folders "
                    "and emit .bagemb embedding bags plus a manifest.")
    ap.add_argument("--input", type=Path, required=True,
                    help="root directory with one subdirectory per patient")
    ap.add_argument("--output", type=Path, required=True,
                    help="output directory for .bagemb files + manifest")
    ap.add_argument("--backbone", choices=sorted(BACKBONE_DIMS),
                    default="vit_b_16",
                    help="feature extractor preset (default: vit_b_16)")
    ap.add_argument("--sidecar", type=Path, default=None,
                    help="CSV with patient_id,label,caption columns")
    ap.add_argument("--weights", type=Path, default=None,
                    help="backbone state-dict file (seeded init when absent)")
    ap.add_argument("--seed", type=int, default=0,
                    help="initialization seed when no weights are given")
    ap.add_argument("--split", default="train",
                    help="split tag written to the manifest")
    args = ap.parse_args(argv)

    try:
        summary = export(ExportJob(input_root=args.input,
                                   output_dir=args.output,
                                   backbone=args.backbone,
                                   sidecar=args.sidecar,
                                   weights=args.weights,
                                   seed=args.seed,
                                   split=args.split))
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(summary.patients_written)} bags (d_v={summary.d_v}) "
          f"to {args.output}; skipped {len(summary.images_skipped)} images; "
          f"omitted {len(summary.patients_omitted)} patients")
    return 0


if __name__ == "__main__":
    sys.exit(main())
