"""Command line for the feature exporter."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import PROFILES
from .errors import ExporterError
from .export import ExportSpec, PRID_MIN_FRAMES, export


def _parse_dims(text):
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("dims must be three positive integers h,w,c")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reid-export",
        description="Export per-frame feature maps and a manifest for the stripereid engine",
    )
    parser.add_argument("--source", required=True, help="camera/tracklet/image directory tree")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--backbone", choices=("stub", "torch"), default="stub")
    parser.add_argument(
        "--profile",
        choices=tuple(PROFILES) + ("toy",),
        default="resnet50",
        help="feature-map dims contract; toy requires --dims",
    )
    parser.add_argument("--dims", type=_parse_dims, default=None, help="h,w,c for --profile toy")
    parser.add_argument(
        "--min-frames",
        type=int,
        default=1,
        help=f"drop tracklets with fewer frames (PRID protocol uses {PRID_MIN_FRAMES})",
    )
    parser.add_argument("--weights", choices=("pretrained", "random"), default="pretrained")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        source=Path(args.source),
        out=Path(args.out),
        backbone=args.backbone,
        profile=args.profile,
        dims=args.dims,
        min_frames=args.min_frames,
        weights=args.weights,
    )
    try:
        result = export(spec)
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {result.num_tracklets} tracklets / {result.num_frames} frames "
        f"(dims {result.dims}, {result.dropped_tracklets} dropped) to {args.out}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
