"""Command line for the feature exporter."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportSpec, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastref-export",
        description="Export an image folder to FTZ feature tensors + manifest "
                    "using a torchvision backbone.",
    )
    parser.add_argument("input_dir", help="image folder (MVTec-style layout recognized)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--backbone", default="wide_resnet50_2",
                        help="any torchvision model name, e.g. resnet18, wide_resnet50_2")
    parser.add_argument("--layers", default="layer2,layer3",
                        help="comma-separated feature-extraction nodes")
    parser.add_argument("--resolution", type=int, default=256)
    parser.add_argument("--weights", choices=("none", "default"), default="none",
                        help="'default' downloads hub weights; 'none' uses a "
                             "seeded random init (offline-safe, deterministic)")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        input_dir=args.input_dir,
        output_dir=args.out,
        backbone=args.backbone,
        layers=tuple(s.strip() for s in args.layers.split(",") if s.strip()),
        resolution=args.resolution,
        weights=args.weights,
        seed=args.seed,
    )
    try:
        manifest = export_features(spec)
    except (RuntimeError, ValueError) as exc:
        print(f'{{"error": "{type(exc).__name__}", "detail": "{exc}"}}', file=sys.stderr)
        return 3
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
