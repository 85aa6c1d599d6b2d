"""Command-line entry point: ``histotile <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from histotile import pipeline
from histotile.pipeline import PipelineConfig, StageError

log = logging.getLogger("histotile")

COMMANDS = ("normalize", "tile", "augment", "split", "train", "predict",
            "ingest-predictions", "aggregate", "evaluate", "run-all")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios, e.g. 0.6,0.2,0.2")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratios {text!r}") from None


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid widths {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--work-dir", dest="work_dir")
    common.add_argument("--input-dir", dest="input_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--patch-size", dest="patch_size", type=int)
    common.add_argument("--overlap", type=float)
    common.add_argument("--no-edge-anchor", dest="edge_anchor", action="store_const", const=False)
    common.add_argument("--ratios", type=_ratios)
    common.add_argument("--target-image", dest="target_image")
    common.add_argument("--target-stats", dest="target_stats")
    common.add_argument("--skip-normalization", dest="skip_normalization", action="store_const", const=True)
    common.add_argument("--no-augment-validation", dest="augment_validation", action="store_const", const=False)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--momentum", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--input-size", dest="input_size", type=int)
    common.add_argument("--widths", type=_widths)
    common.add_argument("--blocks", dest="blocks_per_stage", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="histotile", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ingest-predictions":
            p.add_argument("predictions", help="prediction CSV produced elsewhere")
        if name == "evaluate":
            p.add_argument("--manifest", help="ground-truth image manifest (default: <work-dir>/images.jsonl)")
        if name == "predict":
            p.add_argument("--splits", type=lambda s: tuple(x for x in s.split(",") if x),
                           dest="predict_splits")
    return parser


OVERRIDABLE = ("work_dir", "input_dir", "seed", "patch_size", "overlap", "edge_anchor", "ratios",
               "target_image", "target_stats", "skip_normalization", "augment_validation", "epochs",
               "lr", "momentum", "batch_size", "input_size", "widths", "blocks_per_stage",
               "predict_splits")


def make_config(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.load(args.config).to_json() if args.config else {}
    for key in OVERRIDABLE:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return PipelineConfig.from_json(base)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = make_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"histotile {args.command}: error: malformed config: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run-all":
            out = pipeline.run_all(cfg)
        elif args.command == "ingest-predictions":
            out = pipeline.run_ingest(cfg, args.predictions)
        elif args.command == "evaluate":
            out = pipeline.run_evaluate(cfg, args.manifest)
        else:
            out = pipeline.STAGE_FUNCS[args.command](cfg)
    except StageError as exc:
        print(f"histotile {args.command}: error in stage {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"histotile {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %s", out)
    print(Path(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
