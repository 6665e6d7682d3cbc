import argparse
import logging
from typing import List, Optional

from src.api import commands
from src.config.settings import settings
from src.core.synthdata import SynthConfig

logger = logging.getLogger(__name__)

SEED_MAX = 2**64 - 1


def seed_type(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    for name, info in SynthConfig.model_fields.items():
        if name == "seed":
            continue
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=info.annotation, default=None,
                            help=f"default {info.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setcls", description="Set classifier for tracklet re-classification")
    parser.add_argument("--log-level", default=None, help=f"override LOG_LEVEL (currently {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed RoI dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=seed_type, default=0)
    p.add_argument("--format", choices=("strk", "jsonl"), default="strk")
    _add_synth_flags(p)
    p.set_defaults(handler=commands.gen_data)

    p = sub.add_parser("train", help="train a set classifier from a run-config file")
    p.add_argument("config")
    p.add_argument("--seed", type=seed_type, default=None)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--upload", action="store_true", help="publish artifacts to the configured bucket")
    p.set_defaults(handler=commands.train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled test tracklets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test tracklets JSON-lines")
    p.add_argument("--manifest", default=None, help="dataset manifest with frequency groups")
    p.add_argument("--counts", default=None, help="class-count sidecar to derive frequency groups from")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--workers", type=positive_int, default=settings.NUM_WORKERS)
    p.add_argument("--upload", action="store_true", help="store the report in the configured bucket")
    p.set_defaults(handler=commands.evaluate)

    p = sub.add_parser("reclassify", help="fuse set-classifier and tracker scores for predicted tracklets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tracklets", required=True, help="predicted tracklets JSON-lines")
    p.add_argument("--out", required=True, help="fused scores JSON-lines")
    p.add_argument("--lambda-c", type=float, default=1.0 / 3.0)
    p.add_argument("--lambda-s", type=float, default=2.0 / 3.0)
    p.add_argument("--no-length-penalty", action="store_true")
    p.add_argument("--scalar-class-score", action="store_true", help="fuse only the top class probability")
    p.add_argument("--workers", type=positive_int, default=settings.NUM_WORKERS)
    p.set_defaults(handler=commands.reclassify)

    p = sub.add_parser("grad-check", help="compare reverse-mode gradients with finite differences")
    p.add_argument("--seed", type=seed_type, default=0)
    p.add_argument("--entries-per-param", type=positive_int, default=6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(handler=commands.grad_check)

    p = sub.add_parser("sample-stats", help="analytic vs empirical resampling distribution of a pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--counts", default=None)
    p.add_argument("--exponent", type=float, action="append", default=None, help="repeatable")
    p.add_argument("--draws", type=positive_int, default=1_000_000)
    p.add_argument("--seed", type=seed_type, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=commands.sample_stats)

    p = sub.add_parser("baseline", help="train and evaluate the per-frame baseline")
    p.add_argument("config")
    p.add_argument("--seed", type=seed_type, default=None)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(handler=commands.baseline)

    p = sub.add_parser("experiment", help="set classifier vs baseline over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=seed_type, nargs="+", default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--upload", action="store_true")
    p.set_defaults(handler=commands.experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())
    try:
        return int(args.handler(args) or 0)
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {str(e)}")
        return 1
