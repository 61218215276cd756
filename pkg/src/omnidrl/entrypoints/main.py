"""Entrypoint of the omnidrl command line tool"""

import argparse
import logging
import sys
from typing import List, Optional, Tuple

from omnidrl.configurator.settings.base import LOG_LEVEL
from omnidrl.configurator.settings.config import load_config
from omnidrl.domain.boxes import CylBox
from omnidrl.domain.exceptions import OmniDRLError
from omnidrl.domain.models import Split
from omnidrl.entrypoints.cli.commands import cmd_eval, cmd_generate, cmd_render, cmd_report, cmd_train

logger = logging.getLogger(__name__)

EXIT_OMNIDRL_ERROR = 2


def _floats(text: str, count: int) -> Tuple[float, ...]:
    values = tuple(float(v) for v in text.split(","))
    if len(values) != count:
        raise argparse.ArgumentTypeError(f"Expected {count} comma-separated numbers, got {text!r}")
    return values


def _box(text: str) -> CylBox:
    rho, beta, z, w, h = _floats(text, 5)
    return CylBox(rho=rho, beta=beta, z=z, w=w, h=h)


def _segment(text: str) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    values = _floats(text, 6)
    return values[:3], values[3:]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="Dotted config override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnidrl", description="Pedestrian localization in omnidirectional images with deep Q-learning")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Render a synthetic dataset")
    _add_common(generate)
    generate.add_argument("--out", required=True, help="Dataset directory")

    train = commands.add_parser("train", help="Train a Q-network")
    _add_common(train)
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", required=True, help="Run directory")
    train.add_argument("--resume", action="store_true", help="Continue from the run directory's training state")
    train.add_argument("--single-task", action="store_true", help="Train without the classification branch")

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint on the test split")
    _add_common(evaluate)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--checkpoint", default=None)
    evaluate.add_argument("--agent", choices=["greedy", "oracle"], default=None)

    render = commands.add_parser("render", help="Draw projected boxes and segments over an image")
    _add_common(render)
    render.add_argument("--out", required=True, help="Output PNG")
    render.add_argument("--dataset", default=None)
    render.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value)
    render.add_argument("--record", type=int, default=None, help="Record id (defaults to the first record)")
    render.add_argument("--box", type=_box, default=None, metavar="RHO,BETA,Z,W,H")
    render.add_argument("--line", type=_segment, action="append", default=[], metavar="X1,Y1,Z1,X2,Y2,Z2")

    report = commands.add_parser("report", help="Compare evaluation runs")
    report.add_argument("runs", nargs="+", help="Evaluation run directories")
    report.add_argument("--out", required=True)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        cmd_report(args.runs, args.out)
        return 0

    overrides = list(args.override)
    if getattr(args, "single_task", False):
        overrides.append("network.multi_task=false")
    config = load_config(args.config, overrides, args.seed)
    logger.info(f"omnidrl {args.command} (seed {config.seed})")

    if args.command == "generate":
        cmd_generate(config, args.out)
    elif args.command == "train":
        cmd_train(config, args.dataset, args.out, resume=args.resume)
    elif args.command == "eval":
        cmd_eval(config, args.dataset, args.out, checkpoint=args.checkpoint, agent_kind=args.agent)
    elif args.command == "render":
        cmd_render(config, args.out, dataset_dir=args.dataset, split=Split(args.split), record_id=args.record, box=args.box, lines=args.line)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except OmniDRLError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_OMNIDRL_ERROR


if __name__ == "__main__":
    sys.exit(main())
