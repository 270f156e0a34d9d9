"""Command-line entry point: ``dessilbi <task> [--config FILE] [--seed N] [--out DIR] ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
import argparse
import sys

from ..errors import ArgumentError, DessiError
from .config import TASKS, apply_overrides, config_from_dict, read_config_file
from .log import dumps
from .run import run

# flag -> dotted config key
FLAG_KEYS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "optimizer.lr",
    "lam": "lam",
    "variant": "optimizer.variant",
    "trainer": "trainer",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser():
    parser = _Parser(prog="dessilbi", description="DessiLBI training, pruning and growth toolkit")
    sub = parser.add_subparsers(dest="task", metavar="TASK", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} task")
        p.add_argument("--config", help="YAML or JSON experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float, help="base step size alpha")
        p.add_argument("--lam", type=float, help="penalty strength")
        p.add_argument("--variant", choices=["naive", "momentum", "momentum_wd", "scaled"])
        p.add_argument("--trainer", choices=["dessilbi", "sgd"])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field, e.g. optimizer.nu=100")
    return parser


def config_from_args(args):
    data = read_config_file(args.config) if args.config else {}
    data = apply_overrides(data, args.set)
    data["task"] = args.task
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            apply_overrides(data, [f"{key}={value}"])
    return config_from_dict(data)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        summary = run(config_from_args(args))
    except DessiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
