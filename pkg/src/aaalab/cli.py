"""``aaalab`` command line.

Exit codes: 0 success, 1 usage/config error, 2 invariant violation during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from aaalab import harness
from aaalab.model import WeightsFormatError
from aaalab.numkit import InvalidInputError

COMMANDS = {
    "train": harness.cmd_train,
    "calibrate": harness.cmd_calibrate,
    "attack": harness.cmd_attack,
    "sweep": harness.cmd_sweep,
    "trace": harness.cmd_trace,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)"
    )
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="aaalab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train the toy MLP and save its weights",
        "calibrate": "tune the temperature and report ECE before/after",
        "attack": "run every attack against every defense; write traces and report",
        "sweep": "vary one defense hyperparameter (t, alpha or beta) and rerun attack",
        "trace": "write the defended/undefended loss trace for one sample",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def resolve_config(args) -> harness.ExperimentConfig:
    pairs = harness.read_config_file(args.config) if args.config else []
    for item in args.set:
        if "=" not in item:
            raise harness.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value))
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise harness.ConfigError("--seed must be an unsigned 64-bit integer")
        pairs.append(("seed", str(args.seed)))
    if args.out is not None:
        pairs.append(("out", args.out))
    return harness.parse_pairs(pairs).validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg)
    except harness.InvariantViolation as exc:
        print(f"aaalab: invariant violation: {exc}", file=sys.stderr)
        return 2
    except (harness.ConfigError, InvalidInputError, WeightsFormatError, OSError) as exc:
        print(f"aaalab: error: {exc}", file=sys.stderr)
        return 1
    if args.command == "trace":
        print(result)
    elif args.command == "sweep":
        for row in result:
            print(json.dumps(row, sort_keys=True))
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
