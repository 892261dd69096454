"""``ibcsc`` command line: train / corrupt / adapt / eval / report.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import pipeline
from .config import ConfigError, default_config, dump_config, load_config, resolve_config, run_dir
from .data import DataError
from .training import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: usage error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ibcsc", description=__doc__.split("\n")[0].replace("``", ""))
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config (defaults are used for absent fields)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="FIELD=VALUE",
                        help="override one field, e.g. train.epochs=5 (repeatable)")
        sp.add_argument("--output-dir", help="run directory (overrides output_dir)")
        return sp

    with_config(sub.add_parser("train", help="train a model and log the lambda trajectory"))
    sp = with_config(sub.add_parser("corrupt", help="write the corrupted test pools"))
    sp.add_argument("--levels", type=_int_list)
    for name, helptext in (("adapt", "test-time lambda correction over noise levels and budgets"),
                           ("eval", "frozen-model accuracy on clean and corrupted test data")):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--checkpoint", help="defaults to <run dir>/checkpoint.npz")
        sp.add_argument("--levels", type=_int_list)
        if name == "adapt":
            sp.add_argument("--budgets", type=_int_list)
    sp = sub.add_parser("report", help="aggregate stored run outputs into tables")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--output-dir", required=True)
    sp = sub.add_parser("init-config", help="write the default config")
    sp.add_argument("path")
    return p


def _resolve(args) -> dict:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.config:
        return load_config(args.config, overrides)
    return resolve_config({}, overrides)


def _check_levels(levels, field):
    if levels is not None and (not levels or any(not 1 <= v <= 5 for v in levels)):
        raise ConfigError(field, "levels must be in 1..5")


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "init-config":
            dump_config(default_config(), args.path)
            return EXIT_OK
        if args.command == "report":
            out = pipeline.cmd_report(args.runs, args.output_dir)
            sys.stdout.write(out["text"])
            return EXIT_OK
        cfg = _resolve(args)
        out_dir = run_dir(cfg)
        if args.command == "train":
            s = pipeline.cmd_train(cfg, out_dir)
            print(f"trained {s['epochs']} epochs: train_acc {s['final_train_acc']:.4f} "
                  f"test_acc {s['final_test_acc']:.4f} mean_lambda {s['final_mean_lambda']:.4f} -> {out_dir}")
        elif args.command == "corrupt":
            _check_levels(args.levels, "--levels")
            rows = pipeline.cmd_corrupt(cfg, out_dir, args.levels)
            print(f"wrote {len(rows)} corrupted pools -> {out_dir}")
        else:
            _check_levels(args.levels, "--levels")
            ckpt = args.checkpoint or os.path.join(out_dir, pipeline.CHECKPOINT)
            if args.command == "adapt":
                if args.budgets is not None and (not args.budgets or min(args.budgets) < 1):
                    raise ConfigError("--budgets", "budgets must be positive")
                rows = pipeline.cmd_adapt(cfg, out_dir, ckpt, args.levels, args.budgets)
                for r in rows:
                    print(f"level {r['noise_level']} budget {r['subset_size']}: frozen {r['frozen_accuracy']:.4f} "
                          f"bn_only {r['bn_only_accuracy']:.4f} adapted {r['adapted_accuracy']:.4f} "
                          f"mean_lambda {r['adapted_mean_lambda']:.4f}")
            else:
                for r in pipeline.cmd_eval(cfg, out_dir, ckpt, args.levels):
                    print(f"{r['split']} level {r['noise_level']}: accuracy {r['accuracy']:.4f}")
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except DivergenceError as exc:
        sys.stderr.write(f"diverged: {exc}\n")
        return EXIT_DIVERGENCE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
