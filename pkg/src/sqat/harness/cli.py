"""Command line entry point: ``sqat train|attack|sweep|report``.

Exit codes are 0 on success, 1 on usage or configuration errors and 2 on
runtime failures.  Relative output directories resolve against
``$SQAT_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..training import TrainingDiverged
from .config import ConfigError, load_config
from .runner import RunError, run_attack, run_report, run_sweep, run_train, verify_targeted

OUTPUT_ROOT_ENV = "SQAT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sqat", description="Adversarial attacks on a toy text-line recognizer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_overrides(sp):
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory (default: derived from experiment.output_dir)")

    t = sub.add_parser("train", help="generate the dataset and train a model")
    t.add_argument("config")
    with_overrides(t)

    a = sub.add_parser("attack", help="attack the first n test images")
    a.add_argument("config")
    a.add_argument("model")
    with_overrides(a)

    s = sub.add_parser("sweep", help="evaluate stored perturbations on the epsilon grid")
    s.add_argument("run_dir")
    s.add_argument("--verify", action="store_true",
                   help="also re-decode converged targeted perturbations")

    r = sub.add_parser("report", help="merge curve CSVs into report.csv, summary.txt and report.png")
    r.add_argument("curves", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--no-figure", action="store_true")
    return p


def _cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    out = resolve_output(args.out or Path(cfg.output_dir) / "train")
    res = run_train(cfg, out)
    print(f"model\t{res['model_path']}")
    print(f"train_cer\t{res['train_cer']:.6f}")
    print(f"test_cer\t{res['test_cer']:.6f}")


def _cmd_attack(args):
    cfg = load_config(args.config, args.overrides)
    if not Path(args.model).is_file():
        raise RunError(f"model file not found: {args.model}")
    out = resolve_output(args.out or Path(cfg.output_dir) / f"attack_{cfg.attack.method}_{cfg.attack.mode}")
    res = run_attack(cfg, args.model, out)
    print(f"run_dir\t{out}")
    print(f"images\t{res['n_images']}")
    print(f"success\t{res['success']}")


def _cmd_sweep(args):
    for path in run_sweep(args.run_dir):
        print(f"curve\t{path}")
    if args.verify:
        checks = verify_targeted(args.run_dir)
        bad = [i for i, ok in checks if not ok]
        print(f"verified\t{len(checks) - len(bad)}/{len(checks)}")
        if bad:
            raise RunError(f"converged perturbations that miss their target: {bad}")


def _cmd_report(args):
    res = run_report(args.curves, resolve_output(args.out), figure=not args.no_figure)
    sys.stdout.write(res["summary"])


COMMANDS = {"train": _cmd_train, "attack": _cmd_attack, "sweep": _cmd_sweep, "report": _cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sqat {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, FileNotFoundError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"sqat {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
