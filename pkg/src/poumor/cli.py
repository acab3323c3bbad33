"""``poumor`` command line: gen-data, train, eval, rollout, extend.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 IO/format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fieldio, pipeline
from .diffcore import DTypeError, ShapeError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", "-c", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable; wins over the file)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poumor", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset directory")
    _common(p)
    p.add_argument("out", help="dataset directory")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("dataset")
    p.add_argument("out", help="run directory (checkpoint.pouf, metrics.csv)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="val")
    p.add_argument("--gates", help="write gate weights to this POUF file")
    p.add_argument("--out", help="write metrics JSON here as well as to stdout")

    p = sub.add_parser("rollout", help="autoregressive rollout from an initial field")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("ic", help="POUF file holding the initial field (n.. or n.., m)")
    p.add_argument("out")
    p.add_argument("--steps", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ood-ic", help="second initial field to compare predicted sigma against")

    p = sub.add_parser("extend", help="smooth periodic extension of a field known on a mask")
    p.add_argument("field", help="POUF file with the field on the full grid")
    p.add_argument("mask", help="POUF file with the u8 domain indicator")
    p.add_argument("out")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--length", type=float, action="append",
                   help="period per axis (default 2pi; repeat per axis)")

    sub.add_parser("config-reference", help="print every config key and default")
    return ap


def _load_cfg(args):
    return cfgmod.load(args.config, args.set)


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    manifest = pipeline.generate_dataset(cfg, args.out)
    summary = {s: {"count": v["count"], "seeds": [v["seeds"][0], v["seeds"][-1]]}
               for s, v in manifest["splits"].items()}
    print(json.dumps({"kind": manifest["kind"], "splits": summary}))


def cmd_train(args):
    cfg = _load_cfg(args)
    res = pipeline.run_training(cfg, args.dataset, args.out, resume=args.resume)
    print(json.dumps(res, default=float))


def cmd_eval(args):
    res = pipeline.evaluate_checkpoint(args.checkpoint, args.dataset, args.split, args.gates)
    text = json.dumps(res, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_rollout(args):
    cfg = _load_cfg(args)
    r = cfg["rollout"]
    steps = args.steps or r["steps"]
    samples = args.samples or r["samples"]
    seed = r["seed"] if args.seed is None else args.seed
    ic = fieldio.read(args.ic)
    ood = fieldio.read(args.ood_ic) if args.ood_ic else None
    report = pipeline.run_rollout(args.checkpoint, ic, steps, samples, seed, args.out, ood)
    print(json.dumps({k: v if not isinstance(v, dict) else v["mean_sigma"] for k, v in report.items()}))


def cmd_extend(args):
    values = fieldio.read(args.field)
    mask = fieldio.read(args.mask)
    if isinstance(values, dict) or isinstance(mask, dict):
        raise fieldio.FormatError("extend expects plain tensors, not tables")
    diag = pipeline.run_extension(values, mask, args.tol, args.out, tuple(args.length or ()))
    print(json.dumps(diag))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "rollout": cmd_rollout, "extend": cmd_extend,
            "config-reference": lambda a: print(cfgmod.reference())}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_VALIDATION if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except fieldio.FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as e:
        # ExtensionError and friends
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, ShapeError, DTypeError, KeyError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
