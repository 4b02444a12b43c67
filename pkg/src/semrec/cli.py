"""Command-line entry point: ``semrec <stage> --config cfg.yaml``."""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from pathlib import Path

import yaml

from . import pipeline as P
from .autodiff import ConfigError, TrainingDiverged
from .config import load_config, nested, parse_override
from .data import DataError
from .quantizer import ReallocationError, TokenParseError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2, 3
LOG_ENV = "SEMREC_LOG"

log = logging.getLogger("semrec")


def _merge(a, b):
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            _merge(a[k], v)
        else:
            a[k] = v
    return a


def build_config(args, extra=None):
    over = {}
    for text in args.set or []:
        _merge(over, parse_override(text))
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if args.preset is not None:
        over["preset"] = args.preset
    _merge(over, extra or {})
    return load_config(args.config, over)


def _parse_grid(items):
    """``key=v1,v2`` entries or a YAML file mapping keys to value lists."""
    grid = {}
    for item in items:
        if "=" in item:
            key, _, raw = item.partition("=")
            grid[key] = [yaml.safe_load(v) for v in raw.split(",")]
        else:
            loaded = yaml.safe_load(Path(item).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{item}: grid file must map keys to lists")
            grid.update({k: list(v) for k, v in loaded.items()})
    if not grid:
        raise ConfigError("sweep needs at least one --grid entry")
    return grid


def cmd_sweep(args):
    grid = _parse_grid(args.grid)
    base = build_config(args)
    keys = sorted(grid)
    rows = []
    fields = None
    for n, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        over = {}
        for k, v in zip(keys, values):
            _merge(over, nested(k, v))
        over["out_dir"] = str(Path(base.out_dir) / f"cell_{n:03d}")
        row = dict(zip(keys, values))
        try:
            cfg = build_config(args, over)
            report = P.run_all(cfg)
            row.update(report.model)
            row["status"] = "ok"
        except Exception as exc:  # a failed cell is recorded, the sweep goes on
            log.error("sweep cell %d failed: %s", n, exc)
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        rows.append(row)
        fields = fields or list(row)
        for k in row:
            if k not in fields:
                fields.insert(len(fields) - 1, k)
    dest = Path(args.csv or Path(base.out_dir) / "sweep.csv")
    dest.parent.mkdir(parents=True, exist_ok=True)
    with dest.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {dest}")


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--preset", choices=["desk", "full"], help="default hyperparameter set")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. seqmodel.n_layers=2 (repeatable)")
    parser = argparse.ArgumentParser(prog="semrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("synth", "generate a synthetic dataset"),
                       ("inject", "train the gated fusion encoder"),
                       ("quantize", "train the residual quantizer and assign semantic ids"),
                       ("pretrain", "masked pretraining on source corpora"),
                       ("finetune", "masked finetuning on the target domain"),
                       ("eval", "leave-one-out ranking metrics"),
                       ("run", "every stage in order")]:
        sub.add_parser(name, parents=[common], help=text)
    exp = sub.add_parser("export-tokens", parents=[common], help="write item_id<TAB>token-string lines")
    exp.add_argument("--dest", help="output path (default <out>/tokens.tsv)")
    sw = sub.add_parser("sweep", parents=[common], help="grid of full runs, one CSV row each")
    sw.add_argument("--grid", action="append", required=True,
                    help="key=v1,v2 or a YAML file of key: [values] (repeatable)")
    sw.add_argument("--csv", help="output CSV (default <out>/sweep.csv)")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            cmd_sweep(args)
            return EXIT_OK
        cfg = build_config(args)
        if args.command == "run":
            P.run_all(cfg)
        elif args.command == "export-tokens":
            print(P.export_tokens(P.Run(cfg), args.dest))
        else:
            P.STAGE_FUNCS[args.command](P.Run(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except P.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, TokenParseError, ReallocationError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
