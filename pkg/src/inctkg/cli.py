"""Command-line entry point: snapshots, synth, train, grid, report."""
import argparse
import dataclasses
import json
import logging
import math
import os
import sys

from . import __version__
from .config import SECTIONS, grid_cells, load_config, load_grid, parse_assignments
from .data import parse_quadruple_file, write_bundle
from .exceptions import ConfigError, InctkgError
from .pipeline import run_grid, train_bundle, write_report
from .synth import generate, verify_tail, write_tsv

logger = logging.getLogger("inctkg")

_SKIP = {"enhancement", "sampler"}


def _add_section_flags(parser, section):
    group = parser.add_argument_group(f"[{section}] settings")
    for f in dataclasses.fields(SECTIONS[section]):
        if f.name in _SKIP:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, tuple):
            shown = ",".join("inf" if isinstance(v, float) and math.isinf(v) else str(v) for v in default)
        else:
            shown = default
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"{section}.{f.name}", metavar="VALUE",
                           default=None, help=f"(default: {shown})")


def _common(parser):
    parser.add_argument("--config", help="INI config file with [snapshot]/[run]/[enhancement]/[sampler]/[synth]")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")


def _resolve(args, sections):
    overrides = parse_assignments(args.set)
    for section in sections:
        for f in dataclasses.fields(SECTIONS[section]):
            value = getattr(args, f"{section}.{f.name}", None)
            if value is not None:
                overrides[f"{section}.{f.name}"] = value
    return load_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="inctkg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("snapshots", help="build a snapshot bundle from a raw quadruple TSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("input", help="TSV with subject, relation, object, date columns")
    p.add_argument("out", help="bundle directory to write")
    p.add_argument("--time-granularity", type=int, default=1,
                   help="divide integer timestamps by this (24 for hour-stamped ICEWS files)")
    _common(p)
    _add_section_flags(p, "snapshot")

    p = sub.add_parser("synth", help="generate a synthetic long-tail corpus as TSV")
    p.add_argument("out", help="TSV file to write")
    p.add_argument("--bundle", help="also build a snapshot bundle in this directory")
    _common(p)
    _add_section_flags(p, "synth")
    _add_section_flags(p, "snapshot")

    p = sub.add_parser("train", help="incremental training + evaluation over a bundle")
    p.add_argument("bundle", help="snapshot bundle directory")
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--no-checkpoints", action="store_true", help="skip writing checkpoint files")
    _common(p)
    for section in ("run", "enhancement", "sampler"):
        _add_section_flags(p, section)

    p = sub.add_parser("grid", help="select hyperparameters by average validation MRR")
    p.add_argument("bundle", help="snapshot bundle directory")
    p.add_argument("--preset", help="named grid (full: lam x mu x n_similar x alpha, 216 cells)")
    p.add_argument("--grid", dest="grid_file", help="INI file with a [grid] section of comma-separated values")
    p.add_argument("--out", help="directory for grid.tsv and best.ini")
    p.add_argument("--list", action="store_true", help="only print the cells, do not train")
    _common(p)
    for section in ("run", "enhancement", "sampler"):
        _add_section_flags(p, section)

    p = sub.add_parser("report", help="merge run directories into curve/bucket tables and a summary")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="directory for merged curve.csv, buckets.csv, summary.tsv")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def cmd_snapshots(args):
    cfg = _resolve(args, ["snapshot"])
    if not os.path.exists(args.input):
        raise FileNotFoundError(args.input)
    quads, vocab = parse_quadruple_file(args.input, time_granularity=args.time_granularity)
    bundle = write_bundle(args.out, quads, vocab, cfg.snapshot)
    print(json.dumps({k: bundle.meta[k] for k in ("n_snapshots", "n_entities", "n_relations", "n_quads")}))


def cmd_synth(args):
    cfg = _resolve(args, ["synth", "snapshot"])
    quads, vocab = generate(cfg.synth)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_tsv(args.out, quads, vocab)
    stats = verify_tail(quads)
    if args.bundle:
        bundle = write_bundle(args.bundle, quads, vocab, cfg.snapshot,
                              {"synth": dataclasses.asdict(cfg.synth)})
        stats["n_snapshots"] = bundle.meta["n_snapshots"]
    print(json.dumps(stats))


def cmd_train(args):
    cfg = _resolve(args, ["run", "enhancement", "sampler"])
    runner = train_bundle(args.bundle, cfg, args.out, save_checkpoints=not args.no_checkpoints)
    final = runner.reports[-1]["metrics"]["time_filtered"]
    print(json.dumps({"tasks": runner.t, "current_mrr": final["current"]["mrr"],
                      "average_mrr": final["average"]["mrr"]}))


def cmd_grid(args):
    cfg = _resolve(args, ["run", "enhancement", "sampler"])
    if (args.preset is None) == (args.grid_file is None):
        raise ConfigError("give exactly one of --preset or --grid")
    cells = grid_cells(load_grid(args.grid_file, args.preset))
    if args.list:
        for cell in cells:
            print(json.dumps(cell, sort_keys=True))
        print(f"{len(cells)} cells", file=sys.stderr)
        return

    def progress(i, cell, score):
        logger.info("cell %d/%d %s: validation MRR %.4f", i + 1, len(cells), cell, score)

    best, scored = run_grid(args.bundle, cfg, cells, progress)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        keys = sorted(cells[0])
        with open(os.path.join(args.out, "grid.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(keys + ["valid_mrr"]) + "\n")
            for cell, score in scored:
                fh.write("\t".join([str(cell[k]) for k in keys] + [repr(score)]) + "\n")
        with open(os.path.join(args.out, "best.ini"), "w", encoding="utf-8", newline="\n") as fh:
            cfg.with_overrides(best).to_ini().write(fh)
    print(json.dumps({"best": best, "valid_mrr": max(score for _, score in scored)}, sort_keys=True))


def cmd_report(args):
    summary = write_report(args.runs, args.out)
    for row in summary:
        print(f"{row['strategy']}\tseed={row['seed']}\tcurrent MRR {row['current_mrr']:.4f}"
              f"\taverage MRR {row['average_mrr']:.4f}")


COMMANDS = {"snapshots": cmd_snapshots, "synth": cmd_synth, "train": cmd_train, "grid": cmd_grid,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: no such file: {exc.filename or exc}", file=sys.stderr)
        return 3
    except InctkgError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
