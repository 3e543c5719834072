"""Run directories: training a bundle end to end, grid selection and report merging."""
import hashlib
import logging
import math
import os
from dataclasses import replace

import numpy as np

from . import __version__
from .continual import IncrementalRunner, incremental_run
from .data import read_bundle
from .evaluation import (METRIC_NAMES, bucket_rows, curve_rows, emit_buckets, emit_curve, emit_metrics,
                         forgetting_curve, read_metrics, read_table, write_json)
from .exceptions import DataError
from .model import save_checkpoint

logger = logging.getLogger(__name__)


def bundle_hash(bundle_dir):
    """SHA-256 over the bundle's files (relative path + bytes, sorted)."""
    h = hashlib.sha256()
    paths = []
    for root, _, files in os.walk(bundle_dir):
        paths += [os.path.join(root, f) for f in files]
    for path in sorted(paths, key=lambda p: os.path.relpath(p, bundle_dir)):
        h.update(os.path.relpath(path, bundle_dir).replace(os.sep, "/").encode())
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_checkpoint(path, ckpt, runner):
    arrays = dict(ckpt.index.to_arrays())
    for name, acc in ckpt.optimizer.acc.items():
        arrays[f"adagrad/{name}"] = acc
    header = {"tag": ckpt.tag, "task": ckpt.task, "strategy": runner.cfg.strategy,
              "lr": ckpt.optimizer.lr, "weight_decay": ckpt.optimizer.weight_decay}
    save_checkpoint(path, ckpt.params, header, arrays)


def train_bundle(bundle_dir, cfg, out_dir, save_checkpoints=True):
    """Incremental run over a bundle, writing the full run directory. Returns the RunResult."""
    bundle = read_bundle(bundle_dir)
    os.makedirs(out_dir, exist_ok=True)
    run_meta = {
        "package_version": __version__,
        "bundle": os.path.abspath(bundle_dir),
        "bundle_sha256": bundle_hash(bundle_dir),
        "n_tasks": len(bundle.tasks),
        "n_entities": bundle.n_entities,
        "n_relations": bundle.n_relations,
        "strategy": cfg.run.strategy,
        "seed": cfg.run.seed,
        "config": cfg.to_dict(),
        "notes": {
            "inverse_relations": "relation table holds 2x relations; (o, r^-1, s, t) added for every quad",
            "init": "uniform(-0.5/sqrt(d), 0.5/sqrt(d)) per row, seeded by (seed, table, row)",
            "eval_checkpoint": "all metrics come from the eval checkpoint (after train split only)",
        },
    }
    write_json(os.path.join(out_dir, "run.json"), run_meta)

    runner = IncrementalRunner(cfg.run, bundle.n_entities, bundle.n_relations)
    for task in bundle.tasks:
        pair, report = runner.step(task)
        task_dir = os.path.join(out_dir, f"task_{runner.t}")
        os.makedirs(task_dir, exist_ok=True)
        if save_checkpoints:
            _write_checkpoint(os.path.join(task_dir, "checkpoint.eval"), pair.eval, runner)
            _write_checkpoint(os.path.join(task_dir, "checkpoint.carry"), pair.carry, runner)
        emit_metrics(os.path.join(task_dir, "metrics.json"), _json_safe(report))
        current = report["metrics"]["time_filtered"]["current"]["mrr"]
        average = report["metrics"]["time_filtered"]["average"]["mrr"]
        logger.info("task %d/%d: current MRR %.4f, average MRR %.4f", runner.t, len(bundle.tasks), current, average)

    strategy, seed = cfg.run.strategy, cfg.run.seed
    emit_curve(os.path.join(out_dir, "curve.csv"), curve_rows(runner.matrices, strategy, seed))
    emit_buckets(os.path.join(out_dir, "buckets.csv"), bucket_rows(runner.reports[-1]["buckets"], strategy, seed))
    return runner


def validation_score(bundle, run_cfg):
    """Mean over steps of the average validation MRR (never touches test splits)."""
    cfg = replace(run_cfg, eval_split="valid")
    result = incremental_run(bundle.tasks, cfg, bundle.n_entities, bundle.n_relations)
    return float(np.mean(forgetting_curve(result.matrices["mrr"])))


def run_grid(bundle_dir, cfg, cells, progress=None):
    """Score each override cell on validation data; returns (best_cell, [(cell, score), ...])."""
    bundle = read_bundle(bundle_dir)
    scored = []
    for i, cell in enumerate(cells):
        cell_cfg = cfg.with_overrides(cell)
        score = validation_score(bundle, cell_cfg.run)
        scored.append((cell, score))
        if progress:
            progress(i, cell, score)
    best = max(range(len(scored)), key=lambda i: (scored[i][1], -i))
    return scored[best][0], scored


def load_run(run_dir):
    meta_path = os.path.join(run_dir, "run.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{run_dir}: not a run directory (run.json missing)")
    meta = read_metrics(meta_path)
    tasks = []
    for t in range(1, meta["n_tasks"] + 1):
        tasks.append(read_metrics(os.path.join(run_dir, f"task_{t}", "metrics.json")))
    return meta, tasks


def summarize(run_dirs):
    """Merge curve/bucket tables of several runs and build a summary table of final-step metrics."""
    if not run_dirs:
        raise DataError("no run directories given")
    curves, buckets, summary = [], [], []
    bundle_sha = None
    for run_dir in run_dirs:
        meta, tasks = load_run(run_dir)
        if bundle_sha is None:
            bundle_sha = meta["bundle_sha256"]
        elif meta["bundle_sha256"] != bundle_sha:
            raise DataError(f"{run_dir} was trained on a different bundle than {run_dirs[0]}")
        curves += read_table(os.path.join(run_dir, "curve.csv"))
        buckets += read_table(os.path.join(run_dir, "buckets.csv"))
        final = tasks[-1]["metrics"]["time_filtered"]
        row = {"run": run_dir, "strategy": meta["strategy"], "seed": meta["seed"]}
        for agg in ("current", "average"):
            for m in METRIC_NAMES:
                row[f"{agg}_{m}"] = final[agg][m]
        summary.append(row)
    return curves, buckets, summary


def write_report(run_dirs, out_dir):
    curves, buckets, summary = summarize(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    emit_curve(os.path.join(out_dir, "curve.csv"), curves)
    emit_buckets(os.path.join(out_dir, "buckets.csv"), buckets)
    fields = list(summary[0])
    with open(os.path.join(out_dir, "summary.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(fields) + "\n")
        for row in summary:
            fh.write("\t".join(f"{row[f]:.4f}" if isinstance(row[f], float) else str(row[f]) for f in fields) + "\n")
    return summary
