"""Ranking evaluation: MRR / Hit@k, forgetting curves, inductive subsets, frequency buckets."""
import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .validation import check_quads

HITS_AT = (1, 3, 10)
METRIC_NAMES = ("mrr", "hits@1", "hits@3", "hits@10")
PROTOCOLS = ("time_filtered", "raw")
DEFAULT_BUCKETS = (0, 18, 48, math.inf)
CURVE_FIELDS = ("step", "eval_set", "metric", "value", "strategy", "seed")
BUCKET_FIELDS = ("bucket_lo", "bucket_hi", "metric", "value", "count", "strategy", "seed")


@dataclass
class RankResult:
    query: tuple
    rank: int
    filtered: bool


def with_inverses(quads, n_relations):
    """Append (o, r + n_relations, s, t) for every (s, r, o, t)."""
    quads = check_quads(quads)
    inv = quads[:, [2, 1, 0, 3]].copy()
    inv[:, 1] += n_relations
    return np.concatenate([quads, inv])


class KnownFacts:
    """Objects known to hold for each (subject, relation, time), used for time-aware filtering."""

    def __init__(self, quads=None):
        self._objects = defaultdict(set)
        if quads is not None:
            self.add(quads)

    def add(self, quads):
        for s, r, o, t in check_quads(quads).tolist():
            self._objects[(s, r, t)].add(o)
        return self

    def objects(self, s, r, t):
        return self._objects.get((s, r, t), ())

    def mask(self, queries, n_entities):
        """Boolean ``(B, n_entities)``: true for candidates to drop (other true objects)."""
        queries = np.asarray(queries)
        out = np.zeros((len(queries), n_entities), dtype=bool)
        for b, (s, r, o, t) in enumerate(queries.tolist()):
            objs = self._objects.get((s, r, t))
            if objs:
                out[b, [x for x in objs if x != o and x < n_entities]] = True
        return out


def ranks_from_scores(scores, targets, drop=None):
    """1 + #strictly higher + ceil(#ties / 2), ignoring dropped candidates."""
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    true = scores[np.arange(len(scores)), targets][:, None]
    higher = scores > true
    tied = scores == true
    if drop is not None:
        higher &= ~drop
        tied &= ~drop
    ties = tied.sum(axis=1) - 1
    return 1 + higher.sum(axis=1) + (ties + 1) // 2


def rank_query(scores, target, drop=None):
    return int(ranks_from_scores(np.asarray(scores)[None, :], [target],
                                 None if drop is None else np.asarray(drop)[None, :])[0])


def metrics(ranks):
    ranks = np.asarray([r.rank if isinstance(r, RankResult) else r for r in ranks], dtype=float)
    if ranks.size == 0:
        raise DataError("cannot compute metrics over zero ranks")
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    out["count"] = int(ranks.size)
    return out


def average_metrics(per_set):
    """Unweighted mean of metric dicts (one per test set)."""
    if not per_set:
        raise DataError("no test sets to average")
    out = {m: float(np.mean([d[m] for d in per_set])) for m in METRIC_NAMES}
    out["count"] = int(sum(d["count"] for d in per_set))
    return out


def forgetting_curve(matrix):
    """P_t = mean_{j<=t} p[t][j] for a lower-triangular matrix (list of rows or array)."""
    out = []
    for t, row in enumerate(matrix, start=1):
        vals = np.asarray(row, dtype=float)[:t]
        if len(vals) < t or np.any(np.isnan(vals)):
            raise DataError(f"row {t} of the performance matrix needs {t} entries")
        out.append(float(np.mean(vals)))
    return out


def inductive_mask(test, unseen, subject_only=False):
    test = check_quads(test)
    unseen = np.fromiter(unseen, dtype=np.int64)
    mask = np.isin(test[:, 0], unseen)
    if not subject_only:
        mask |= np.isin(test[:, 2], unseen)
    return mask


def inductive_subset(test, unseen, subject_only=False):
    test = check_quads(test)
    return test[inductive_mask(test, unseen, subject_only)]


def bucket_of(freqs, boundaries=DEFAULT_BUCKETS):
    edges = np.asarray(boundaries[1:-1], dtype=float)
    return np.searchsorted(edges, np.asarray(freqs, dtype=float), side="right")


def bucketize(freqs, ranks, boundaries=DEFAULT_BUCKETS):
    """Per-bucket metrics; bucket i is [boundaries[i], boundaries[i+1])."""
    freqs = np.asarray(freqs)
    ranks = np.asarray(ranks)
    which = bucket_of(freqs, boundaries)
    out = []
    for i in range(len(boundaries) - 1):
        sel = ranks[which == i]
        row = {"bucket_lo": boundaries[i], "bucket_hi": boundaries[i + 1], "count": int(sel.size)}
        if sel.size:
            row.update({k: v for k, v in metrics(sel).items() if k != "count"})
        else:
            row.update({m: None for m in METRIC_NAMES})
        out.append(row)
    return out


# -- report files --------------------------------------------------------------

def _check_nonempty(obj, what):
    if not obj:
        raise DataError(f"refusing to write an empty {what}")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_metrics(path, task_metrics):
    """``task_metrics``: {"metrics": {protocol: {eval_set: {metric: value}}}, ...}."""
    _check_nonempty(task_metrics.get("metrics"), "metrics report")
    write_json(path, task_metrics)


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def _write_rows(path, fields, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])


def emit_curve(path, rows):
    _check_nonempty(rows, "curve table")
    _write_rows(path, CURVE_FIELDS, rows)


def emit_buckets(path, rows):
    _check_nonempty(rows, "bucket table")
    _write_rows(path, BUCKET_FIELDS, rows)


def _parse(v):
    if v == "inf":
        return math.inf
    if v == "None":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_table(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def curve_rows(matrices, strategy, seed):
    """Long-format rows from {metric: lower-triangular matrix} for one run."""
    rows = []
    for metric, mat in matrices.items():
        curve = forgetting_curve(mat)
        for t, row in enumerate(mat, start=1):
            for j in range(t):
                rows.append({"step": t, "eval_set": f"test_{j + 1}", "metric": metric,
                             "value": float(row[j]), "strategy": strategy, "seed": seed})
            rows.append({"step": t, "eval_set": "P", "metric": metric, "value": curve[t - 1],
                         "strategy": strategy, "seed": seed})
    return rows


def bucket_rows(buckets, strategy, seed):
    rows = []
    for b in buckets:
        for m in METRIC_NAMES:
            if b[m] is None:
                continue
            rows.append({"bucket_lo": b["bucket_lo"], "bucket_hi": b["bucket_hi"], "metric": m,
                         "value": b[m], "count": b["count"], "strategy": strategy, "seed": seed})
    return rows


def emit_report(out_dir, report):
    """Write ``metrics.json``, ``curve.csv`` and ``buckets.csv`` for a report dict.

    ``report`` keys: ``metrics`` (nested dict), ``curve`` (rows), ``buckets`` (rows).
    """
    os.makedirs(out_dir, exist_ok=True)
    emit_metrics(os.path.join(out_dir, "metrics.json"), {"metrics": report["metrics"]})
    emit_curve(os.path.join(out_dir, "curve.csv"), report["curve"])
    emit_buckets(os.path.join(out_dir, "buckets.csv"), report["buckets"])


def read_report(out_dir):
    return {
        "metrics": read_metrics(os.path.join(out_dir, "metrics.json"))["metrics"],
        "curve": read_table(os.path.join(out_dir, "curve.csv")),
        "buckets": read_table(os.path.join(out_dir, "buckets.csv")),
    }
