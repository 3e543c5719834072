"""Temporal KG data model: quadruples, vocabularies, snapshots and splits.

Quadruple collections are ``(N, 4)`` int64 arrays with columns
(subject, relation, object, time); time is an integer day index.
"""
import datetime
import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, DataError, ParseError
from .validation import check_fraction, check_positive_int, check_quads

SUBJECT, RELATION, OBJECT, TIME = range(4)


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


@dataclass
class Vocabulary:
    """Bijective label <-> dense id maps for entities and relations."""

    entities: list = field(default_factory=list)
    relations: list = field(default_factory=list)

    def __post_init__(self):
        self._entity_ids = {label: i for i, label in enumerate(self.entities)}
        self._relation_ids = {label: i for i, label in enumerate(self.relations)}
        if len(self._entity_ids) != len(self.entities) or len(self._relation_ids) != len(self.relations):
            raise DataError("vocabulary labels must be unique")

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    def entity_id(self, label, add=True):
        idx = self._entity_ids.get(label)
        if idx is None:
            if not add:
                raise KeyError(label)
            idx = self._entity_ids[label] = len(self.entities)
            self.entities.append(label)
        return idx

    def relation_id(self, label, add=True):
        idx = self._relation_ids.get(label)
        if idx is None:
            if not add:
                raise KeyError(label)
            idx = self._relation_ids[label] = len(self.relations)
            self.relations.append(label)
        return idx


@dataclass(frozen=True)
class SnapshotConfig:
    initial_fraction: float = 0.5
    window_days: int = 7
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        check_fraction(self.initial_fraction, "initial_fraction", low_open=True, high_open=True)
        check_positive_int(self.window_days, "window_days")
        _check_split_fractions(self.split_fractions)


@dataclass
class Snapshot:
    index: int
    quads: np.ndarray
    interval: tuple  # half-open [start, end)

    @property
    def entities(self):
        return set(np.unique(self.quads[:, [SUBJECT, OBJECT]]).tolist())

    @property
    def relations(self):
        return set(np.unique(self.quads[:, RELATION]).tolist())

    @property
    def timestamps(self):
        return np.unique(self.quads[:, TIME])


@dataclass
class TaskSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def all_quads(self):
        return np.concatenate([self.train, self.valid, self.test])


def _check_split_fractions(fractions):
    if len(fractions) != 3:
        raise ConfigError(f"split fractions must be (train, valid, test), got {fractions!r}")
    for name, f in zip(("train", "valid", "test"), fractions):
        check_fraction(f, f"{name} fraction", low_open=True, high_open=True)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")


def _parse_date(text):
    text = text.strip()
    try:
        return int(text), "int"
    except ValueError:
        pass
    return datetime.date.fromisoformat(text).toordinal(), "iso"


def parse_quadruple_file(path, vocab=None, time_granularity=1, rebase_time=True):
    """Read a tab-separated quadruple file.

    Each line holds ``subject, relation, object, date`` with optional extra
    columns ignored. Dates are ISO ``YYYY-MM-DD`` or integers; integers are
    divided by ``time_granularity`` (e.g. 24 for hour-stamped ICEWS dumps).
    Unless ``rebase_time`` is false, times become day offsets from the
    earliest date in the file.

    Returns ``(quads, vocab)`` with quads sorted by time (stable).
    """
    if vocab is None:
        vocab = Vocabulary()
    rows = []
    kind = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise ParseError(f"expected at least 4 tab-separated fields, got {len(parts)}", lineno, path)
            s, r, o, d = (p.strip() for p in parts[:4])
            if not s or not r or not o:
                raise ParseError("empty subject, relation or object label", lineno, path)
            try:
                day, this_kind = _parse_date(d)
            except ValueError:
                raise ParseError(f"unparseable date {d!r}", lineno, path) from None
            if kind is None:
                kind = this_kind
            elif kind != this_kind:
                raise ParseError("mixed ISO and integer dates in one file", lineno, path)
            if this_kind == "int":
                if day < 0:
                    raise ParseError(f"negative time {day}", lineno, path)
                day //= time_granularity
            rows.append((vocab.entity_id(s), vocab.relation_id(r), vocab.entity_id(o), day))
    if not rows:
        raise DataError(f"{path}: no quadruples found")
    quads = np.array(rows, dtype=np.int64)
    if rebase_time:
        quads[:, TIME] -= quads[:, TIME].min()
    order = np.argsort(quads[:, TIME], kind="stable")
    return quads[order], vocab


def build_snapshots(quads, cfg):
    """Partition time-sorted quads into an initial snapshot plus fixed windows.

    The first snapshot takes the first ``ceil(initial_fraction * m)`` of the
    ``m`` distinct timestamps; the rest is cut into consecutive windows of
    ``window_days`` distinct timestamps.
    """
    quads = check_quads(quads)
    times = quads[:, TIME]
    if np.any(np.diff(times) < 0):
        raise DataError("quadruples must be sorted by time")
    days = np.unique(times)
    m = len(days)
    if m < 2:
        raise DataError("need at least 2 distinct timestamps to build snapshots")
    n_initial = math.ceil(cfg.initial_fraction * m - 1e-12)
    if n_initial >= m:
        raise DataError(f"initial snapshot covers all {m} timestamps; no incremental snapshots remain")
    groups = [days[:n_initial]]
    for start in range(n_initial, m, cfg.window_days):
        groups.append(days[start:start + cfg.window_days])
    starts = [int(g[0]) for g in groups]
    ends = starts[1:] + [int(days[-1]) + 1]
    snapshots = []
    for t, (lo, hi) in enumerate(zip(starts, ends), start=1):
        a, b = np.searchsorted(times, [lo, hi], side="left")
        snapshots.append(Snapshot(t, quads[a:b], (lo, hi)))
    return snapshots


def split_snapshot(snapshot, fractions=(0.8, 0.1, 0.1)):
    """Split a snapshot into train/valid/test by whole timestamps (extrapolation)."""
    _check_split_fractions(fractions)
    quads = snapshot.quads
    days = np.unique(quads[:, TIME])
    m = len(days)
    if m < 3:
        raise DataError(f"snapshot {snapshot.index} has {m} distinct timestamps; need at least 3 to split")
    n_train = max(1, int(math.floor(fractions[0] * m + 0.5)))
    n_valid = max(1, int(math.floor(fractions[1] * m + 0.5)))
    while n_train + n_valid > m - 1:
        if n_train > 1:
            n_train -= 1
        else:
            n_valid -= 1
    valid_start, test_start = days[n_train], days[n_train + n_valid]
    times = quads[:, TIME]
    return TaskSplit(
        train=quads[times < valid_start],
        valid=quads[(times >= valid_start) & (times < test_start)],
        test=quads[times >= test_start],
    )


class FrequencyTracker:
    """Cumulative per-entity occurrence and degree counts over a quad stream.

    Observing the same quads twice counts them twice. Self-loops add 2 to the
    entity's frequency. Degree is the number of distinct neighbours.
    """

    def __init__(self, n_entities=0):
        self.counts = np.zeros(n_entities, dtype=np.int64)
        self.degrees = np.zeros(n_entities, dtype=np.int64)
        self._edges = set()

    def _grow(self, size):
        if size > len(self.counts):
            pad = size - len(self.counts)
            self.counts = np.concatenate([self.counts, np.zeros(pad, dtype=np.int64)])
            self.degrees = np.concatenate([self.degrees, np.zeros(pad, dtype=np.int64)])

    def observe(self, quads):
        quads = check_quads(quads)
        if not len(quads):
            return self
        s, o = quads[:, SUBJECT], quads[:, OBJECT]
        self._grow(int(max(s.max(), o.max())) + 1)
        self.counts += np.bincount(s, minlength=len(self.counts))
        self.counts += np.bincount(o, minlength=len(self.counts))
        for a, b in zip(np.minimum(s, o).tolist(), np.maximum(s, o).tolist()):
            if (a, b) not in self._edges:
                self._edges.add((a, b))
                self.degrees[a] += 1
                if a != b:
                    self.degrees[b] += 1
        return self

    def freq(self, entities):
        entities = np.asarray(entities, dtype=np.int64)
        out = np.zeros(entities.shape, dtype=np.int64)
        known = entities < len(self.counts)
        out[known] = self.counts[entities[known]]
        return out if out.ndim else int(out)

    def degree(self, entities):
        entities = np.asarray(entities, dtype=np.int64)
        out = np.zeros(entities.shape, dtype=np.int64)
        known = entities < len(self.degrees)
        out[known] = self.degrees[entities[known]]
        return out if out.ndim else int(out)

    def copy(self):
        new = FrequencyTracker()
        new.counts = self.counts.copy()
        new.degrees = self.degrees.copy()
        new._edges = set(self._edges)
        return new


def unseen_entities(history, current_train, n_entities):
    """Entities in ``range(n_entities)`` absent from prior snapshots and the current train split.

    ``history`` is an iterable of snapshots (or quad arrays) for earlier tasks.
    """
    seen = np.zeros(n_entities, dtype=bool)
    sources = [h.quads if isinstance(h, Snapshot) else h for h in history] + [current_train]
    for q in sources:
        q = check_quads(q)
        seen[q[:, SUBJECT]] = True
        seen[q[:, OBJECT]] = True
    return set(np.flatnonzero(~seen).tolist())


# -- snapshot bundles ---------------------------------------------------------

@dataclass
class Bundle:
    vocab: Vocabulary
    tasks: list
    meta: dict

    @property
    def n_entities(self):
        return self.vocab.n_entities

    @property
    def n_relations(self):
        return self.vocab.n_relations


def make_tasks(quads, cfg):
    return [split_snapshot(s, cfg.split_fractions) for s in build_snapshots(quads, cfg)]


def _write_tsv(path, quads, vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o, t in quads.tolist():
            fh.write(f"{vocab.entities[s]}\t{vocab.relations[r]}\t{vocab.entities[o]}\t{t}\n")


def write_bundle(out_dir, quads, vocab, cfg, extra_meta=None):
    """Build snapshots from ``quads`` and write them as a bundle directory."""
    snapshots = build_snapshots(quads, cfg)
    tasks = [split_snapshot(s, cfg.split_fractions) for s in snapshots]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "entities.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{label}\n" for label in vocab.entities)
    with open(os.path.join(out_dir, "relations.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{label}\n" for label in vocab.relations)
    snap_meta = []
    for snap, task in zip(snapshots, tasks):
        sub = os.path.join(out_dir, f"snapshot_{snap.index}")
        os.makedirs(sub, exist_ok=True)
        for name in ("train", "valid", "test"):
            _write_tsv(os.path.join(sub, f"{name}.tsv"), getattr(task, name), vocab)
        snap_meta.append({
            "index": snap.index,
            "interval": list(snap.interval),
            "n_quads": int(len(snap.quads)),
            "n_train": int(len(task.train)),
            "n_valid": int(len(task.valid)),
            "n_test": int(len(task.test)),
            "n_entities": len(snap.entities),
            "n_relations": len(snap.relations),
        })
    meta = {
        "format": "inctkg-bundle/1",
        "n_snapshots": len(snapshots),
        "n_entities": vocab.n_entities,
        "n_relations": vocab.n_relations,
        "n_quads": int(len(quads)),
        "config": {
            "initial_fraction": cfg.initial_fraction,
            "window_days": cfg.window_days,
            "split_fractions": list(cfg.split_fractions),
        },
        "snapshots": snap_meta,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Bundle(vocab, tasks, meta)


def read_bundle(bundle_dir):
    meta_path = os.path.join(bundle_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{bundle_dir}: not a snapshot bundle (meta.json missing)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(os.path.join(bundle_dir, "entities.txt"), encoding="utf-8") as fh:
        entities = [line.rstrip("\n") for line in fh]
    with open(os.path.join(bundle_dir, "relations.txt"), encoding="utf-8") as fh:
        relations = [line.rstrip("\n") for line in fh]
    vocab = Vocabulary(entities, relations)
    n_e, n_r = vocab.n_entities, vocab.n_relations
    tasks = []
    for t in range(1, meta["n_snapshots"] + 1):
        parts = {}
        for name in ("train", "valid", "test"):
            path = os.path.join(bundle_dir, f"snapshot_{t}", f"{name}.tsv")
            q, _ = parse_quadruple_file(path, vocab, rebase_time=False)
            parts[name] = q
        tasks.append(TaskSplit(**parts))
    if vocab.n_entities != n_e or vocab.n_relations != n_r:
        raise DataError(f"{bundle_dir}: split files reference labels missing from the vocabulary")
    return Bundle(vocab, tasks, meta)
