"""Relation-based similarity enhancement of subject embeddings.

For a query (s, r, ?, t) the enhanced subject embedding is

    e_s = lam * f(s) + phi(deg(s)) * (1 - lam) * g(s, r, t)

where f(s) is the base entity row and g is the recency-weighted mean of the
embeddings of the most recent subjects of relation r seen strictly before t,
with weights 1 / (1 + exp(mu * (t - t_i))).
"""
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError
from .validation import check_choice, check_fraction, check_non_negative, check_positive_int

DECAY_MODES = ("inverse-log", "inverse-linear", "constant-one")


@dataclass(frozen=True)
class EnhancementConfig:
    lam: float = 0.5
    mu: float = 0.1
    n_similar: int = 20
    decay: str = "inverse-log"
    stop_gradient: bool = False
    exclude_self: bool = False

    def __post_init__(self):
        check_fraction(self.lam, "lam")
        check_non_negative(self.mu, "mu")
        check_positive_int(self.n_similar, "n_similar")
        check_choice(self.decay, "decay", DECAY_MODES)


class SimilarityIndex:
    """Per-relation bounded history of (subject, time) events.

    Each relation keeps the ``n`` most recent events strictly older than its
    latest timestamp, plus up to ``n`` events at that latest timestamp. That is
    exactly what is needed to answer "the n most recent events strictly before
    t" for any t at or after the latest recorded time, in O(n) memory per
    relation.
    """

    def __init__(self, n):
        self.n = check_positive_int(n, "n")
        self._older = {}
        self._latest = {}
        self._latest_time = {}
        self.last_time = None

    def _buffers(self, r):
        if r not in self._older:
            self._older[r] = deque(maxlen=self.n)
            self._latest[r] = deque(maxlen=self.n)
            self._latest_time[r] = None
        return self._older[r], self._latest[r]

    def record(self, quad):
        s, r, _, t = (int(x) for x in quad[:4])
        if self.last_time is not None and t < self.last_time:
            raise DataError(f"time regression in similarity stream: {t} after {self.last_time}")
        self.last_time = t
        older, latest = self._buffers(r)
        if self._latest_time[r] is not None and t > self._latest_time[r]:
            older.extend(latest)
            latest.clear()
        self._latest_time[r] = t
        latest.append((s, t))

    def record_many(self, quads):
        for q in np.asarray(quads).tolist():
            self.record(q)

    def buffer(self, r):
        """The ``n`` most recent events of relation ``r``, oldest first."""
        if r not in self._older:
            return []
        events = list(self._older[r]) + list(self._latest[r])
        return events[-self.n:]

    def query(self, r, t, exclude=None):
        """The ``n`` most recent events of ``r`` with time strictly before ``t``, minus ``exclude``'s own."""
        if r not in self._older:
            return []
        events = list(self._older[r]) + list(self._latest[r])
        events = [e for e in events if e[1] < t][-self.n:]
        return [e for e in events if e[0] != exclude]

    def relations(self):
        return sorted(self._older)

    def copy(self):
        new = SimilarityIndex(self.n)
        for r in self._older:
            new._older[r] = deque(self._older[r], maxlen=self.n)
            new._latest[r] = deque(self._latest[r], maxlen=self.n)
            new._latest_time[r] = self._latest_time[r]
        new.last_time = self.last_time
        return new

    def to_arrays(self):
        """Flatten into int64 arrays for checkpointing."""
        rows = []
        for r in sorted(self._older):
            rows += [(r, s, t, 0) for s, t in self._older[r]]
            rows += [(r, s, t, 1) for s, t in self._latest[r]]
        events = np.array(rows, dtype=np.int64).reshape(-1, 4)
        rels = sorted(self._older)
        latest = np.array([[r, -1 if self._latest_time[r] is None else self._latest_time[r]] for r in rels],
                          dtype=np.int64).reshape(-1, 2)
        info = np.array([self.n, -1 if self.last_time is None else self.last_time], dtype=np.int64)
        return {"index_events": events, "index_latest": latest, "index_info": info}

    @classmethod
    def from_arrays(cls, arrays):
        n, last = arrays["index_info"].tolist()
        new = cls(n)
        new.last_time = None if last < 0 else last
        for r, lt in arrays["index_latest"].tolist():
            new._buffers(r)
            new._latest_time[r] = None if lt < 0 else lt
        for r, s, t, tier in arrays["index_events"].tolist():
            (new._latest if tier else new._older)[r].append((s, t))
        return new

    def __eq__(self, other):
        if not isinstance(other, SimilarityIndex):
            return NotImplemented
        a, b = self.to_arrays(), other.to_arrays()
        return all(np.array_equal(a[k], b[k]) for k in a)


def recency_weight(mu, t, t_i):
    return 1.0 / (1.0 + math.exp(mu * (t - t_i)))


def normalized_recency_weights(mu, t, times):
    """Recency weights divided by their sum, computed in log space so large gaps do not underflow."""
    gaps = t - np.asarray(times, dtype=float)
    logw = -np.logaddexp(0.0, mu * gaps)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def degree_decay(degree, mode="inverse-log"):
    degree = np.asarray(degree, dtype=float)
    if mode == "inverse-log":
        out = 1.0 / (1.0 + np.log1p(degree))
    elif mode == "inverse-linear":
        out = 1.0 / (1.0 + degree)
    elif mode == "constant-one":
        out = np.ones_like(degree)
    else:
        raise ConfigError(f"unknown degree decay {mode!r}; choose from {DECAY_MODES}")
    return out if out.ndim else float(out)


def combine(f_s, g_s, degree, cfg):
    f_s, g_s = np.asarray(f_s, dtype=float), np.asarray(g_s, dtype=float)
    if f_s.shape != g_s.shape:
        raise DataError(f"dimension mismatch: {f_s.shape} vs {g_s.shape}")
    if cfg.lam == 1.0:
        return f_s.copy()
    return cfg.lam * f_s + degree_decay(degree, cfg.decay) * (1.0 - cfg.lam) * g_s


def enhance(index, params, query, cfg):
    """g(s, r, t): recency-weighted mean of similar subjects' embeddings, or f(s) if there are none."""
    s, r, t = (int(x) for x in query[:3])
    if not 0 <= r < params.relation.shape[0]:
        raise DataError(f"relation id {r} out of range")
    events = index.query(r, t, exclude=s if cfg.exclude_self else None)
    if not events:
        return params.entity[s].copy()
    ids = np.array([e[0] for e in events])
    w = normalized_recency_weights(cfg.mu, t, [e[1] for e in events])
    return w @ params.entity[ids]


@dataclass
class NeighborSet:
    """Padded similar-subject sets for a batch of queries.

    ``ids`` is ``(M, n)`` (padding id 0), ``weights`` the normalized recency
    weights (0 on padding) and ``has`` marks queries with a non-empty set.
    """

    ids: np.ndarray
    weights: np.ndarray
    has: np.ndarray

    def __len__(self):
        return len(self.has)

    def take(self, rows):
        return NeighborSet(self.ids[rows], self.weights[rows], self.has[rows])

    @classmethod
    def empty(cls, m, n):
        return cls(np.zeros((m, n), dtype=np.int64), np.zeros((m, n)), np.zeros(m, dtype=bool))

    @classmethod
    def concatenate(cls, parts):
        return cls(np.concatenate([p.ids for p in parts]), np.concatenate([p.weights for p in parts]),
                   np.concatenate([p.has for p in parts]))


def _fill(nbrs, i, events, mu, t):
    if events:
        k = len(events)
        nbrs.ids[i, :k] = [e[0] for e in events]
        nbrs.weights[i, :k] = normalized_recency_weights(mu, t, [e[1] for e in events])
        nbrs.has[i] = True


def gather_neighbors(index, queries, cfg):
    """Look up similar subjects for each (s, r, ?, t) query against a fixed index."""
    queries = np.asarray(queries)
    nbrs = NeighborSet.empty(len(queries), cfg.n_similar)
    cache = {}
    for i, (s, r, _, t) in enumerate(queries.tolist()):
        key = (r, t, s if cfg.exclude_self else None)
        if key not in cache:
            cache[key] = index.query(r, t, exclude=key[2])
        _fill(nbrs, i, cache[key], cfg.mu, t)
    return nbrs


def stream_neighbors(index, queries, cfg):
    """Gather neighbors for time-sorted queries while recording them into ``index``.

    Each query only sees events strictly earlier than its own time, so events
    sharing a timestamp never see each other.
    """
    queries = np.asarray(queries)
    if len(queries) and np.any(np.diff(queries[:, 3]) < 0):
        raise DataError("stream_neighbors needs time-sorted queries")
    nbrs = NeighborSet.empty(len(queries), cfg.n_similar)
    rows = queries.tolist()
    i = 0
    while i < len(rows):
        t = rows[i][3]
        j = i
        while j < len(rows) and rows[j][3] == t:
            j += 1
        cache = {}
        for k in range(i, j):
            s, r = rows[k][0], rows[k][1]
            key = (r, s if cfg.exclude_self else None)
            if key not in cache:
                cache[key] = index.query(r, t, exclude=key[1])
            _fill(nbrs, k, cache[key], cfg.mu, t)
        for k in range(i, j):
            index.record(rows[k])
        i = j
    return nbrs


@dataclass
class WorkCounter:
    """Instrumentation for the enhancement forward pass."""

    batches: int = 0
    queries: int = 0
    retrievals: int = 0
    multiply_adds: int = 0

    def reset(self):
        self.batches = self.queries = self.retrievals = self.multiply_adds = 0


@dataclass
class EnhancedBatch:
    embeddings: np.ndarray
    phi: np.ndarray
    nbrs: NeighborSet
    subjects: np.ndarray


def enhance_batch(params, subjects, nbrs, degrees, cfg, counter=None):
    """Vectorized enhancement for a batch; ``degrees`` are the subjects' current degrees."""
    f = params.entity[subjects]
    phi = degree_decay(degrees, cfg.decay) * np.ones(len(subjects))
    if cfg.lam == 1.0:
        out = f.copy()
    else:
        # only rows with a non-empty similar set are touched
        rows = np.flatnonzero(nbrs.has)
        out = f.copy()
        if len(rows):
            ids, w = nbrs.ids[rows], nbrs.weights[rows]
            g = np.einsum("bn,bnd->bd", w, params.entity[ids])
            out[rows] = cfg.lam * f[rows] + (phi[rows] * (1.0 - cfg.lam))[:, None] * g
        if counter is not None:
            retrieved = len(rows) * nbrs.ids.shape[1]
            counter.retrievals += retrieved
            counter.multiply_adds += retrieved * params.dim + 2 * len(rows) * params.dim
    if counter is not None:
        counter.batches += 1
        counter.queries += len(subjects)
    return EnhancedBatch(out, phi, nbrs, np.asarray(subjects))


def enhance_backward(enh, grad_out, cfg):
    """Entity-table gradient rows/values given dL/d(enhanced embedding)."""
    has = enh.nbrs.has
    scale_f = np.where(has, cfg.lam, 1.0) if cfg.lam != 1.0 else np.ones(len(has))
    rows = [enh.subjects]
    vals = [grad_out * scale_f[:, None]]
    if cfg.lam != 1.0 and not cfg.stop_gradient and has.any():
        idx = np.flatnonzero(has)
        coef = (enh.phi[idx] * (1.0 - cfg.lam))[:, None] * enh.nbrs.weights[idx]  # (b, n)
        nb_vals = coef[:, :, None] * grad_out[idx][:, None, :]
        live = enh.nbrs.weights[idx] > 0
        rows.append(enh.nbrs.ids[idx][live])
        vals.append(nb_vals[live])
    return np.concatenate(rows), np.concatenate(vals)
