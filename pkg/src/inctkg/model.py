"""Trilinear temporal scorer with closed-form gradients and a row-sparse Adagrad.

score(s, r, o, t) = sum_k e_s[k] * (w_r[k] + v_b(t)[k]) * e_o[k]

Relation tables hold ``2 * n_relations`` rows; row ``r + n_relations`` is the
inverse of ``r`` so that subject prediction becomes object prediction.
"""
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, DivergenceError
from .validation import check_positive_int

TABLES = ("entity", "relation", "time")
CHECKPOINT_FORMAT = "inctkg-checkpoint/1"


def _init_rows(seed, stream, rows, dim):
    bound = 0.5 / np.sqrt(dim)
    out = np.empty((len(rows), dim))
    for i, row in enumerate(rows):
        out[i] = np.random.default_rng([seed, stream, row]).uniform(-bound, bound, dim)
    return out


@dataclass
class ModelParams:
    entity: np.ndarray
    relation: np.ndarray
    time: np.ndarray
    n_relations: int
    bucket_width: int = 1
    seed: int = 0

    @classmethod
    def initialize(cls, n_entities, n_relations, n_buckets, dim, bucket_width=1, seed=0):
        """Uniform init in [-0.5/sqrt(d), 0.5/sqrt(d)]; row values depend only on (seed, table, row)."""
        check_positive_int(dim, "dim")
        check_positive_int(n_buckets, "n_buckets")
        check_positive_int(bucket_width, "bucket_width")
        return cls(
            entity=_init_rows(seed, 0, range(n_entities), dim),
            relation=_init_rows(seed, 1, range(2 * n_relations), dim),
            time=_init_rows(seed, 2, range(n_buckets), dim),
            n_relations=n_relations,
            bucket_width=bucket_width,
            seed=seed,
        )

    @property
    def dim(self):
        return self.entity.shape[1]

    @property
    def n_entities(self):
        return self.entity.shape[0]

    @property
    def n_buckets(self):
        return self.time.shape[0]

    def grow_entities(self, n_entities):
        """Append freshly initialized rows up to ``n_entities``; returns the number added."""
        added = n_entities - self.n_entities
        if added > 0:
            new = _init_rows(self.seed, 0, range(self.n_entities, n_entities), self.dim)
            self.entity = np.concatenate([self.entity, new])
        return max(added, 0)

    def grow_buckets(self, n_buckets):
        added = n_buckets - self.n_buckets
        if added > 0:
            new = _init_rows(self.seed, 2, range(self.n_buckets, n_buckets), self.dim)
            self.time = np.concatenate([self.time, new])
        return max(added, 0)

    def bucket(self, t):
        return np.clip(np.asarray(t) // self.bucket_width, 0, self.n_buckets - 1)

    def relation_time(self, r, t):
        """``w_r + v_b(t)`` for arrays of relations and times."""
        return self.relation[r] + self.time[self.bucket(t)]

    def copy(self):
        return ModelParams(self.entity.copy(), self.relation.copy(), self.time.copy(),
                           self.n_relations, self.bucket_width, self.seed)

    def tables(self):
        return {name: getattr(self, name) for name in TABLES}

    def check_ids(self, s=None, r=None, o=None):
        for ids, size, what in ((s, self.n_entities, "entity"), (o, self.n_entities, "entity"),
                                (r, self.relation.shape[0], "relation")):
            if ids is None:
                continue
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= size):
                raise DataError(f"{what} id out of range [0, {size})")


def score(params, s, r, o, t, subject_override=None):
    params.check_ids(s=s, r=r, o=o)
    e_s = params.entity[s] if subject_override is None else np.asarray(subject_override, dtype=float)
    return float(np.sum(e_s * params.relation_time(r, t) * params.entity[o]))


def score_all(params, subject_emb, r, t):
    """Scores of every entity as object, shape ``(B, n_entities)``."""
    return (subject_emb * params.relation_time(r, t)) @ params.entity.T


@dataclass
class TrainBatch:
    positives: np.ndarray  # (B, 4)
    negatives: np.ndarray  # (B, K) negative object ids

    def __post_init__(self):
        if self.negatives.shape[0] != self.positives.shape[0]:
            raise DataError("one row of negatives per positive required")
        if np.any(self.negatives == self.positives[:, 2:3]):
            raise DataError("negatives must exclude the true object")

    @property
    def k(self):
        return self.negatives.shape[1]


@dataclass
class SparseGrads:
    """Row-sparse gradients: ``rows[name]`` unique row ids, ``values[name]`` matching rows."""

    rows: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    subject: np.ndarray = None  # gradient w.r.t. per-positive subject overrides

    def dense(self, params):
        out = {name: np.zeros_like(table) for name, table in params.tables().items()}
        for name in self.rows:
            out[name][self.rows[name]] = self.values[name]
        return out


def accumulate_rows(rows, values):
    """Sum ``values`` by ``rows``; returns (unique_rows, summed_values)."""
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), values.shape[1]))
    np.add.at(out, inv.ravel(), values)
    return uniq, out


def forward(params, batch, subject_overrides=None):
    """Scores ``(B, K+1)`` with the true object in column 0, plus cached intermediates."""
    pos = batch.positives
    s, r, o, t = pos[:, 0], pos[:, 1], pos[:, 2], pos[:, 3]
    params.check_ids(s=s, r=r, o=o)
    params.check_ids(o=batch.negatives)
    e_s = params.entity[s] if subject_overrides is None else subject_overrides
    c = params.relation_time(r, t)
    a = e_s * c
    objs = np.concatenate([o[:, None], batch.negatives], axis=1)
    e_o = params.entity[objs]
    scores = np.einsum("bd,bkd->bk", a, e_o)
    return scores, (e_s, c, a, objs, e_o)


def softmax_xent(scores):
    """Mean cross-entropy with target column 0; returns (loss, dloss/dscores)."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[:, 0]))
    probs = np.exp(shifted - lse[:, None])
    probs[:, 0] -= 1.0
    return loss, probs / len(scores)


def loss_and_grads(params, batch, subject_overrides=None):
    """Softmax cross-entropy over {true object} + K negatives, mean over the batch.

    With ``subject_overrides`` (one d-vector per positive) the subject rows are
    not differentiated directly; their gradient is returned in ``grads.subject``
    so a caller can backpropagate through whatever produced the overrides.
    """
    scores, (e_s, c, a, objs, e_o) = forward(params, batch, subject_overrides)
    loss, dscores = softmax_xent(scores)
    pos = batch.positives
    d = params.dim
    g_eo = dscores[:, :, None] * a[:, None, :]
    g_a = np.einsum("bk,bkd->bd", dscores, e_o)
    g_es = g_a * c
    g_c = g_a * e_s

    grads = SparseGrads()
    ent_rows = [objs.ravel()]
    ent_vals = [g_eo.reshape(-1, d)]
    if subject_overrides is None:
        ent_rows.append(pos[:, 0])
        ent_vals.append(g_es)
    else:
        grads.subject = g_es
    grads.rows["entity"], grads.values["entity"] = accumulate_rows(
        np.concatenate(ent_rows), np.concatenate(ent_vals))
    grads.rows["relation"], grads.values["relation"] = accumulate_rows(pos[:, 1], g_c)
    grads.rows["time"], grads.values["time"] = accumulate_rows(params.bucket(pos[:, 3]), g_c)
    return loss, grads


def merge_grads(*parts):
    """Sum several SparseGrads (ignoring their ``subject`` fields)."""
    rows, values = {}, {}
    for name in TABLES:
        r = [p.rows[name] for p in parts if name in p.rows]
        if not r:
            continue
        v = [p.values[name] for p in parts if name in p.rows]
        rows[name], values[name] = accumulate_rows(np.concatenate(r), np.concatenate(v))
    return SparseGrads(rows, values)


@dataclass
class OptimizerState:
    lr: float = 0.1
    weight_decay: float = 0.0
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)

    def ensure(self, params):
        for name, table in params.tables().items():
            cur = self.acc.get(name)
            if cur is None:
                self.acc[name] = np.zeros_like(table)
            elif cur.shape[0] < table.shape[0]:
                pad = np.zeros((table.shape[0] - cur.shape[0], table.shape[1]))
                self.acc[name] = np.concatenate([cur, pad])
        return self

    def copy(self):
        return OptimizerState(self.lr, self.weight_decay, self.eps,
                              {k: v.copy() for k, v in self.acc.items()})


def apply_step(params, state, grads):
    """Adagrad on touched rows: theta -= lr * (g / sqrt(acc + eps) + weight_decay * theta)."""
    state.ensure(params)
    for name in grads.rows:
        g = grads.values[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name} table")
    for name in grads.rows:
        rows, g = grads.rows[name], grads.values[name]
        table, acc = getattr(params, name), state.acc[name]
        acc[rows] += g * g
        step = g / np.sqrt(acc[rows] + state.eps)
        if state.weight_decay:
            step = step + state.weight_decay * table[rows]
        table[rows] -= state.lr * step


def sample_negatives_batch(rng, objects, k, n_entities):
    """``(B, k)`` ids drawn uniformly from the vocabulary minus each true object."""
    objects = np.asarray(objects, dtype=np.int64)
    if k >= n_entities:
        raise DataError(f"cannot draw {k} negatives from a vocabulary of {n_entities}")
    draws = rng.integers(0, n_entities - 1, size=(len(objects), k))
    return draws + (draws >= objects[:, None])


def sample_negatives(rng, positive, k, n_entities):
    return sample_negatives_batch(rng, [positive[2]], k, n_entities)[0]


def save_checkpoint(path, params, header=None, arrays=None):
    """Write params plus optional extra arrays to an uncompressed npz container."""
    head = {
        "format": CHECKPOINT_FORMAT,
        "dim": params.dim,
        "n_entities": params.n_entities,
        "n_relations": params.n_relations,
        "n_buckets": params.n_buckets,
        "bucket_width": params.bucket_width,
        "seed": params.seed,
    }
    head.update(header or {})
    payload = {f"param/{k}": v for k, v in params.tables().items()}
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = v
    payload["header"] = np.array(json.dumps(head, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (params, header, extra_arrays)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        params = ModelParams(z["param/entity"], z["param/relation"], z["param/time"],
                             header["n_relations"], header["bucket_width"], header["seed"])
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return params, header, extra
