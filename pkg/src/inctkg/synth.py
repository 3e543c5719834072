"""Synthetic temporal KG corpora with Zipf-skewed subjects and planted relation-object structure."""
import math
from dataclasses import dataclass

import numpy as np

from .data import Vocabulary
from .exceptions import DataError
from .validation import check_fraction, check_positive_int, check_quads


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 500
    n_relations: int = 20
    n_quads: int = 50000
    n_days: int = 100
    zipf_exponent: float = 1.2
    similarity_signal: float = 0.6
    drift_rate: float = 0.1
    drift_period: int = 13
    pool_size: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_entities", "n_relations", "n_quads", "n_days", "drift_period", "pool_size"):
            check_positive_int(getattr(self, name), name)
        if not self.zipf_exponent > 0:
            raise DataError(f"zipf_exponent must be positive, got {self.zipf_exponent}")
        check_fraction(self.similarity_signal, "similarity_signal")
        check_fraction(self.drift_rate, "drift_rate")
        if self.pool_size > self.n_entities:
            raise DataError("pool_size cannot exceed n_entities")


def zipf_probabilities(n, exponent):
    if math.isinf(exponent):
        p = np.zeros(n)
        p[0] = 1.0
        return p
    logp = -exponent * np.log(np.arange(1, n + 1))
    p = np.exp(logp - logp.max())
    return p / p.sum()


def generate(cfg):
    """Return a time-sorted ``(n_quads, 4)`` array and its vocabulary.

    Each relation owns a preferred object pool; with probability
    ``similarity_signal`` an event's object comes from that pool, otherwise it
    is uniform. Every ``drift_period`` days each pool is redrawn with
    probability ``drift_rate``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_e, n_r, n = cfg.n_entities, cfg.n_relations, cfg.n_quads
    times = np.sort(rng.integers(0, cfg.n_days, size=n))
    subjects = rng.choice(n_e, size=n, p=zipf_probabilities(n_e, cfg.zipf_exponent))
    relations = rng.integers(0, n_r, size=n)

    n_periods = (cfg.n_days - 1) // cfg.drift_period + 1
    pools = np.empty((n_periods, n_r, cfg.pool_size), dtype=np.int64)
    pools[0] = [rng.choice(n_e, cfg.pool_size, replace=False) for _ in range(n_r)]
    for p in range(1, n_periods):
        pools[p] = pools[p - 1]
        for r in np.flatnonzero(rng.random(n_r) < cfg.drift_rate):
            pools[p, r] = rng.choice(n_e, cfg.pool_size, replace=False)

    from_pool = rng.random(n) < cfg.similarity_signal
    pool_pick = pools[times // cfg.drift_period, relations, rng.integers(0, cfg.pool_size, size=n)]
    objects = np.where(from_pool, pool_pick, rng.integers(0, n_e, size=n))

    quads = np.stack([subjects, relations, objects, times], axis=1).astype(np.int64)
    vocab = Vocabulary([f"e{i}" for i in range(n_e)], [f"r{i}" for i in range(n_r)])
    return quads, vocab


def write_tsv(path, quads, vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, r, o, t in check_quads(quads).tolist():
            fh.write(f"{vocab.entities[s]}\t{vocab.relations[r]}\t{vocab.entities[o]}\t{t}\n")


def entity_frequencies(quads):
    quads = check_quads(quads)
    return np.bincount(np.concatenate([quads[:, 0], quads[:, 2]]))


def verify_tail(quads, rare_below=18):
    """Long-tail statistics over the entities that occur in ``quads``."""
    quads = check_quads(quads)
    if not len(quads):
        raise DataError("cannot compute tail statistics of an empty corpus")
    freq = entity_frequencies(quads)
    freq = np.sort(freq[freq > 0])[::-1]
    ranks = np.arange(1, len(freq) + 1)
    slope = float(np.polyfit(np.log(ranks), np.log(freq), 1)[0]) if len(freq) > 1 else 0.0
    return {
        "n_entities": int(len(freq)),
        "rare_fraction": float(np.mean(freq < rare_below)),
        "rank_slope": slope,
        "max_frequency": int(freq[0]),
    }


def mutual_information(x, y):
    """Plug-in estimate of I(X; Y) in nats from paired integer samples."""
    x, y = np.asarray(x), np.asarray(y)
    joint = np.zeros((x.max() + 1, y.max() + 1))
    np.add.at(joint, (x, y), 1)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
