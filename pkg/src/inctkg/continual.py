"""Incremental training over a task sequence with fine-tuning, EWC, replay and the enhancement/sampling arms.

Each task yields two checkpoints: the *eval* checkpoint (after training on
the task's train split) which is the only one ever scored, and the *carry*
checkpoint (after a few more epochs on valid + test) which seeds the next task.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as base
from .data import FrequencyTracker, TaskSplit, unseen_entities
from .enhancement import (EnhancementConfig, SimilarityIndex, WorkCounter, enhance_backward,
                          enhance_batch, gather_neighbors, stream_neighbors)
from .evaluation import (DEFAULT_BUCKETS, METRIC_NAMES, KnownFacts, average_metrics, bucketize,
                         inductive_mask, metrics, ranks_from_scores, with_inverses)
from .exceptions import ConfigError, DataError, DivergenceError
from .sampling import SamplerConfig, quad_weights, two_phase_indices
from .validation import check_choice, check_fraction, check_non_negative, check_positive_int, check_quads

logger = logging.getLogger(__name__)

STRATEGIES = ("finetune", "ewc", "replay", "ours-full", "ours-sampling-only", "ours-enhancement-only",
              "first-only")

# per-task RNG streams; separate streams keep strategies from perturbing each other's draws
_ORDER, _NEGATIVES, _CARRY, _REPLAY, _FISHER = range(5)


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "finetune"
    dim: int = 32
    epochs_per_task: int = 5
    post_eval_epochs: int = 2
    batch_size: int = 512
    n_negatives: int = 64
    lr: float = 0.1
    weight_decay: float = 0.0
    bucket_width: int = 7
    ewc_strength: float = 1.0
    ewc_samples: int = 1000
    replay_buffer_size: int = 5000
    replay_fraction: float = 0.5
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    buckets: tuple = DEFAULT_BUCKETS
    inductive_subject_only: bool = False
    eval_split: str = "test"
    seed: int = 0

    def __post_init__(self):
        check_choice(self.strategy, "strategy", STRATEGIES)
        check_positive_int(self.dim, "dim")
        check_positive_int(self.epochs_per_task, "epochs_per_task", allow_zero=True)
        check_positive_int(self.post_eval_epochs, "post_eval_epochs", allow_zero=True)
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.n_negatives, "n_negatives")
        check_non_negative(self.lr, "lr")
        check_non_negative(self.weight_decay, "weight_decay")
        check_positive_int(self.bucket_width, "bucket_width")
        check_non_negative(self.ewc_strength, "ewc_strength")
        check_positive_int(self.ewc_samples, "ewc_samples")
        check_positive_int(self.replay_buffer_size, "replay_buffer_size")
        check_fraction(self.replay_fraction, "replay_fraction")
        check_choice(self.eval_split, "eval_split", ("test", "valid"))
        if list(self.buckets) != sorted(self.buckets) or self.buckets[0] != 0:
            raise ConfigError(f"bucket boundaries must be increasing from 0, got {self.buckets}")

    @property
    def uses_enhancement(self):
        return self.strategy in ("ours-full", "ours-enhancement-only")

    @property
    def uses_sampling(self):
        return self.strategy in ("ours-full", "ours-sampling-only")


class ReplayBuffer:
    """Reservoir sample of past training quadruples."""

    def __init__(self, capacity):
        self.capacity = check_positive_int(capacity, "capacity")
        self.items = np.empty((0, 4), dtype=np.int64)
        self.n_seen = 0

    def __len__(self):
        return len(self.items)

    def add(self, quads, rng):
        quads = check_quads(quads)
        items = list(self.items)
        for q in quads:
            self.n_seen += 1
            if len(items) < self.capacity:
                items.append(q)
            else:
                j = int(rng.integers(0, self.n_seen))
                if j < self.capacity:
                    items[j] = q
        self.items = np.array(items, dtype=np.int64).reshape(-1, 4)

    def sample(self, size, rng):
        if not len(self.items) or size <= 0:
            return np.empty((0, 4), dtype=np.int64)
        return self.items[rng.integers(0, len(self.items), size=size)]

    def copy(self):
        new = ReplayBuffer(self.capacity)
        new.items = self.items.copy()
        new.n_seen = self.n_seen
        return new


def replay_mix(current, buffer, fraction, rng, update=True):
    """``current`` interleaved with ``ceil(fraction * len(current))`` uniform draws from ``buffer``."""
    check_fraction(fraction, "fraction")
    current = check_quads(current)
    n_extra = int(np.ceil(fraction * len(current))) if len(buffer) else 0
    out = current
    if n_extra:
        mixed = np.concatenate([current, buffer.sample(n_extra, rng)])
        out = mixed[rng.permutation(len(mixed))]
    if update:
        buffer.add(current, rng)
    return out


@dataclass
class FisherInfo:
    """Diagonal importances (accumulated over consolidations) and the anchor parameters."""

    importance: dict = field(default_factory=dict)
    anchor: dict = field(default_factory=dict)
    n_consolidations: int = 0

    def copy(self):
        return FisherInfo({k: v.copy() for k, v in self.importance.items()},
                          {k: v.copy() for k, v in self.anchor.items()}, self.n_consolidations)


def ewc_consolidate(params, fisher, sample, n_negatives, rng):
    """Add mean squared per-example loss gradients to the importances and re-anchor at ``params``."""
    sample = check_quads(sample, allow_empty=False)
    new = {name: np.zeros_like(table) for name, table in params.tables().items()}
    negs = base.sample_negatives_batch(rng, sample[:, 2], n_negatives, params.n_entities)
    for i in range(len(sample)):
        _, g = base.loss_and_grads(params, base.TrainBatch(sample[i:i + 1], negs[i:i + 1]))
        for name in g.rows:
            new[name][g.rows[name]] += g.values[name] ** 2
    out = FisherInfo(n_consolidations=fisher.n_consolidations + 1)
    for name, table in params.tables().items():
        imp = new[name] / len(sample)
        old = fisher.importance.get(name)
        if old is not None:
            imp[:len(old)] += old
        out.importance[name] = imp
        out.anchor[name] = table.copy()
    return out


def ewc_penalty(params, fisher, strength):
    total = 0.0
    for name, imp in fisher.importance.items():
        n = len(imp)
        diff = getattr(params, name)[:n] - fisher.anchor[name]
        total += float(np.sum(imp * diff * diff))
    return strength * total


def ewc_penalty_grad(params, fisher, strength):
    """Dense gradient 2 * strength * F * (theta - theta*) per table (zero for unanchored rows)."""
    out = {}
    for name, table in params.tables().items():
        g = np.zeros_like(table)
        imp = fisher.importance.get(name)
        if imp is not None:
            n = len(imp)
            g[:n] = 2.0 * strength * imp * (table[:n] - fisher.anchor[name])
        out[name] = g
    return out


def _add_penalty_rows(grads, params, fisher, strength):
    for name in grads.rows:
        imp = fisher.importance.get(name)
        if imp is None:
            continue
        rows = grads.rows[name]
        live = rows < len(imp)
        r = rows[live]
        grads.values[name][live] += 2.0 * strength * imp[r] * (getattr(params, name)[r] - fisher.anchor[name][r])


def enhanced_loss_and_grads(params, batch, nbrs, degrees, cfg, counter=None):
    """Base loss with enhanced subject embeddings; gradients flow back into the entity table."""
    enh = enhance_batch(params, batch.positives[:, 0], nbrs, degrees, cfg, counter)
    loss, grads = base.loss_and_grads(params, batch, enh.embeddings)
    rows, vals = enhance_backward(enh, grads.subject, cfg)
    return loss, base.merge_grads(grads, base.SparseGrads({"entity": rows}, {"entity": vals}))


@dataclass
class Checkpoint:
    params: base.ModelParams
    optimizer: base.OptimizerState
    index: SimilarityIndex
    tag: str
    task: int


@dataclass
class CheckpointPair:
    eval: Checkpoint
    carry: Checkpoint


class IncrementalRunner:
    """Single-threaded state machine over tasks: grow, train, checkpoint, evaluate, carry."""

    def __init__(self, cfg, n_entities=0, n_relations=None):
        if n_relations is None:
            raise DataError("the relation vocabulary size must be fixed up front")
        self.cfg = cfg
        self.n_relations = n_relations
        self.params = base.ModelParams.initialize(n_entities, n_relations, 1, cfg.dim, cfg.bucket_width, cfg.seed)
        self.optimizer = base.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay).ensure(self.params)
        self.tracker = FrequencyTracker(n_entities)
        self.index = SimilarityIndex(cfg.enhancement.n_similar)
        self.fisher = FisherInfo()
        self.replay = ReplayBuffer(cfg.replay_buffer_size)
        self.known = KnownFacts()
        self.counter = WorkCounter()
        self.tasks = []
        self.pairs = []
        self.eval_sets = []  # per task: dict with queries, neighbor sets, degrees, freqs
        self.matrices = {m: [] for m in METRIC_NAMES}
        self.reports = []
        self.losses = []
        self._weight_tracker = None

    @property
    def t(self):
        return len(self.tasks)

    def _rng(self, stream):
        return np.random.default_rng([self.cfg.seed, stream, self.t])

    # -- training ------------------------------------------------------------

    def _grow(self, task):
        quads = task.all_quads()
        n_ent = int(max(quads[:, 0].max(), quads[:, 2].max())) + 1
        if quads[:, 1].max() >= self.n_relations:
            raise DataError("relation id outside the fixed relation vocabulary")
        self.params.grow_entities(n_ent)
        self.params.grow_buckets(int(quads[:, 3].max()) // self.cfg.bucket_width + 1)
        self.optimizer.ensure(self.params)

    def _examples(self, quads):
        """Forward + inverse examples (rows i and i + N), with stream-order neighbor sets if enhancing."""
        ex = with_inverses(quads, self.n_relations)
        if not self.cfg.uses_enhancement:
            return ex, None
        order = np.argsort(ex[:, 3], kind="stable")
        nbrs = stream_neighbors(self.index, ex[order], self.cfg.enhancement)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        return ex, nbrs.take(inv)

    def _step(self, ex, nbrs, rng):
        cfg = self.cfg
        negs = base.sample_negatives_batch(rng, ex[:, 2], cfg.n_negatives, self.params.n_entities)
        batch = base.TrainBatch(ex, negs)
        if nbrs is not None:
            loss, grads = enhanced_loss_and_grads(self.params, batch, nbrs, self.tracker.degree(ex[:, 0]),
                                                  cfg.enhancement, self.counter)
        else:
            loss, grads = base.loss_and_grads(self.params, batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at task {self.t}")
        if cfg.strategy == "ewc" and cfg.ewc_strength > 0 and self.fisher.n_consolidations:
            _add_penalty_rows(grads, self.params, self.fisher, cfg.ewc_strength)
        base.apply_step(self.params, self.optimizer, grads)
        return loss

    def _epoch(self, quads, ex, nbrs, order, rng):
        """One pass over ``order`` (indices into ``quads``); each quad contributes both directions."""
        n = len(quads)
        rows = np.stack([order, order + n], axis=1).ravel()
        bs = self.cfg.batch_size
        total = 0.0
        for start in range(0, len(rows), bs):
            sel = rows[start:start + bs]
            total += self._step(ex[sel], None if nbrs is None else nbrs.take(sel), rng) * len(sel)
        return total / max(len(rows), 1)

    def _epoch_order(self, quads, rng):
        if self.cfg.uses_sampling:
            if self.cfg.sampler.alpha > 0:
                w = quad_weights(self._weight_tracker or self.tracker, quads, self.cfg.sampler.psi,
                                 min_count=1 if self._weight_tracker is not None else None)
            else:
                w = np.ones(len(quads))
            return two_phase_indices(w, self.cfg.sampler, rng)
        return rng.permutation(len(quads))

    def _train(self, quads, epochs, rng_order, rng_neg, replay=False):
        if epochs == 0 or not len(quads):
            return
        ex, nbrs = self._examples(quads)
        rng_replay = self._rng(_REPLAY)
        for _ in range(epochs):
            order = self._epoch_order(quads, rng_order)
            if replay and len(self.replay) and self.cfg.replay_fraction > 0:
                stream = replay_mix(quads[order], self.replay, self.cfg.replay_fraction,
                                    rng_replay, update=False)
                ex_r = with_inverses(stream, self.n_relations)
                loss = self._epoch(stream, ex_r, None, np.arange(len(stream)), rng_neg)
            else:
                loss = self._epoch(quads, ex, nbrs, order, rng_neg)
            self.losses.append((self.t, loss))
            logger.debug("task %d loss %.4f", self.t, loss)

    def _checkpoint(self, tag):
        return Checkpoint(self.params.copy(), self.optimizer.copy(), self.index.copy(), tag, self.t)

    def train_task(self, task):
        """Train on one task and return its (eval, carry) checkpoint pair."""
        cfg = self.cfg
        self.tasks.append(task)
        self._grow(task)
        self.known.add(with_inverses(task.all_quads(), self.n_relations))
        frozen = cfg.strategy == "first-only" and self.t > 1

        # sampling weights see the current train split unless include_current is off
        self._weight_tracker = None if cfg.sampler.include_current else self.tracker.copy()
        self.tracker.observe(task.train)
        self._train(task.train, 0 if frozen else cfg.epochs_per_task, self._rng(_ORDER), self._rng(_NEGATIVES),
                    replay=cfg.strategy == "replay")
        self._weight_tracker = None
        eval_ckpt = self._checkpoint("eval")
        eval_tracker = self.tracker.copy()

        if cfg.strategy == "replay":
            self.replay.add(task.train, self._rng(_REPLAY))
        self._prepare_eval(task, eval_ckpt, eval_tracker)

        rest = np.concatenate([task.valid, task.test])
        self.tracker.observe(rest)
        self._train(rest, 0 if frozen else cfg.post_eval_epochs, self._rng(_CARRY), self._rng(_CARRY + 10))
        if cfg.strategy == "ewc" and cfg.ewc_strength > 0 and not frozen:
            rng = self._rng(_FISHER)
            sample = task.train
            if len(sample) > cfg.ewc_samples:
                sample = sample[np.sort(rng.choice(len(sample), cfg.ewc_samples, replace=False))]
            self.fisher = ewc_consolidate(self.params, self.fisher, sample, cfg.n_negatives, rng)
        pair = CheckpointPair(eval_ckpt, self._checkpoint("carry"))
        self.pairs.append(pair)
        return pair

    # -- evaluation ----------------------------------------------------------

    def _prepare_eval(self, task, ckpt, tracker):
        """Freeze everything an evaluation of this task's held-out split needs."""
        split = task.test if self.cfg.eval_split == "test" else task.valid
        queries = with_inverses(split, self.n_relations)
        nbrs = gather_neighbors(ckpt.index, queries, self.cfg.enhancement) if self.cfg.uses_enhancement else None
        history = [t.all_quads() for t in self.tasks[:-1]]
        unseen = unseen_entities(history, task.train, self.params.n_entities)
        ind = inductive_mask(split, unseen, self.cfg.inductive_subject_only)
        self.eval_sets.append({
            "queries": queries,
            "nbrs": nbrs,
            "degrees": tracker.degree(queries[:, 0]),
            "freqs": tracker.freq(queries[:, 0]),
            "inductive": np.concatenate([ind, ind]),
        })

    def score_queries(self, params, queries, nbrs=None, degrees=None):
        """Score every entity for each (s, r, ?, t) query under ``params``."""
        if nbrs is not None:
            emb = enhance_batch(params, queries[:, 0], nbrs, degrees, self.cfg.enhancement).embeddings
        else:
            emb = params.entity[queries[:, 0]]
        return base.score_all(params, emb, queries[:, 1], queries[:, 3])

    def rank_eval_set(self, params, j, chunk=2048):
        """Ranks of eval set ``j`` (0-based) under both protocols."""
        es = self.eval_sets[j]
        q = es["queries"]
        out = {"time_filtered": [], "raw": []}
        for a in range(0, len(q), chunk):
            sl = slice(a, a + chunk)
            nb = None if es["nbrs"] is None else es["nbrs"].take(np.arange(len(q))[sl])
            scores = self.score_queries(params, q[sl], nb, es["degrees"][sl])
            out["raw"].append(ranks_from_scores(scores, q[sl, 2]))
            drop = self.known.mask(q[sl], params.n_entities)
            out["time_filtered"].append(ranks_from_scores(scores, q[sl, 2], drop))
        return {k: np.concatenate(v) for k, v in out.items()}

    def evaluate(self):
        """Score the latest eval checkpoint on every eval set seen so far."""
        params = self.pairs[-1].eval.params
        t = self.t
        prefix = "test" if self.cfg.eval_split == "test" else "valid"
        per_protocol = {"time_filtered": {}, "raw": {}}
        ranks_by_set = []
        for j in range(t):
            ranks = self.rank_eval_set(params, j)
            ranks_by_set.append(ranks)
            for proto, r in ranks.items():
                per_protocol[proto][f"{prefix}_{j + 1}"] = metrics(r)
        for proto, sets in per_protocol.items():
            vals = [sets[f"{prefix}_{j + 1}"] for j in range(t)]
            sets["current"] = dict(vals[-1])
            sets["average"] = average_metrics(vals)
        for m in METRIC_NAMES:
            self.matrices[m].append([per_protocol["time_filtered"][f"{prefix}_{j + 1}"][m] for j in range(t)])

        inductive = {}
        first = ranks_by_set[0]["time_filtered"][self.eval_sets[0]["inductive"]]
        inductive["first"] = metrics(first) if len(first) else None
        union = np.concatenate([rk["time_filtered"][es["inductive"]]
                                for rk, es in zip(ranks_by_set, self.eval_sets)])
        inductive["average"] = metrics(union) if len(union) else None

        all_ranks = np.concatenate([rk["time_filtered"] for rk in ranks_by_set])
        all_freqs = np.concatenate([es["freqs"] for es in self.eval_sets])
        report = {
            "step": t,
            "checkpoint": self.pairs[-1].eval.tag,
            "strategy": self.cfg.strategy,
            "seed": self.cfg.seed,
            "metrics": per_protocol,
            "inductive": inductive,
            "buckets": bucketize(all_freqs, all_ranks, self.cfg.buckets),
        }
        self.reports.append(report)
        return report

    def step(self, task):
        pair = self.train_task(task)
        return pair, self.evaluate()


@dataclass
class RunResult:
    pairs: list
    reports: list
    matrices: dict
    runner: IncrementalRunner = None

    @property
    def buckets(self):
        return self.reports[-1]["buckets"]


def incremental_run(tasks, cfg, n_entities=None, n_relations=None, callback=None):
    """Train and evaluate over ``tasks`` in order; ``callback(t, pair, report)`` fires after each task."""
    if not tasks:
        raise DataError("incremental_run needs at least one task")
    tasks = [t if isinstance(t, TaskSplit) else TaskSplit(*t) for t in tasks]
    if n_relations is None:
        n_relations = int(max(t.all_quads()[:, 1].max() for t in tasks)) + 1
    runner = IncrementalRunner(cfg, n_entities or 0, n_relations)
    for task in tasks:
        pair, report = runner.step(task)
        if callback is not None:
            callback(runner.t, pair, report)
    return RunResult(runner.pairs, runner.reports, runner.matrices, runner)
