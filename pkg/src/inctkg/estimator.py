"""scikit-learn style estimator around the incremental runner."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .continual import IncrementalRunner, RunConfig
from .data import Bundle, TaskSplit
from .enhancement import EnhancementConfig, gather_neighbors
from .evaluation import DEFAULT_BUCKETS, forgetting_curve, metrics, ranks_from_scores
from .exceptions import DataError
from .sampling import SamplerConfig
from .validation import check_quads


class IncrementalTKGCompleter(BaseEstimator):
    """Object prediction for temporal KGs, trained snapshot by snapshot.

    ``fit`` consumes a whole task sequence (a :class:`~inctkg.data.Bundle` or a
    list of :class:`~inctkg.data.TaskSplit`); ``partial_fit`` consumes one task.
    Queries are ``(N, 4)`` arrays of (subject, relation, object, time); the
    object column is the target and is ignored by ``predict``.

    Parameters mirror :class:`~inctkg.continual.RunConfig` with the
    enhancement (``lam``, ``mu``, ``n_similar``, ``decay``) and sampler
    (``alpha``, ``psi``) settings flattened.
    """

    def __init__(self, strategy="finetune", dim=32, epochs_per_task=5, post_eval_epochs=2, batch_size=512,
                 n_negatives=64, lr=0.1, weight_decay=0.0, bucket_width=7, ewc_strength=1.0, ewc_samples=1000,
                 replay_buffer_size=5000, replay_fraction=0.5, lam=0.5, mu=0.1, n_similar=20,
                 decay="inverse-log", stop_gradient=False, exclude_self=False, alpha=0.5, psi="min",
                 epoch_size=None, include_current=True, buckets=DEFAULT_BUCKETS, inductive_subject_only=False,
                 n_entities=None, n_relations=None, seed=0):
        self.strategy = strategy
        self.dim = dim
        self.epochs_per_task = epochs_per_task
        self.post_eval_epochs = post_eval_epochs
        self.batch_size = batch_size
        self.n_negatives = n_negatives
        self.lr = lr
        self.weight_decay = weight_decay
        self.bucket_width = bucket_width
        self.ewc_strength = ewc_strength
        self.ewc_samples = ewc_samples
        self.replay_buffer_size = replay_buffer_size
        self.replay_fraction = replay_fraction
        self.lam = lam
        self.mu = mu
        self.n_similar = n_similar
        self.decay = decay
        self.stop_gradient = stop_gradient
        self.exclude_self = exclude_self
        self.alpha = alpha
        self.psi = psi
        self.epoch_size = epoch_size
        self.include_current = include_current
        self.buckets = buckets
        self.inductive_subject_only = inductive_subject_only
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.seed = seed

    def run_config(self):
        return RunConfig(
            strategy=self.strategy, dim=self.dim, epochs_per_task=self.epochs_per_task,
            post_eval_epochs=self.post_eval_epochs, batch_size=self.batch_size, n_negatives=self.n_negatives,
            lr=self.lr, weight_decay=self.weight_decay, bucket_width=self.bucket_width,
            ewc_strength=self.ewc_strength, ewc_samples=self.ewc_samples,
            replay_buffer_size=self.replay_buffer_size, replay_fraction=self.replay_fraction,
            enhancement=EnhancementConfig(self.lam, self.mu, self.n_similar, self.decay, self.stop_gradient,
                                          self.exclude_self),
            sampler=SamplerConfig(self.alpha, self.psi, self.epoch_size, self.include_current),
            buckets=tuple(self.buckets), inductive_subject_only=self.inductive_subject_only, seed=self.seed,
        )

    @staticmethod
    def _tasks(X):
        if isinstance(X, Bundle):
            return X.tasks, X.n_entities, X.n_relations
        tasks = [x if isinstance(x, TaskSplit) else TaskSplit(*x) for x in X]
        if not tasks:
            raise DataError("no tasks to fit")
        return tasks, None, None

    def _start(self, n_entities, n_relations):
        n_relations = self.n_relations if self.n_relations is not None else n_relations
        if n_relations is None:
            raise DataError("n_relations must be given (as a parameter or via a Bundle)")
        self.runner_ = IncrementalRunner(self.run_config(), self.n_entities or n_entities or 0, n_relations)
        self.reports_ = self.runner_.reports

    def fit(self, X, y=None):
        tasks, n_ent, n_rel = self._tasks(X)
        if n_rel is None:
            n_rel = int(max(t.all_quads()[:, 1].max() for t in tasks)) + 1
        self._start(n_ent, n_rel)
        for task in tasks:
            self.runner_.step(task)
        return self

    def partial_fit(self, task, y=None):
        if not isinstance(task, TaskSplit):
            task = TaskSplit(*task)
        if not hasattr(self, "runner_"):
            self._start(None, int(task.all_quads()[:, 1].max()) + 1)
        self.runner_.step(task)
        return self

    @property
    def n_tasks_(self):
        check_is_fitted(self, "runner_")
        return self.runner_.t

    @property
    def checkpoints_(self):
        check_is_fitted(self, "runner_")
        return self.runner_.pairs

    def forgetting_curve(self, metric="mrr"):
        check_is_fitted(self, "runner_")
        return forgetting_curve(self.runner_.matrices[metric])

    def decision_function(self, X):
        """Scores of every entity as the object of each query, from the latest eval checkpoint."""
        check_is_fitted(self, "runner_")
        run = self.runner_
        ckpt = run.pairs[-1].eval
        X = check_quads(X, n_entities=ckpt.params.n_entities, n_relations=2 * run.n_relations)
        nbrs = degrees = None
        if run.cfg.uses_enhancement:
            nbrs = gather_neighbors(ckpt.index, X, run.cfg.enhancement)
            degrees = run.tracker.degree(X[:, 0])
        return run.score_queries(ckpt.params, X, nbrs, degrees)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def rank(self, X, filtered=True):
        X = check_quads(X)
        scores = self.decision_function(X)
        drop = self.runner_.known.mask(X, scores.shape[1]) if filtered else None
        return ranks_from_scores(scores, X[:, 2], drop)

    def score(self, X, y=None):
        """Time-filtered MRR on ``X``."""
        return metrics(self.rank(X))["mrr"]
