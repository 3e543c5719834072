"""Two-phase weighted frequency-based sampling of training quadruples."""
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .validation import check_choice, check_fraction, check_positive_int, check_quads

PSI_MODES = ("min", "max", "mean")


@dataclass(frozen=True)
class SamplerConfig:
    """``epoch_size=None`` means one draw per training quadruple."""

    alpha: float = 0.5
    psi: str = "min"
    epoch_size: int = None
    include_current: bool = True

    def __post_init__(self):
        check_fraction(self.alpha, "alpha")
        check_choice(self.psi, "psi", PSI_MODES)
        if self.epoch_size is not None:
            check_positive_int(self.epoch_size, "epoch_size")


def _psi(a, b, mode):
    if mode == "min":
        return np.minimum(a, b)
    if mode == "max":
        return np.maximum(a, b)
    return 0.5 * (a + b)


def quad_weights(tracker, quads, psi="min", min_count=None):
    """psi(1/freq(s), 1/freq(o)) for every row of ``quads``.

    ``min_count`` floors the frequencies, for trackers that have not yet seen
    the quads being weighted.
    """
    quads = check_quads(quads)
    fs = tracker.freq(quads[:, 0])
    fo = tracker.freq(quads[:, 2])
    if min_count is not None:
        fs, fo = np.maximum(fs, min_count), np.maximum(fo, min_count)
    if np.any(fs == 0) or np.any(fo == 0):
        raise DataError("zero entity frequency: observe the training data before weighting it")
    return _psi(1.0 / fs, 1.0 / fo, psi)


def quad_weight(tracker, quad, psi="min"):
    return float(quad_weights(tracker, [quad], psi)[0])


def phase_sizes(alpha, epoch_size):
    n_weighted = int(np.floor(alpha * epoch_size + 0.5))
    return n_weighted, epoch_size - n_weighted


def weighted_draws(rng, weights, size):
    """Inverse-transform draws with replacement, probability proportional to ``weights``."""
    cdf = np.cumsum(weights, dtype=float)
    u = rng.random(size) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def two_phase_indices(weights, cfg, rng, n=None):
    """Row indices drawn by the two-phase scheme, shuffled."""
    n = len(weights) if n is None else n
    if n == 0:
        raise DataError("cannot sample from an empty training set")
    size = cfg.epoch_size or n
    n_weighted, n_uniform = phase_sizes(cfg.alpha, size)
    first = weighted_draws(rng, weights, n_weighted) if n_weighted else np.empty(0, dtype=np.int64)
    second = rng.integers(0, n, size=n_uniform)
    idx = np.concatenate([first, second]).astype(np.int64)
    return idx[rng.permutation(len(idx))]


def two_phase_sample(data, tracker, cfg, rng):
    data = check_quads(data, allow_empty=False)
    w = quad_weights(tracker, data, cfg.psi) if cfg.alpha > 0 else np.ones(len(data))
    return data[two_phase_indices(w, cfg, rng)]


def marginal_probabilities(weights, alpha):
    """Per-quad probability of a single draw under the two-phase mixture."""
    weights = np.asarray(weights, dtype=float)
    return alpha * weights / weights.sum() + (1.0 - alpha) / len(weights)
