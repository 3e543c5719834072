"""Input validation helpers shared by the estimators and the pipeline functions."""
import math
import numbers

import numpy as np

from .exceptions import ConfigError, DataError


def check_quads(quads, n_entities=None, n_relations=None, allow_empty=True):
    """Coerce ``quads`` to a C-contiguous ``(N, 4)`` int64 array of (s, r, o, t).

    Accepts any array-like of 4-sequences, including lists of :class:`Quadruple`.
    """
    arr = np.asarray(quads if len(quads) else np.empty((0, 4)), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"expected an (N, 4) array of quadruples, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise DataError("empty quadruple set")
    if arr.size and arr.min() < 0:
        raise DataError("quadruple ids and times must be non-negative")
    if n_entities is not None and arr.size:
        bad = max(arr[:, 0].max(), arr[:, 2].max())
        if bad >= n_entities:
            raise DataError(f"entity id {bad} out of range for vocabulary of size {n_entities}")
    if n_relations is not None and arr.size and arr[:, 1].max() >= n_relations:
        raise DataError(f"relation id {arr[:, 1].max()} out of range for {n_relations} relations")
    return np.ascontiguousarray(arr)


def check_fraction(value, name, low=0.0, high=1.0, low_open=False, high_open=False):
    if not isinstance(value, numbers.Real) or math.isnan(value):
        raise ConfigError(f"{name} must be a real number, got {value!r}")
    if (value < low or (low_open and value == low)) or (value > high or (high_open and value == high)):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ConfigError(f"{name} must lie in {lo}{low}, {high}{hi}, got {value}")
    return float(value)


def check_positive_int(value, name, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return int(value)


def check_non_negative(value, name):
    if not isinstance(value, numbers.Real) or not math.isfinite(value) or value < 0:
        raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` for ``seed`` (int, None or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
