"""ReAct: clamp penultimate activations at a percentile of the ID training activations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class ReactState:
    limit: float
    percentile: float
    fitted_on: int


def linear_percentile(values, p):
    """Percentile with linear interpolation between order statistics.

    With sorted ``a_1 <= ... <= a_n`` and ``h = (n - 1) p / 100`` the result
    is ``a_{floor(h)+1} + (h - floor(h)) (a_{floor(h)+2} - a_{floor(h)+1})``.
    """
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = len(a)
    if n == 0:
        raise ConfigError("percentile of an empty set")
    h = (n - 1) * p / 100.0
    lo = math.floor(h)
    if lo >= n - 1:
        return float(a[-1])
    return float(a[lo] + (h - lo) * (a[lo + 1] - a[lo]))


def react_fit(train_embeddings, p=90.0):
    if not 0 < p <= 100:
        raise ConfigError(f"ReAct percentile must lie in (0, 100], got {p}")
    values = np.asarray(train_embeddings, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("ReAct needs at least one training activation")
    return ReactState(limit=linear_percentile(values, p), percentile=float(p), fitted_on=values.size)


def react_apply(state, embedding):
    limit = state.limit if isinstance(state, ReactState) else float(state)
    return np.minimum(np.asarray(embedding, dtype=np.float64), limit)
