"""Output-space scorers: softmax baseline, MC Dropout, Deep Ensemble, energy.

Every score follows one convention: higher means more likely OOD.  Functions
accept a single sample or a batch (leading axis) and return a float or an
array accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ValidationError
from ..nnkit import DETERMINISTIC, STOCHASTIC, entropy, forward, softmax

ENTROPY = "entropy"
ONE_MINUS_MAX = "one_minus_max"


@dataclass(frozen=True)
class ScorerConfig:
    mc_passes: int = 50
    ensemble_size: int = 5
    energy_temperature: float = 1.0
    dknn_k: int = 1
    react_percentile: float = 90.0
    softmax_baseline_mode: str = ENTROPY

    def __post_init__(self):
        if self.mc_passes < 1 or self.ensemble_size < 1 or self.dknn_k < 1:
            raise ConfigError("mc_passes, ensemble_size and dknn_k must be >= 1")
        if not self.energy_temperature > 0:
            raise ConfigError("energy_temperature must be positive")
        if not 0 < self.react_percentile <= 100:
            raise ConfigError("react_percentile must lie in (0, 100]")
        if self.softmax_baseline_mode not in (ENTROPY, ONE_MINUS_MAX):
            raise ConfigError(f"unknown softmax_baseline_mode {self.softmax_baseline_mode!r}")


def score_softmax(logits, mode=ENTROPY):
    probs = softmax(logits)
    if mode == ENTROPY:
        return _unwrap(entropy(probs))
    if mode == ONE_MINUS_MAX:
        return _unwrap(1.0 - probs.max(axis=-1))
    raise ConfigError(f"unknown softmax baseline mode {mode!r}")


def _unwrap(values):
    values = np.asarray(values)
    return float(values) if values.ndim == 0 else values


def _mean_of(vectors):
    """Mean taken as ``first + mean(deviation from first)``.

    Identical inputs give back the first vector bit for bit, which a plain
    running sum divided by the count does not guarantee.
    """
    first = None
    dev = 0.0
    n = 0
    for v in vectors:
        if first is None:
            first = v
        else:
            dev = dev + (v - first)
        n += 1
    return first + dev / n


def mc_dropout_probs(model, x, passes, rng, clamp=None):
    """Mean of ``passes`` dropout-on softmax vectors."""
    if passes < 1:
        raise ConfigError("MC Dropout needs at least one pass")
    return _mean_of(softmax(forward(model, x, STOCHASTIC, rng, clamp=clamp).logits)
                    for _ in range(passes))


def score_mc_dropout(model, x, passes, rng, clamp=None):
    return _unwrap(entropy(mc_dropout_probs(model, x, passes, rng, clamp)))


def check_ensemble(models):
    if len(models) < 1:
        raise ConfigError("ensemble needs at least one member")
    arch = models[0].architecture()
    for i, m in enumerate(models[1:], start=1):
        if m.architecture() != arch:
            raise ConfigError(f"ensemble member {i} has architecture {m.architecture()}, "
                              f"expected {arch}")


def ensemble_probs(models, x, clamps=None):
    check_ensemble(models)
    clamps = [None] * len(models) if clamps is None else clamps
    return _mean_of(softmax(forward(m, x, DETERMINISTIC, clamp=c).logits)
                    for m, c in zip(models, clamps))


def score_ensemble(models, x, clamps=None):
    return _unwrap(entropy(ensemble_probs(models, x, clamps)))


def score_energy(logits, temperature=1.0):
    """Energy ``-T * logsumexp(logits / T)``, returned as is."""
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    v = np.asarray(logits, dtype=np.float64) / temperature
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValidationError("energy needs finite, nonempty logits")
    top = v.max(axis=-1)
    lse = top + np.log(np.exp(v - top[..., None]).sum(axis=-1))
    return _unwrap(-temperature * lse)
