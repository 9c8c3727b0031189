"""OOD scorers.  All of them return higher values for more OOD-looking inputs."""
from .baseline import (ENTROPY, ONE_MINUS_MAX, ScorerConfig, ensemble_probs, mc_dropout_probs,
                       score_energy, score_ensemble, score_mc_dropout, score_softmax)
from .ddu import GdaModel, fit_ddu, score_ddu
from .dknn import DknnIndex, fit_dknn, knn_distance_table, score_dknn
from .duq import DuqHead, DuqHyperparams, duq_kernels, fit_duq_head, score_duq
from .react import ReactState, linear_percentile, react_apply, react_fit

METHODS = ("softmax", "mc_dropout", "deep_ensemble", "energy", "ddu", "duq", "dknn")
TUNED_METHODS = ("duq", "dknn")

__all__ = [
    "ENTROPY", "ONE_MINUS_MAX", "METHODS", "TUNED_METHODS", "ScorerConfig", "GdaModel",
    "DknnIndex", "DuqHead", "DuqHyperparams", "ReactState", "duq_kernels", "ensemble_probs",
    "fit_ddu", "fit_dknn", "fit_duq_head", "knn_distance_table", "linear_percentile",
    "mc_dropout_probs", "react_apply", "react_fit", "score_ddu", "score_dknn", "score_duq",
    "score_energy", "score_ensemble", "score_mc_dropout", "score_softmax",
]
