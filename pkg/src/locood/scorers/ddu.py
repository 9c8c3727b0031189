"""Gaussian discriminant density on penultimate embeddings (the DDU score)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import FitError, NumericalError, ShapeError

JITTER_LADDER = (0.0,) + tuple(10.0**e for e in range(-8, 0))
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GdaModel:
    means: np.ndarray        # (C, d)
    covariances: np.ndarray  # (C, d, d), jitter included
    cholesky: np.ndarray     # (C, d, d) lower factors
    priors: np.ndarray       # (C,)
    jitters: np.ndarray      # absolute jitter added per class
    classes: tuple

    @property
    def jitter_used(self):
        return float(self.jitters.max())

    @property
    def dim(self):
        return self.means.shape[1]


def _regularised_cholesky(cov, label):
    scale = float(np.mean(np.diag(cov)))
    if not scale > 0:
        scale = 1.0  # all-zero covariance (e.g. a dead embedding)
    for step in JITTER_LADDER:
        jitter = step * scale
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov))), jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"covariance of class {label} is not positive definite at any jitter")


def fit_ddu(embeddings, labels):
    """Class means, unbiased class covariances (jittered until Cholesky succeeds), priors."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = tuple(np.unique(y).tolist())
    d = z.shape[1]
    means, covs, chols, priors, jitters = [], [], [], [], []
    for c in classes:
        zc = z[y == c]
        if len(zc) < 2:
            raise FitError(f"class {c} has {len(zc)} sample(s); at least 2 are required")
        mu = zc.mean(axis=0)
        centred = zc - mu
        cov = centred.T @ centred / (len(zc) - 1)
        chol, jitter = _regularised_cholesky(cov, c)
        means.append(mu)
        covs.append(cov + jitter * np.eye(d))
        chols.append(chol)
        priors.append(len(zc) / len(z))
        jitters.append(jitter)
    return GdaModel(np.array(means), np.array(covs), np.array(chols), np.array(priors),
                    np.array(jitters), classes)


def class_log_densities(gda, z):
    """``(n, C)`` array of ``log N(z; mu_c, Sigma_c)``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != gda.dim:
        raise ShapeError(f"embedding width {z.shape[1]} != model width {gda.dim}")
    out = np.empty((len(z), len(gda.classes)))
    for c in range(len(gda.classes)):
        L = gda.cholesky[c]
        w = solve_triangular(L, (z - gda.means[c]).T, lower=True, check_finite=False)
        maha = np.sum(w * w, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, c] = -0.5 * (gda.dim * LOG_2PI + logdet + maha)
    return out


def score_ddu(gda, z):
    """Negative log mixture density: ``-log sum_c pi_c N(z; mu_c, Sigma_c)``."""
    single = np.asarray(z).ndim == 1
    terms = class_log_densities(gda, z) + np.log(gda.priors)
    top = terms.max(axis=1)
    score = -(top + np.log(np.exp(terms - top[:, None]).sum(axis=1)))
    return float(score[0]) if single else score
