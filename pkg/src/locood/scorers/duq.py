"""RBF (DUQ) head trained on frozen embeddings.

Each class owns a projection ``W_c`` (centroid_size x embed_dim), a centroid
``e_c`` kept as an exponential moving average of projected class members,
and a learnable length scale ``sigma_c``.  The kernel is

    K_c(z) = exp(-||W_c z - e_c||^2 / (2 * centroid_size * sigma_c^2))

and training minimises the summed one-vs-all binary cross-entropy plus a
two-sided gradient penalty ``lambda * (||d/dz sum_c K_c(z)||^2 - 1)^2``.
The penalty's parameter gradient is derived by hand (no autograd).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError, TrainingDivergedError
from ..nnkit import Adam, PlateauSchedule

CENTROID_SIZES = (32, 64, 128, 256)
BCE_LOG_FLOOR = -100.0  # log(1 - K) floor, as in common BCE implementations
MIN_SIGMA = 1e-4
INITIAL_COUNT = 13.0


@dataclass(frozen=True)
class DuqHyperparams:
    one_minus_gamma: float = 0.01
    centroid_size: int = 64
    penalty: float = 1e-3
    sigma_init: float = 0.1
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_epochs: int = 200
    es_patience: int = 20
    lr_patience: int = 5

    def __post_init__(self):
        if not 0.0 <= self.one_minus_gamma < 1.0:
            raise ConfigError("one_minus_gamma must lie in [0, 1)")
        if self.centroid_size < 1:
            raise ConfigError("centroid_size must be >= 1")
        if self.penalty < 0:
            raise ConfigError("penalty must be nonnegative")
        if not self.sigma_init > 0 or not self.learning_rate > 0:
            raise ConfigError("sigma_init and learning_rate must be positive")

    @property
    def gamma(self):
        return 1.0 - self.one_minus_gamma


@dataclass
class DuqHead:
    W: np.ndarray          # (C, m, d)
    log_sigma: np.ndarray  # (C,)
    counts: np.ndarray     # N_c, (C,)
    sums: np.ndarray       # m_c, (C, m)
    hp: DuqHyperparams
    sigma_clamps: int = 0
    training_log: list = field(default_factory=list)

    @property
    def centroids(self):
        return self.sums / self.counts[:, None]

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def centroid_size(self):
        return self.W.shape[1]

    @property
    def embed_dim(self):
        return self.W.shape[2]

    @property
    def n_classes(self):
        return self.W.shape[0]

    def update_centroids(self, z, y):
        """One EMA step: ``N <- g N + (1-g) n_c``, ``m <- g m + (1-g) sum W_c z_i``."""
        g = self.hp.gamma
        onehot = np.eye(self.n_classes)[y]
        proj = project(self.W, z)                            # (C, n, m)
        batch_sums = np.matmul(onehot.T[:, None, :], proj)[:, 0, :]
        self.counts = g * self.counts + (1.0 - g) * onehot.sum(axis=0)
        self.sums = g * self.sums + (1.0 - g) * batch_sums


def project(W, z):
    """``W_c z`` for every class and sample, shape ``(C, n, m)``."""
    return np.matmul(z, W.transpose(0, 2, 1))


def kernel_sq_distances(W, centroids, z):
    """``||W_c z - e_c||^2`` as ``(C, n)``, plus the ``(C, n, m)`` differences."""
    diff = project(W, z) - centroids[:, None, :]
    return np.einsum("cnm,cnm->cn", diff, diff), diff


def duq_kernels(head, z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != head.embed_dim:
        raise ShapeError(f"embedding width {z.shape[1]} != head width {head.embed_dim}")
    sq, _ = kernel_sq_distances(head.W, head.centroids, z)
    scale = 2.0 * head.centroid_size * head.sigma**2
    return np.exp(-sq.T / scale)


def score_duq(head, z):
    """``-max_c K_c(z)``: -1 at a centroid, approaching 0 far from all of them."""
    single = np.asarray(z).ndim == 1
    score = -duq_kernels(head, z).max(axis=1)
    return float(score[0]) if single else score


def duq_loss_and_grads(W, log_sigma, centroids, z, y, penalty):
    """Loss and gradients w.r.t. ``W`` and ``log_sigma`` with centroids held fixed.

    Loss = mean over samples of [sum_c BCE(K_c, y==c)] + penalty * mean (||g||^2 - 1)^2,
    where g = d/dz sum_c K_c(z).
    """
    n = len(z)
    C, m, _ = W.shape
    onehot = np.eye(C)[y].T                         # (C, n)
    sq, diff = kernel_sq_distances(W, centroids, z)
    s = (2.0 * m * np.exp(2.0 * log_sigma))[:, None]
    q = sq / s                                      # -log K, (C, n)
    K = np.exp(-q)

    # BCE in terms of q: positive class -> q; negatives -> -log(1 - exp(-q)), floored
    with np.errstate(divide="ignore"):
        log1mK = np.log(-np.expm1(-q))
    floored = log1mK < BCE_LOG_FLOOR
    log1mK = np.where(floored, BCE_LOG_FLOOR, log1mK)
    loss = np.sum(onehot * q - (1.0 - onehot) * log1mK) / n
    with np.errstate(divide="ignore", over="ignore"):
        neg_grad = np.where(floored, 0.0, -1.0 / np.expm1(q))
    dq = (onehot + (1.0 - onehot) * neg_grad) / n    # dLoss/dq

    # q depends on W through diff and on log_sigma through s
    coef_z = dq * (2.0 / s)                         # multiplies diff z^T
    gls = np.sum(dq * (-2.0 * q), axis=1)
    if penalty > 0:
        a = -2.0 * K / s                            # dK/d(sq)
        t = np.matmul(diff, W)                      # W_c^T diff, (C, n, d)
        g = np.einsum("cn,cnd->nd", a, t)           # d/dz sum_c K_c
        r = np.sum(g * g, axis=1) - 1.0
        loss += penalty * np.sum(r * r) / n
        Q = (4.0 * penalty / n) * r[:, None] * g    # dP/dg, (n, d)
        qt = np.einsum("nd,cnd->cn", Q, t)
        # via a = -2K/s: da/dW = -a (2/s) diff z^T and da/dlog_sigma = 2a(q - 1)
        coef_z = coef_z + qt * (-a) * (2.0 / s)
        gls = gls + np.sum(qt * 2.0 * a * (q - 1.0), axis=1)
        # via t: a * (diff Q^T + (W_c Q) z^T)
        lhs = coef_z[:, :, None] * diff + a[:, :, None] * project(W, Q)
        gW = np.matmul(lhs.transpose(0, 2, 1), z)
        gW += np.matmul((a[:, :, None] * diff).transpose(0, 2, 1), Q)
    else:
        gW = np.matmul((coef_z[:, :, None] * diff).transpose(0, 2, 1), z)
    return float(loss), gW, gls


def bce_loss(head, z, y):
    sq, _ = kernel_sq_distances(head.W, head.centroids, z)
    q = sq / (2.0 * head.centroid_size * head.sigma**2)[:, None]
    onehot = np.eye(head.n_classes)[y].T
    with np.errstate(divide="ignore"):
        log1mK = np.maximum(np.log(-np.expm1(-q)), BCE_LOG_FLOOR)
    return float(np.sum(onehot * q - (1.0 - onehot) * log1mK) / len(z))


def init_head(z, y, n_classes, hp, rng):
    """Random projections; centroids start at the class means of the initial projections."""
    d = z.shape[1]
    m = hp.centroid_size
    W = rng.standard_normal((n_classes, m, d)) / math.sqrt(d)
    counts = np.full(n_classes, INITIAL_COUNT)
    proj = project(W, z)
    means = np.zeros((n_classes, m))
    for c in range(n_classes):
        members = proj[c, y == c]
        if len(members):
            means[c] = members.mean(axis=0)
    head = DuqHead(W=W, log_sigma=np.full(n_classes, math.log(hp.sigma_init)),
                   counts=counts, sums=means * INITIAL_COUNT, hp=hp)
    return head


def fit_duq_head(embeddings, labels, hp, rng, n_classes=None, val=None):
    """Train the head with Adam and plateau early stopping on validation BCE.

    ``val`` is an optional ``(embeddings, labels)`` pair; without it the
    training set doubles as the validation set.  Returns the best-validation head.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.intp)
    if len(z) == 0:
        raise ConfigError("DUQ head needs training embeddings")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    zv, yv = (z, y) if val is None else (np.asarray(val[0], dtype=np.float64),
                                         np.asarray(val[1]).astype(np.intp))
    head = init_head(z, y, n_classes, hp, rng)
    params = {"W": head.W, "log_sigma": head.log_sigma}
    opt = Adam(params, hp.learning_rate)
    sched = PlateauSchedule(hp.learning_rate, hp.es_patience, hp.lr_patience)
    floor = math.log(MIN_SIGMA)
    best = copy.deepcopy(head)
    log = []
    for epoch in range(1, hp.max_epochs + 1):
        opt.lr = sched.lr
        order = rng.permutation(len(z))
        total = 0.0
        for start in range(0, len(z), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, gW, gls = duq_loss_and_grads(head.W, head.log_sigma, head.centroids,
                                               z[idx], y[idx], hp.penalty)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, "DUQ loss became NaN")
            total += loss * len(idx)
            opt.step(params, {"W": gW, "log_sigma": gls})
            low = params["log_sigma"] < floor
            if np.any(low):
                params["log_sigma"][low] = floor
                head.sigma_clamps += int(low.sum())
            head.update_centroids(z[idx], y[idx])
        val_loss = bce_loss(head, zv, yv)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "DUQ validation loss became NaN")
        log.append((epoch, total / len(z), val_loss))
        improved, stop = sched.step(val_loss)
        if improved:
            best = copy.deepcopy(head)
        if stop:
            break
    best.training_log = log
    best.sigma_clamps = head.sigma_clamps
    return best
