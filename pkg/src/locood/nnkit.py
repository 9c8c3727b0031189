"""Small dense classifier used as the feature extractor.

Architecture: flatten -> linear(hidden1) -> ReLU -> dropout -> spectral-normalised
linear(embed) -> ReLU -> linear(logits).  Everything is plain numpy with
hand-written backpropagation so that gradients can be checked against finite
differences and runs are bit-reproducible from a seed.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingDivergedError, ValidationError

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class ExtractorConfig:
    input_dim: int
    n_classes: int
    hidden1_dim: int = 64
    embed_dim: int = 32
    dropout_p: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    es_patience: int = 20
    lr_patience: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden1_dim", "embed_dim", "batch_size", "max_epochs",
                     "es_patience", "lr_patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")


@dataclass
class ForwardOutput:
    logits: np.ndarray
    embedding: np.ndarray


@dataclass
class SpectralState:
    u: np.ndarray
    v: np.ndarray
    sigma: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


@dataclass
class ExtractorModel:
    """Weights of a trained (or freshly initialised) extractor.

    ``W2`` is the raw penultimate weight; the layer actually applies
    ``W2 / spectral.sigma``.  Treat instances as immutable once training
    returns them.
    """

    cfg: ExtractorConfig
    params: dict
    spectral: SpectralState
    training_log: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def input_dim(self):
        return self.params["W1"].shape[0]

    @property
    def embed_dim(self):
        return self.params["W3"].shape[0]

    @property
    def n_classes(self):
        return self.params["W3"].shape[1]

    def architecture(self):
        return tuple(self.params[name].shape for name in PARAM_NAMES)

    def effective_w2(self):
        return self.params["W2"] / self.spectral.sigma

    def embed(self, x, rng=None):
        """Penultimate (post-ReLU) embedding.  ``rng`` switches dropout on."""
        p = self.params
        h1 = np.maximum(x @ p["W1"] + p["b1"], 0.0)
        if rng is not None and self.cfg.dropout_p > 0:
            h1 = h1 * _dropout_mask(rng, h1.shape, self.cfg.dropout_p)
        return np.maximum(h1 @ self.effective_w2() + p["b2"], 0.0)

    def logits_from_embedding(self, z):
        return z @ self.params["W3"] + self.params["b3"]


def init_model(cfg, rng):
    """PyTorch-style uniform(+-1/sqrt(fan_in)) initialisation."""

    def linear(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                rng.uniform(-bound, bound, size=fan_out))

    W1, b1 = linear(cfg.input_dim, cfg.hidden1_dim)
    W2, b2 = linear(cfg.hidden1_dim, cfg.embed_dim)
    W3, b3 = linear(cfg.embed_dim, cfg.n_classes)
    u = rng.standard_normal(cfg.hidden1_dim)
    v = rng.standard_normal(cfg.embed_dim)
    spectral = SpectralState(u / np.linalg.norm(u), v / np.linalg.norm(v), 1.0)
    spectral = power_iteration(W2, spectral, 1)
    params = dict(W1=W1, b1=b1, W2=W2, b2=b2, W3=W3, b3=b3)
    return ExtractorModel(cfg=cfg, params=params, spectral=spectral)


def power_iteration(W, state, n_iter=1, eps=1e-12):
    """Refresh the top singular pair estimate of ``W`` (rows index ``u``)."""
    u, v = state.u, state.v
    for _ in range(n_iter):
        v = W.T @ u
        v = v / max(np.linalg.norm(v), eps)
        u = W @ v
        u = u / max(np.linalg.norm(u), eps)
    return SpectralState(u, v, float(u @ W @ v))


def spectral_normalize(W, n_iter=50, rng=None):
    """Return ``W / sigma_max`` estimated with ``n_iter`` power iterations."""
    rng = np.random.default_rng(0) if rng is None else rng
    u = rng.standard_normal(W.shape[0])
    v = rng.standard_normal(W.shape[1])
    state = power_iteration(W, SpectralState(u / np.linalg.norm(u), v / np.linalg.norm(v), 1.0),
                            n_iter)
    return W / state.sigma


def _dropout_mask(rng, shape, p):
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(model, x, mode=DETERMINISTIC, rng=None, clamp=None):
    """Run the extractor on one sample (1-D) or a batch (2-D).

    ``mode="stochastic"`` needs a caller-owned ``rng`` and keeps dropout
    active.  ``clamp`` (a ReAct limit) truncates the embedding before the
    logits are recomputed from it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.input_dim:
        raise ShapeError(f"expected input of width {model.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("input contains non-finite values")
    if mode == STOCHASTIC:
        if rng is None:
            raise ConfigError("stochastic forward needs an rng")
        z = model.embed(x, rng)
    elif mode == DETERMINISTIC:
        z = model.embed(x)
    else:
        raise ConfigError(f"unknown forward mode {mode!r}")
    if clamp is not None:
        z = np.minimum(z, clamp)
    return ForwardOutput(logits=model.logits_from_embedding(z), embedding=z)


def softmax(logits, axis=-1):
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValidationError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError("softmax input contains non-finite values")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats, with 0 * log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValidationError("entropy of an empty vector")
    if np.any(p < 0):
        raise ValidationError("probability vector has a negative entry")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-6):
        raise ValidationError("probability vector does not sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


def cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(labels)), labels]))


def loss_and_grads(params, spectral, x, y, mask=None):
    """Mean cross-entropy and its gradient with respect to every parameter.

    ``spectral`` supplies the (fixed) power-iteration vectors; the gradient
    flows through ``sigma = u^T W2 v`` as in standard spectral normalisation.
    ``mask`` is an already-scaled dropout mask for the hidden layer, or None.
    """
    n = x.shape[0]
    u, v = spectral.u, spectral.v
    sigma = float(u @ params["W2"] @ v)
    W2n = params["W2"] / sigma

    a1 = x @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    h1d = h1 * mask if mask is not None else h1
    a2 = h1d @ W2n + params["b2"]
    z = np.maximum(a2, 0.0)
    logits = z @ params["W3"] + params["b3"]

    probs = softmax(logits)
    loss = cross_entropy(logits, y)

    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {"W3": z.T @ dlogits, "b3": dlogits.sum(axis=0)}
    da2 = (dlogits @ params["W3"].T) * (a2 > 0)
    dW2n = h1d.T @ da2
    grads["b2"] = da2.sum(axis=0)
    grads["W2"] = dW2n / sigma - (np.sum(dW2n * params["W2"]) / sigma**2) * np.outer(u, v)
    dh1 = da2 @ W2n.T
    if mask is not None:
        dh1 = dh1 * mask
    da1 = dh1 * (a1 > 0)
    grads["W1"] = x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class PlateauSchedule:
    """Early stopping plus learning-rate halving on a validation-loss plateau.

    ``step`` returns ``(improved, stop)``.  The learning rate is halved each
    time ``lr_patience`` consecutive epochs pass without a new best, and
    training stops after ``es_patience`` such epochs.
    """

    def __init__(self, lr, es_patience=20, lr_patience=5, factor=0.5):
        self.lr = lr
        self.es_patience = es_patience
        self.lr_patience = lr_patience
        self.factor = factor
        self.best = np.inf
        self.since_best = 0
        self._lr_bad = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = 0
            self._lr_bad = 0
            return True, False
        self.since_best += 1
        self._lr_bad += 1
        if self._lr_bad >= self.lr_patience:
            self.lr *= self.factor
            self._lr_bad = 0
        return False, self.since_best >= self.es_patience


def _check_split(x, y, cfg, name):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or len(x) == 0:
        raise ConfigError(f"{name} split is empty")
    if x.shape[1] != cfg.input_dim:
        raise ShapeError(f"{name} split has width {x.shape[1]}, expected {cfg.input_dim}")
    if len(y) != len(x):
        raise ConfigError(f"{name} split has {len(x)} samples but {len(y)} labels")
    if np.any(y < 0) or np.any(y >= cfg.n_classes):
        raise ConfigError(f"{name} labels outside [0, {cfg.n_classes})")
    return x, y.astype(np.intp)


def train_extractor(train, val, cfg, refine_iters=50):
    """Train with Adam on shuffled mini-batches; return the best-validation weights.

    ``train`` and ``val`` are ``(features, labels)`` pairs.  One power
    iteration runs per optimisation step; after restoring the best epoch,
    ``refine_iters`` extra iterations tighten the singular-value estimate.
    """
    x, y = _check_split(*train, cfg, "train")
    xv, yv = _check_split(*val, cfg, "val")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg, rng)
    params, spectral = model.params, model.spectral
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    sched = PlateauSchedule(cfg.learning_rate, cfg.es_patience, cfg.lr_patience)
    best = (copy.deepcopy(params), spectral, 0)
    log = []
    n = len(x)
    for epoch in range(1, cfg.max_epochs + 1):
        opt.lr = sched.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            spectral = power_iteration(params["W2"], spectral, 1)
            mask = None
            if cfg.dropout_p > 0:
                mask = _dropout_mask(rng, (len(idx), cfg.hidden1_dim), cfg.dropout_p)
            loss, grads = loss_and_grads(params, spectral, x[idx], y[idx], mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            total += loss * len(idx)
            opt.step(params, grads)
        spectral = SpectralState(spectral.u, spectral.v,
                                 float(spectral.u @ params["W2"] @ spectral.v))
        current = ExtractorModel(cfg, params, spectral)
        val_loss = cross_entropy(forward(current, xv).logits, yv)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "validation loss became NaN")
        log.append(EpochRecord(epoch, total / n, val_loss, opt.lr))
        improved, stop = sched.step(val_loss)
        if improved:
            best = (copy.deepcopy(params), spectral, epoch)
        if stop:
            break
    best_params, best_spectral, best_epoch = best
    best_spectral = power_iteration(best_params["W2"], best_spectral, refine_iters)
    return ExtractorModel(cfg=cfg, params=best_params, spectral=best_spectral,
                          training_log=log, best_epoch=best_epoch)


def predict_proba(model, x, clamp=None):
    return softmax(forward(model, x, clamp=clamp).logits)


def accuracy(model, x, y):
    return float(np.mean(np.argmax(forward(model, x).logits, axis=1) == np.asarray(y)))
