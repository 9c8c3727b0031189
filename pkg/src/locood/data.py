"""Epoched datasets: synthetic generation and the on-disk directory format.

Directory layout::

    manifest.json   metadata (format_version 1)
    epochs.f32      float32 little-endian, trial x channel x sample, row-major
    labels.u32      uint32 little-endian, one label per trial

Data is expected to be band-pass filtered before conversion; nothing here
filters or rejects artifacts.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DataFormatError, LabelRangeError, MagicVersionError,
                     SizeMismatchError, ValidationError)

FORMAT_VERSION = 1
EPOCHS_FILE = "epochs.f32"
LABELS_FILE = "labels.u32"
MODES = ("gaussian_clusters", "oscillatory")
GEOMETRIES = ("far", "overlapping")


@dataclass
class EpochedDataset:
    subject: str
    class_names: list
    epochs: np.ndarray  # (n_trials, n_channels, n_samples)
    labels: np.ndarray
    sampling_rate_hz: float = 250.0

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.epochs.ndim != 3:
            raise ValidationError(f"epochs must be 3-D, got shape {self.epochs.shape}")
        if len(self.labels) != len(self.epochs):
            raise ValidationError("labels and epochs disagree on the number of trials")
        if np.any(self.labels < 0) or np.any(self.labels >= len(self.class_names)):
            raise LabelRangeError(f"labels must lie in [0, {len(self.class_names)})")
        if not np.all(np.isfinite(self.epochs)):
            raise ValidationError("epochs contain non-finite values")
        if not self.sampling_rate_hz > 0:
            raise ValidationError("sampling rate must be positive")

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def features(self):
        """Trials flattened channel-major to ``(n_trials, n_channels * n_samples)``."""
        return self.epochs.reshape(len(self.epochs), -1).astype(np.float64)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class SynthConfig:
    mode: str = "gaussian_clusters"
    n_classes: int = 4
    trials_per_class: int = 100
    n_channels: int = 4
    n_samples: int = 16
    class_separation: float = 10.0
    noise_std: float = 1.0
    ood_geometry: str = "far"
    sampling_rate_hz: float = 128.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ood_geometry not in GEOMETRIES:
            raise ConfigError(f"ood_geometry must be one of {GEOMETRIES}, got {self.ood_geometry!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.trials_per_class < 8:
            raise ConfigError("trials_per_class must be >= 8")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be nonnegative")
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be positive")
        if self.n_channels < 1 or self.n_samples < 1:
            raise ConfigError("n_channels and n_samples must be >= 1")


def simplex_vertices(n, dim):
    """``n`` points in ``dim`` coordinates with unit pairwise distance, centred at 0."""
    if n - 1 > dim:
        raise ConfigError(f"{n} equidistant points need at least {n - 1} dimensions")
    if n == 1:
        return np.zeros((1, dim))
    centred = np.eye(n) - 1.0 / n
    # orthonormal basis of the (n-1)-dim span of the centred basis vectors
    q, _ = np.linalg.qr(centred[:, : n - 1])
    coords = centred @ q
    coords /= np.sqrt(2.0)  # rows of the identity are sqrt(2) apart
    out = np.zeros((n, dim))
    out[:, : n - 1] = coords
    return out


def class_means(cfg, feature_dim, rng):
    """Cluster centres embedded in feature space by a random orthonormal frame."""
    spacing = cfg.class_separation * cfg.noise_std
    c = cfg.n_classes
    if c - 1 > feature_dim:
        raise ConfigError(f"n_classes={c} infeasible for feature dimension {feature_dim}")
    k = c - 1  # classes on the regular simplex
    local = np.zeros((c, max(c - 1, 1)))
    if k > 1:
        local[:k, : k - 1] = simplex_vertices(k, k - 1)
    if cfg.ood_geometry == "far":
        local[c - 1, c - 2] = 2.0
    else:
        local[c - 1] = local[0]
    frame, _ = np.linalg.qr(rng.standard_normal((feature_dim, local.shape[1])))
    return spacing * local @ frame.T


def generate_synthetic(cfg, subject="S0"):
    rng = np.random.default_rng(cfg.seed)
    c, t = cfg.n_classes, cfg.trials_per_class
    shape = (cfg.n_channels, cfg.n_samples)
    labels = np.repeat(np.arange(c), t)
    if cfg.mode == "gaussian_clusters":
        feature_dim = cfg.n_channels * cfg.n_samples
        means = class_means(cfg, feature_dim, rng)
        noise = rng.standard_normal((c * t, feature_dim)) * cfg.noise_std
        epochs = (means[labels] + noise).reshape((c * t,) + shape)
    else:
        epochs = _oscillatory(cfg, labels, rng)
    perm = rng.permutation(c * t)
    return EpochedDataset(subject=subject, class_names=[f"class{i}" for i in range(c)],
                          epochs=epochs[perm].astype(np.float32), labels=labels[perm],
                          sampling_rate_hz=cfg.sampling_rate_hz)


def _oscillatory(cfg, labels, rng):
    n = len(labels)
    time = np.arange(cfg.n_samples) / cfg.sampling_rate_hz
    epochs = rng.standard_normal((n, cfg.n_channels, cfg.n_samples)) * cfg.noise_std
    amplitude = cfg.class_separation * cfg.noise_std
    per_class = max(1, cfg.n_channels // cfg.n_classes)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    for c in range(cfg.n_classes):
        # overlapping geometry: the last class copies class 0's signature
        source = 0 if (cfg.ood_geometry == "overlapping" and c == cfg.n_classes - 1) else c
        freq = 8.0 + 4.0 * source
        chans = [(source * per_class + k) % cfg.n_channels for k in range(per_class)]
        rows = np.flatnonzero(labels == c)
        wave = amplitude * np.sin(2 * np.pi * freq * time[None, :] + phases[rows, None])
        for ch in chans:
            epochs[rows, ch, :] += wave
    return epochs


def generate_subjects(cfg, n_subjects):
    """One dataset per subject; subject ``i`` uses seed ``cfg.seed + i``."""
    from dataclasses import replace

    return [generate_synthetic(replace(cfg, seed=cfg.seed + i), subject=f"S{i}")
            for i in range(n_subjects)]


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, ch, ns = dataset.epochs.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "subject": dataset.subject,
        "class_names": list(dataset.class_names),
        "n_trials": int(n),
        "n_channels": int(ch),
        "n_samples": int(ns),
        "sampling_rate_hz": float(dataset.sampling_rate_hz),
        "epochs_file": EPOCHS_FILE,
        "labels_file": LABELS_FILE,
        "dtype": "f32le",
        "layout": "trial,channel,sample",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    np.ascontiguousarray(dataset.epochs, dtype="<f4").tofile(path / EPOCHS_FILE)
    np.ascontiguousarray(dataset.labels, dtype="<u4").tofile(path / LABELS_FILE)
    return path


def load_dataset(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataFormatError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest.json in {path} is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise MagicVersionError(
            f"unsupported format_version {manifest.get('format_version')!r} in {path}")
    if manifest.get("dtype") != "f32le" or manifest.get("layout") != "trial,channel,sample":
        raise MagicVersionError(f"unsupported dtype/layout in {path}")
    try:
        n = int(manifest["n_trials"])
        ch = int(manifest["n_channels"])
        ns = int(manifest["n_samples"])
        class_names = list(manifest["class_names"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"manifest in {path} is missing or has a bad field: {exc}") from exc
    epochs_path = path / manifest.get("epochs_file", EPOCHS_FILE)
    labels_path = path / manifest.get("labels_file", LABELS_FILE)
    _expect_size(epochs_path, n * ch * ns * 4)
    _expect_size(labels_path, n * 4)
    epochs = np.fromfile(epochs_path, dtype="<f4").reshape(n, ch, ns)
    labels = np.fromfile(labels_path, dtype="<u4")
    if np.any(labels >= len(class_names)):
        raise LabelRangeError(f"label {int(labels.max())} out of range for "
                              f"{len(class_names)} classes in {labels_path}")
    return EpochedDataset(subject=str(manifest.get("subject", path.name)), class_names=class_names,
                          epochs=epochs, labels=labels.astype(np.int64),
                          sampling_rate_hz=float(manifest["sampling_rate_hz"]))


def _expect_size(path, expected):
    try:
        actual = os.path.getsize(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"missing data file {path}") from exc
    if actual != expected:
        raise SizeMismatchError(f"{path.name}: expected {expected} bytes, found {actual}")
