"""Leave-one-class-out experiment loop.

For every retained subject and every choice of OOD class, a cell is built
(stratified 75/10/15 split of the ID classes, a 1:1 OOD test set, z-score
normalisation fitted on train), an extractor is trained, and each enabled
scorer is evaluated by AUROC.  Hyperparameters for d-KNN and DUQ are tuned on
the first subject, which is then left out of the results.
"""
from __future__ import annotations

import hashlib
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics, nnkit
from .errors import CellError, ConfigError, LocoodError, SplitError, TuningError
from .scorers import (METHODS, TUNED_METHODS, DuqHyperparams, ScorerConfig, duq_kernels,
                      ensemble_probs, fit_ddu, fit_dknn, fit_duq_head, knn_distance_table,
                      mc_dropout_probs, react_fit, score_ddu, score_dknn, score_duq,
                      score_energy, score_softmax)
from .nnkit import entropy

log = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.75, 0.10, 0.15)
STD_FLOOR = 1e-8
REACT_MODES = {"off": (False,), "on": (True,), "both": (False, True)}


@dataclass(frozen=True)
class DuqSearchSpace:
    one_minus_gamma: tuple = (1e-3, 1e-1)
    centroid_sizes: tuple = (32, 64, 128, 256)
    penalty: tuple = (1e-5, 5e-2)

    def sample(self, rng):
        omg = math.exp(rng.uniform(math.log(self.one_minus_gamma[0]),
                                   math.log(self.one_minus_gamma[1])))
        size = int(self.centroid_sizes[rng.integers(len(self.centroid_sizes))])
        pen = math.exp(rng.uniform(math.log(self.penalty[0]), math.log(self.penalty[1])))
        return omg, size, pen


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple = METHODS
    react: str = "off"
    react_limit_override: float | None = None
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    extractor: nnkit.ExtractorConfig = field(
        default_factory=lambda: nnkit.ExtractorConfig(input_dim=1, n_classes=2))
    dknn_k_cap: int | None = None
    duq_trials: int = 30
    duq_search: DuqSearchSpace = field(default_factory=DuqSearchSpace)
    duq_training: DuqHyperparams = field(default_factory=DuqHyperparams)
    master_seed: int = 0
    id_class_count: int | None = None
    exclude_first_subject: bool | None = None
    ood_classes: tuple | None = None

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if not self.methods:
            raise ConfigError("at least one method must be enabled")
        if self.react not in REACT_MODES:
            raise ConfigError(f"react must be one of {tuple(REACT_MODES)}, got {self.react!r}")
        if self.duq_trials < 1:
            raise ConfigError("duq_trials must be >= 1")
        if self.id_class_count is not None and self.id_class_count < 2:
            raise ConfigError("id_class_count must be >= 2")

    @property
    def tuned_methods(self):
        return tuple(m for m in self.methods if m in TUNED_METHODS)

    @property
    def excludes_first_subject(self):
        if self.exclude_first_subject is None:
            return bool(self.tuned_methods)
        return self.exclude_first_subject


@dataclass
class ResultRow:
    subject: str
    ood_class: str
    id_classes: str
    method: str
    react: bool
    auroc: float
    on_task_auroc: float
    seed: int
    wall_time: float = 0.0

    def sort_key(self):
        return (self.subject, self.ood_class, self.id_classes, self.method, self.react)


@dataclass
class LocoCell:
    subject: str
    id_classes: tuple
    ood_class: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_id_test: np.ndarray
    y_id_test: np.ndarray
    x_ood_test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    seed: int
    indices: dict = field(default_factory=dict)

    @property
    def x_test(self):
        return np.concatenate([self.x_id_test, self.x_ood_test])

    @property
    def is_ood(self):
        return np.r_[np.zeros(len(self.x_id_test), bool), np.ones(len(self.x_ood_test), bool)]

    @property
    def n_id_classes(self):
        return len(self.id_classes)


def stable_seed(*parts):
    """64-bit seed from a hash of ``parts``; independent of process and schedule."""
    digest = hashlib.blake2b(repr(tuple(parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def apportion(n, fractions):
    """Largest-remainder split of ``n`` items; ties go to the earlier fraction."""
    raw = [round(n * f, 9) for f in fractions]
    counts = [math.floor(r) for r in raw]
    left = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def stratified_split(labels, fractions=SPLIT_FRACTIONS, seed=0, class_names=None):
    """Per-class largest-remainder split into index arrays, one per fraction."""
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 3:
            name = class_names[c] if class_names is not None else c
            raise SplitError(f"class {name} has {len(members)} trials; at least 3 are required")
        members = rng.permutation(members)
        start = 0
        for part, count in zip(parts, apportion(len(members), fractions)):
            part.append(members[start:start + count])
            start += count
    return tuple(np.sort(np.concatenate(p)).astype(np.intp) for p in parts)


def enumerate_cells(n_classes, id_class_count=None, ood_classes=None):
    """``(id_classes, ood_class)`` pairs: every OOD class with every ID subset of the given size."""
    k = n_classes - 1 if id_class_count is None else id_class_count
    if not 2 <= k <= n_classes - 1:
        raise ConfigError(f"id_class_count={k} impossible with {n_classes} classes")
    oods = range(n_classes) if ood_classes is None else ood_classes
    cells = []
    for ood in oods:
        if not 0 <= ood < n_classes:
            raise ConfigError(f"ood class {ood} out of range")
        rest = [c for c in range(n_classes) if c != ood]
        cells.extend((tuple(ids), ood) for ids in itertools.combinations(rest, k))
    return cells


def build_loco_cell(dataset, id_classes, ood_class, seed):
    id_classes = tuple(int(c) for c in id_classes)
    if ood_class in id_classes:
        raise CellError(f"OOD class {ood_class} is also an ID class")
    labels = dataset.labels
    x = dataset.features
    id_pool = np.flatnonzero(np.isin(labels, id_classes))
    ood_pool = np.flatnonzero(labels == ood_class)
    if len(ood_pool) == 0:
        raise CellError(f"OOD class {dataset.class_names[ood_class]} has no trials")
    rng = np.random.default_rng(stable_seed(seed, "cell"))
    tr, va, te = stratified_split(labels[id_pool], SPLIT_FRACTIONS, stable_seed(seed, "split"),
                                  dataset.class_names)
    train_idx, val_idx, test_idx = id_pool[tr], id_pool[va], id_pool[te]
    if len(ood_pool) >= len(test_idx):
        ood_idx = np.sort(rng.choice(ood_pool, size=len(test_idx), replace=False))
    else:
        ood_idx = ood_pool
        test_idx = np.sort(rng.choice(test_idx, size=len(ood_pool), replace=False))
    remap = np.full(dataset.n_classes, -1)
    remap[list(id_classes)] = np.arange(len(id_classes))

    mean = x[train_idx].mean(axis=0)
    std = np.maximum(x[train_idx].std(axis=0), STD_FLOOR)

    def norm(idx):
        return (x[idx] - mean) / std

    return LocoCell(subject=dataset.subject, id_classes=id_classes, ood_class=int(ood_class),
                    x_train=norm(train_idx), y_train=remap[labels[train_idx]],
                    x_val=norm(val_idx), y_val=remap[labels[val_idx]],
                    x_id_test=norm(test_idx), y_id_test=remap[labels[test_idx]],
                    x_ood_test=norm(ood_idx), mean=mean, std=std, seed=seed,
                    indices=dict(train=train_idx, val=val_idx, id_test=test_idx, ood_test=ood_idx))


def cell_seed(master_seed, subject, ood_class, id_classes):
    return stable_seed(master_seed, subject, int(ood_class), tuple(int(c) for c in id_classes))


def train_members(cell, cfg, n_members):
    template = replace(cfg.extractor, input_dim=cell.x_train.shape[1],
                       n_classes=cell.n_id_classes)
    models = []
    for i in range(n_members):
        ext_cfg = replace(template, seed=stable_seed(cell.seed, "member", i))
        models.append(nnkit.train_extractor((cell.x_train, cell.y_train),
                                            (cell.x_val, cell.y_val), ext_cfg))
    return models


def k_max_for(cell):
    counts = np.bincount(cell.y_train, minlength=cell.n_id_classes)
    return max(1, int(math.floor(counts.mean())))


def _tuning_cell(dataset, id_classes, ood_class, cfg):
    seed = cell_seed(cfg.master_seed, dataset.subject, ood_class, id_classes)
    cell = build_loco_cell(dataset, id_classes, ood_class, seed)
    model = train_members(cell, cfg, 1)[0]
    return cell, model


def tune_dknn_k(dataset, id_classes, ood_class, cfg, prepared=None):
    """Sweep k in 1..k_max on the tuning cell; largest AUROC wins, ties go to smaller k."""
    cell, model = prepared or _tuning_cell(dataset, id_classes, ood_class, cfg)
    k_max = k_max_for(cell)
    if cfg.dknn_k_cap is not None:
        k_max = min(k_max, cfg.dknn_k_cap)
    k_max = min(k_max, len(cell.x_train))
    if k_max == 1:
        return 1, [1.0]
    train_z = nnkit.forward(model, cell.x_train).embedding
    index = fit_dknn(train_z, 1)
    table = knn_distance_table(index, nnkit.forward(model, cell.x_test).embedding, k_max)
    aucs = [metrics.auroc(table[:, k], cell.is_ood) for k in range(k_max)]
    return int(np.argmax(aucs)) + 1, aucs


def tune_duq(dataset, id_classes, ood_class, cfg, rng=None, prepared=None):
    """Seeded random search over the DUQ space; returns the best hyperparameters."""
    cell, model = prepared or _tuning_cell(dataset, id_classes, ood_class, cfg)
    if rng is None:
        rng = np.random.default_rng(stable_seed(cfg.master_seed, "duq-search", int(ood_class),
                                                tuple(id_classes)))
    train_z = nnkit.forward(model, cell.x_train).embedding
    val_z = nnkit.forward(model, cell.x_val).embedding
    test_z = nnkit.forward(model, cell.x_test).embedding
    best, best_auc, diagnostics = None, -np.inf, []
    for trial in range(cfg.duq_trials):
        omg, size, pen = cfg.duq_search.sample(rng)
        hp = replace(cfg.duq_training, one_minus_gamma=omg, centroid_size=size, penalty=pen)
        try:
            head = fit_duq_head(train_z, cell.y_train, hp,
                                np.random.default_rng(stable_seed(cell.seed, "duq-trial", trial)),
                                n_classes=cell.n_id_classes, val=(val_z, cell.y_val))
            auc = metrics.auroc(score_duq(head, test_z), cell.is_ood)
        except (LocoodError, FloatingPointError, np.linalg.LinAlgError) as exc:
            diagnostics.append((trial, hp, repr(exc)))
            continue
        diagnostics.append((trial, hp, auc))
        if auc > best_auc:
            best, best_auc = hp, auc
    if best is None:
        raise TuningError(f"all {cfg.duq_trials} DUQ trials failed", diagnostics)
    return best, diagnostics


@dataclass
class TunedParams:
    dknn_k: dict = field(default_factory=dict)
    duq: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "dknn_k": {_key_str(k): v for k, v in sorted(self.dknn_k.items())},
            "duq": {_key_str(k): asdict(v) for k, v in sorted(self.duq.items())},
        }

    @classmethod
    def from_json(cls, data):
        return cls(dknn_k={_parse_key(k): int(v) for k, v in data.get("dknn_k", {}).items()},
                   duq={_parse_key(k): DuqHyperparams(**v) for k, v in data.get("duq", {}).items()})


def _key_str(key):
    ids, ood = key
    return f"{ood}:" + ",".join(str(c) for c in ids)


def _parse_key(text):
    ood, ids = text.split(":")
    return tuple(int(c) for c in ids.split(",")), int(ood)


def _tune_one(args):
    dataset, id_classes, ood, cfg = args
    prepared = _tuning_cell(dataset, id_classes, ood, cfg)
    out = {}
    if "dknn" in cfg.methods:
        out["dknn"] = tune_dknn_k(dataset, id_classes, ood, cfg, prepared=prepared)[0]
    if "duq" in cfg.methods:
        out["duq"] = tune_duq(dataset, id_classes, ood, cfg, prepared=prepared)[0]
    return (id_classes, ood), out


def tune_all(cfg, first_subject, jobs=1):
    tuned = TunedParams()
    if not cfg.tuned_methods:
        return tuned
    work = [(first_subject, ids, ood, cfg)
            for ids, ood in enumerate_cells(first_subject.n_classes, cfg.id_class_count,
                                            cfg.ood_classes)]
    for key, out in _map(_tune_one, work, jobs):
        if "dknn" in out:
            tuned.dknn_k[key] = out["dknn"]
        if "duq" in out:
            tuned.duq[key] = out["duq"]
    return tuned


def _on_task(probs, labels):
    return metrics.macro_ovr_auroc(probs, labels)


def run_cell(dataset, id_classes, ood_class, cfg, tuned=None):
    """Evaluate every enabled method (and ReAct setting) on one cell."""
    started = time.perf_counter()
    tuned = tuned or TunedParams()
    key = (tuple(id_classes), int(ood_class))
    seed = cell_seed(cfg.master_seed, dataset.subject, ood_class, id_classes)
    cell = build_loco_cell(dataset, id_classes, ood_class, seed)
    n_members = cfg.scorer.ensemble_size if "deep_ensemble" in cfg.methods else 1
    models = train_members(cell, cfg, n_members)
    x_test, is_ood = cell.x_test, cell.is_ood
    n_id = len(cell.x_id_test)
    sc = cfg.scorer
    rows = []
    for react in REACT_MODES[cfg.react]:
        clamps = [None] * len(models)
        if react:
            for i, m in enumerate(models):
                if cfg.react_limit_override is not None:
                    clamps[i] = cfg.react_limit_override
                else:
                    train_emb = nnkit.forward(m, cell.x_train).embedding
                    clamps[i] = react_fit(train_emb, sc.react_percentile).limit
        model, clamp = models[0], clamps[0]
        out = nnkit.forward(model, x_test, clamp=clamp)
        probs = nnkit.softmax(out.logits)
        base_on_task = _on_task(probs[:n_id], cell.y_id_test)
        need_train_z = {"ddu", "dknn", "duq"} & set(cfg.methods)
        if need_train_z:
            train_z = nnkit.forward(model, cell.x_train, clamp=clamp).embedding
        for method in cfg.methods:
            on_task = base_on_task
            if method == "softmax":
                scores = score_softmax(out.logits, sc.softmax_baseline_mode)
            elif method == "mc_dropout":
                rng = np.random.default_rng(stable_seed(seed, "mc_dropout"))
                scores = entropy(mc_dropout_probs(model, x_test, sc.mc_passes, rng, clamp))
            elif method == "deep_ensemble":
                mean_probs = ensemble_probs(models, x_test, clamps)
                scores = entropy(mean_probs)
                on_task = _on_task(mean_probs[:n_id], cell.y_id_test)
            elif method == "energy":
                scores = score_energy(out.logits, sc.energy_temperature)
            elif method == "ddu":
                scores = score_ddu(fit_ddu(train_z, cell.y_train), out.embedding)
            elif method == "dknn":
                k = tuned.dknn_k.get(key, sc.dknn_k)
                k = min(k, len(train_z))
                scores = score_dknn(fit_dknn(train_z, k), out.embedding)
            elif method == "duq":
                hp = tuned.duq.get(key, cfg.duq_training)
                val_z = nnkit.forward(model, cell.x_val, clamp=clamp).embedding
                head = fit_duq_head(train_z, cell.y_train, hp,
                                    np.random.default_rng(stable_seed(seed, "duq")),
                                    n_classes=cell.n_id_classes, val=(val_z, cell.y_val))
                scores = score_duq(head, out.embedding)
                on_task = _on_task(duq_kernels(head, out.embedding[:n_id]), cell.y_id_test)
            rows.append(ResultRow(
                subject=dataset.subject, ood_class=dataset.class_names[ood_class],
                id_classes="+".join(dataset.class_names[c] for c in id_classes),
                method=method, react=react, auroc=metrics.auroc(scores, is_ood),
                on_task_auroc=on_task, seed=seed))
    elapsed = time.perf_counter() - started
    for r in rows:
        r.wall_time = elapsed
    return rows


@dataclass
class CellFailure:
    subject: str
    ood_class: str
    id_classes: str
    error: str


def _run_one(args):
    dataset, id_classes, ood, cfg, tuned = args
    try:
        return run_cell(dataset, id_classes, ood, cfg, tuned), None
    except Exception as exc:  # one bad cell must not sink the run
        log.warning("cell %s/%s failed: %r", dataset.subject, ood, exc)
        return [], CellFailure(dataset.subject, dataset.class_names[ood],
                               "+".join(dataset.class_names[c] for c in id_classes), repr(exc))


def _map(fn, items, jobs):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class ExperimentResult:
    rows: list
    failures: list
    tuned: TunedParams


def run_experiment(cfg, datasets, jobs=1, tuned=None):
    """Algorithm loop over subjects and OOD classes; rows come back sorted."""
    if not datasets:
        raise ConfigError("no datasets given")
    n_classes = datasets[0].n_classes
    if any(d.n_classes != n_classes for d in datasets):
        raise ConfigError("all subjects must share the same class list")
    exclude = cfg.excludes_first_subject
    if exclude and len(datasets) < 2:
        raise ConfigError("tuning consumes the first subject; at least 2 subjects are needed")
    if tuned is None:
        tuned = tune_all(cfg, datasets[0], jobs) if cfg.tuned_methods else TunedParams()
    subjects = datasets[1:] if exclude else datasets
    work = [(ds, ids, ood, cfg, tuned)
            for ds in subjects
            for ids, ood in enumerate_cells(n_classes, cfg.id_class_count, cfg.ood_classes)]
    rows, failures = [], []
    for cell_rows, failure in _map(_run_one, work, jobs):
        rows.extend(cell_rows)
        if failure is not None:
            failures.append(failure)
    if work and len(failures) == len(work):
        raise CellError(f"all {len(work)} cells failed; first error: {failures[0].error}")
    rows.sort(key=ResultRow.sort_key)
    return ExperimentResult(rows=rows, failures=failures, tuned=tuned)
