"""INI-style run configuration.

Every section and key is optional except where a subcommand needs it, but
unknown sections and keys are rejected so that a typo cannot silently fall
back to a default.  ``reference.ini`` next to this module documents them all.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .harness import DuqSearchSpace, ExperimentConfig
from .nnkit import ExtractorConfig
from .scorers import METHODS, DuqHyperparams, ScorerConfig

REFERENCE_CONFIG = Path(__file__).with_name("reference.ini")

_EXTRACTOR_KEYS = ("hidden1_dim", "embed_dim", "dropout_p", "learning_rate", "batch_size",
                   "max_epochs", "es_patience", "lr_patience", "adam_beta1", "adam_beta2",
                   "adam_eps")
_DUQ_TRAINING_KEYS = ("sigma_init", "learning_rate", "batch_size", "max_epochs", "es_patience",
                      "lr_patience")
SECTIONS = {
    "experiment": ("methods", "react", "react_limit", "master_seed", "id_class_count",
                   "exclude_first_subject", "ood_classes", "dknn_k_cap", "duq_trials"),
    "scorers": tuple(f.name for f in fields(ScorerConfig)),
    "extractor": _EXTRACTOR_KEYS,
    "duq_search": ("one_minus_gamma_min", "one_minus_gamma_max", "centroid_sizes",
                   "penalty_min", "penalty_max"),
    "duq_training": _DUQ_TRAINING_KEYS,
    "synth": ("n_subjects",) + tuple(f.name for f in fields(SynthConfig)),
    "run": ("data", "out", "format"),
}


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    synth: SynthConfig | None = None
    n_subjects: int = 0
    data_paths: list = field(default_factory=list)
    out_dir: str | None = None
    report_format: str = "md"

    def with_seed(self, seed):
        exp = replace(self.experiment, master_seed=int(seed))
        synth = replace(self.synth, seed=int(seed)) if self.synth is not None else None
        return replace(self, experiment=exp, synth=synth)


def _typed(section, key, raw, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw.strip())
        if kind is float:
            return float(raw.strip())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc


def _int_list(section, key, raw):
    return tuple(_typed(section, key, part, int) for part in raw.split(",") if part.strip())


def _field_kinds(cls):
    kinds = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        kinds[f.name] = int if t.startswith("int") else float if t.startswith("float") else str
    return kinds


def _section_values(parser, section, cls, allowed):
    kinds = _field_kinds(cls)
    out = {}
    if parser.has_section(section):
        for key in allowed:
            if parser.has_option(section, key):
                out[key] = _typed(section, key, parser.get(section, key), kinds[key])
    return out


def _build(cls, section, **values):
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key in parser.options(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")

    def get(section, key, kind=str, default=None):
        if parser.has_option(section, key):
            return _typed(section, key, parser.get(section, key), kind)
        return default

    scorer = _build(ScorerConfig, "scorers",
                    **_section_values(parser, "scorers", ScorerConfig, SECTIONS["scorers"]))
    extractor = _build(ExtractorConfig, "extractor", input_dim=1, n_classes=2,
                       **_section_values(parser, "extractor", ExtractorConfig, _EXTRACTOR_KEYS))
    duq_training = _build(DuqHyperparams, "duq_training",
                          **_section_values(parser, "duq_training", DuqHyperparams,
                                            _DUQ_TRAINING_KEYS))
    base = DuqSearchSpace()
    search = DuqSearchSpace(
        one_minus_gamma=(get("duq_search", "one_minus_gamma_min", float, base.one_minus_gamma[0]),
                         get("duq_search", "one_minus_gamma_max", float, base.one_minus_gamma[1])),
        centroid_sizes=(_int_list("duq_search", "centroid_sizes",
                                  parser.get("duq_search", "centroid_sizes"))
                        if parser.has_option("duq_search", "centroid_sizes")
                        else base.centroid_sizes),
        penalty=(get("duq_search", "penalty_min", float, base.penalty[0]),
                 get("duq_search", "penalty_max", float, base.penalty[1])),
    )
    for name, (lo, hi) in (("one_minus_gamma", search.one_minus_gamma),
                           ("penalty", search.penalty)):
        if not 0 < lo <= hi:
            raise ConfigError(f"[duq_search] {name} bounds must satisfy 0 < min <= max")
    if not search.centroid_sizes:
        raise ConfigError("[duq_search] centroid_sizes must not be empty")

    methods = METHODS
    if parser.has_option("experiment", "methods"):
        methods = tuple(m.strip() for m in parser.get("experiment", "methods").split(",")
                        if m.strip())
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"[experiment] methods: unknown method(s) {bad}; "
                              f"choose from {', '.join(METHODS)}")
    id_count = get("experiment", "id_class_count", str, "auto")
    exclude = get("experiment", "exclude_first_subject", str, "auto")
    ood = get("experiment", "ood_classes", str, "all")
    cap = get("experiment", "dknn_k_cap", str, "none")
    react_limit = get("experiment", "react_limit", str, "none")
    try:
        experiment = ExperimentConfig(
            methods=methods,
            react=get("experiment", "react", str, "off"),
            react_limit_override=(None if react_limit.lower() == "none"
                                  else _typed("experiment", "react_limit", react_limit, float)),
            scorer=scorer,
            extractor=extractor,
            dknn_k_cap=None if cap.lower() == "none" else _typed("experiment", "dknn_k_cap",
                                                                 cap, int),
            duq_trials=get("experiment", "duq_trials", int, 30),
            duq_search=search,
            duq_training=duq_training,
            master_seed=get("experiment", "master_seed", int, 0),
            id_class_count=None if id_count.lower() == "auto" else _typed(
                "experiment", "id_class_count", id_count, int),
            exclude_first_subject=None if exclude.lower() == "auto" else _typed(
                "experiment", "exclude_first_subject", exclude, bool),
            ood_classes=None if ood.lower() == "all" else _int_list("experiment", "ood_classes",
                                                                     ood),
        )
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith("[") else f"[experiment] {msg}") from exc

    synth, n_subjects = None, 0
    if parser.has_section("synth"):
        values = _section_values(parser, "synth", SynthConfig,
                                 [k for k in SECTIONS["synth"] if k != "n_subjects"])
        synth = _build(SynthConfig, "synth", **values)
        n_subjects = get("synth", "n_subjects", int, 4)
        if n_subjects < 1:
            raise ConfigError("[synth] n_subjects must be >= 1")
    data_paths = []
    if parser.has_option("run", "data"):
        data_paths = [p.strip() for p in parser.get("run", "data").split(",") if p.strip()]
    if data_paths and synth is not None:
        raise ConfigError("[run] data and [synth] are mutually exclusive data sources")
    fmt = get("run", "format", str, "md")
    if fmt not in ("csv", "json", "md"):
        raise ConfigError(f"[run] format: expected csv, json or md, got {fmt!r}")
    return RunConfig(experiment=experiment, synth=synth, n_subjects=n_subjects,
                     data_paths=data_paths, out_dir=get("run", "out"), report_format=fmt)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))
