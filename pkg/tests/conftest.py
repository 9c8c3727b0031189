import numpy as np
import pytest
from hypothesis import settings

from locood.data import SynthConfig, generate_subjects
from locood.harness import ExperimentConfig
from locood.nnkit import ExtractorConfig
from locood.scorers import DuqHyperparams, ScorerConfig

settings.register_profile("locood", deadline=None, max_examples=60)
settings.load_profile("locood")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_extractor(**overrides):
    """Cheap extractor template; input_dim/n_classes are filled in by the harness."""
    base = dict(input_dim=1, n_classes=2, hidden1_dim=32, embed_dim=16, max_epochs=40)
    base.update(overrides)
    return ExtractorConfig(**base)


def small_experiment(**overrides):
    base = dict(
        extractor=small_extractor(),
        scorer=ScorerConfig(mc_passes=10, ensemble_size=2),
        duq_training=DuqHyperparams(centroid_size=16, max_epochs=20, es_patience=5),
        duq_trials=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def far_subjects():
    cfg = SynthConfig(trials_per_class=20, n_channels=2, n_samples=8, seed=7)
    return generate_subjects(cfg, 2)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
