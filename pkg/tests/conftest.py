import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """5 identities x 3 classes x 2 repeats; small enough for per-test training."""
    from micfer.synth import generate_dataset
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, n_identities=5, n_classes=3, per_cell=2, length=6, size=16)
    return root


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    from micfer.synth import load_manifest
    from micfer.train import load_split
    m = load_manifest(tiny_dataset)
    return load_split(m.root, m.train), load_split(m.root, m.test)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default 20 x 7 x 4 dataset, generated once per session."""
    from micfer.synth import generate_dataset
    root = tmp_path_factory.mktemp("default")
    generate_dataset(root)
    return root


@pytest.fixture(scope="session")
def default_splits(default_dataset):
    from micfer.synth import load_manifest
    from micfer.train import load_split
    m = load_manifest(default_dataset)
    return load_split(m.root, m.train), load_split(m.root, m.test)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[k])
