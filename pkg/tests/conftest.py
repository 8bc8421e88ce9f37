import numpy as np
import pytest

from relex.dataset import BlobConfig, generate_blobs, split, standardize
from relex.model import ModelSpec, TrainConfig, init_random, train


@pytest.fixture(scope="session")
def blobs3():
    """Three well separated classes in 4 dimensions, standardized."""
    ds = generate_blobs(BlobConfig(3, 1, 4, 60, 10.0, 1.0), seed=11)
    tr, te = split(ds, 0.5, seed=3)
    tr, te, _ = standardize(tr, te)
    return tr, te


@pytest.fixture(scope="session")
def logreg3(blobs3):
    tr, _ = blobs3
    model = init_random(ModelSpec(tr.dim, tr.class_count), seed=0)
    return train(model, tr, TrainConfig(learning_rate=0.01, epochs=60, seed=1)).model


@pytest.fixture(scope="session")
def mlp3(blobs3):
    tr, _ = blobs3
    model = init_random(ModelSpec(tr.dim, tr.class_count, (8, 4), "tanh"), seed=0)
    return train(model, tr, TrainConfig(learning_rate=0.01, epochs=40, seed=1)).model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_criteria_lines: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion."""

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip()
        _criteria_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criteria_lines:
            terminalreporter.write_line(line)
