import numpy as np
import pytest
from hypothesis import settings

from attackability.attacks import AUDIT
from attackability.nn_core import DenseNetSpec, VictimModel

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")

# (criterion, passed, detail) rows appended by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the suite-wide budget audit has seen every attack
    items.sort(key=lambda item: item.module.__name__.endswith("test_acceptance"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
            terminalreporter.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    terminalreporter.write_line(
        f"attack budget audit: {AUDIT.calls} calls, {AUDIT.samples} samples, {AUDIT.violations} violations"
    )


def linear_model(W, b, model_id="lin"):
    """Single dense layer with hand-set weights; logits = W x + b."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    spec = DenseNetSpec((W.shape[1], W.shape[0]), (), 0)
    return VictimModel(spec, np.concatenate([W.ravel(), b]), encoder_depth=0, model_id=model_id)


def random_model(rng, depth=None, activations=("relu", "sigmoid")):
    depth = depth or int(rng.integers(1, 4))
    widths = tuple(int(w) for w in rng.integers(2, 7, size=depth + 1))
    acts = tuple(str(rng.choice(activations)) for _ in range(depth - 1))
    spec = DenseNetSpec(widths, acts, int(rng.integers(0, 2**32)))
    return VictimModel.build(spec, encoder_depth=int(rng.integers(0, depth)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
