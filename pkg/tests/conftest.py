import numpy as np
import pytest
from PIL import Image

from cnntriage.classifier import TrainConfig, build_config
from cnntriage.classifier.training import ArraySource
from cnntriage.conglomerate import EnsembleSpec, train_ensemble
from cnntriage.dataset import ClassWeights
from cnntriage.synthetic import make_synthetic

# (number, title, "PASS"/"FAIL") appended by tests/test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, status in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{status}] criterion {num}: {title}")


def write_png(path, array):
    """uint8 HxWx3 array -> PNG file."""
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def png_writer(tmp_path):
    def _write(name, array):
        return write_png(tmp_path / name, array)
    return _write


@pytest.fixture(scope="session")
def small_synthetic():
    """Small fixture for quick ensemble-level tests."""
    return make_synthetic(200, seed=11), make_synthetic(60, seed=12, prefix="hold")


@pytest.fixture(scope="session")
def small_ensemble(small_synthetic):
    """3 tiny members, a few epochs; fast stand-in for a trained ensemble."""
    train_set, _ = small_synthetic
    spec = EnsembleSpec(
        n=3,
        baseline=ClassWeights(1.5, 0.75),
        member_train=TrainConfig(learning_rate=1e-2, epochs=6, batch_size=20,
                                 batches_per_epoch=10, seed=5),
    )
    ensemble, _ = train_ensemble(spec, build_config("tiny"),
                                 ArraySource(train_set.images, train_set.labels))
    return ensemble
