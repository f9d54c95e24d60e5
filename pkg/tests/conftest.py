import numpy as np
import pytest

from pcsaliency.data import LabeledCloud, ShapeSpec, generate_shapes
from pcsaliency.model import TrainConfig, init_params, train

# Settings shared with the acceptance suite: default synthetic spec, two
# independently trained models.
MODEL_A = TrainConfig(seed=7)
MODEL_B = TrainConfig(seed=11, point_widths=(32, 64, 128))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def random_model():
    return init_params(k=8, seed=3)


def toy_clusters(n_per_class=20, n_points=16, seed=0):
    """Two classes: tight clusters around z = +1 and z = -1."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_class):
        for label, z in enumerate((1.0, -1.0)):
            pts = rng.normal(scale=0.1, size=(n_points, 3)) + [0.0, 0.0, z]
            out.append(LabeledCloud(pts, label, f"toy{label}_{i}"))
    return out


@pytest.fixture(scope="session")
def toy_set():
    return toy_clusters()


@pytest.fixture(scope="session")
def small_shapes():
    return generate_shapes(ShapeSpec(points=64, train_per_class=40, test_per_class=12, seed=5))


@pytest.fixture(scope="session")
def small_model(small_shapes):
    return train(small_shapes[0], TrainConfig(epochs=12, seed=1)).params


@pytest.fixture(scope="session")
def shapes():
    return generate_shapes(ShapeSpec())


@pytest.fixture(scope="session")
def trained_a(shapes):
    return train(shapes[0], MODEL_A)


@pytest.fixture(scope="session")
def trained_b(shapes):
    return train(shapes[0], MODEL_B)


# -- acceptance report: one line per criterion, printed after the run ---------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)`` for the summary, then assert ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
