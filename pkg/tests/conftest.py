import numpy as np
import pytest

from fedapa.data import ClientDataset
from fedapa.model import init_model
from fedapa.numerics import make_rng


def tiny_model(seed=0, d_in=8, num_classes=3, d_feat=16, arch="tiny"):
    return init_model(arch, d_in, num_classes, make_rng(seed), d_feat=d_feat)


def toy_dataset(seed=0, n=40, d_in=8, num_classes=3, client_id=0):
    rng = make_rng(seed)
    X = rng.standard_normal((n, d_in))
    y = np.arange(n) % num_classes
    return ClientDataset(client_id, X, y, X[: n // 4].copy(), y[: n // 4].copy())


@pytest.fixture
def rng():
    return make_rng(1234)


# Lines recorded by the acceptance tests, printed once at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
