from pathlib import Path

import numpy as np
import pytest

from autoprune.model import capture_calibration, init_bundle
from autoprune.tensor import Topology, load_bundle, load_corpus

FIXTURES = Path(__file__).parent / "fixtures"
TOY_TOPOLOGY = Topology(vocab_size=16, d_model=8, n_heads=2, n_blocks=2, d_mlp=16, max_seq_len=16)


@pytest.fixture(scope="session")
def fixture_bundle():
    return load_bundle(FIXTURES / "tiny_bundle")


@pytest.fixture(scope="session")
def calib_corpus():
    return load_corpus(FIXTURES / "calib.tok")


@pytest.fixture(scope="session")
def eval_corpus():
    return load_corpus(FIXTURES / "eval.tok")


@pytest.fixture(scope="session")
def fixture_stats(fixture_bundle, calib_corpus):
    return capture_calibration(fixture_bundle, calib_corpus, n_samples=128, seq_len=64, keep_raw=True)


@pytest.fixture
def toy_bundle():
    return init_bundle(TOY_TOPOLOGY, seed=3, scale=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    _CRITERIA[n] = (title, call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
