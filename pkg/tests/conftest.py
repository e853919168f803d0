import numpy as np
import pytest

from minmax_wsl.config import HyperConfig


@pytest.fixture
def tiny_cfg():
    """Small float64 model config so gradient checks are meaningful."""
    return HyperConfig(
        image_size=16,
        channels=(4, 6),
        strides=(2, 2),
        modalities=2,
        num_classes=2,
        precision="float64",
        dropout=0.0,
        u=2,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; stays FAIL if the test dies before reporting."""
    results = request.config.stash.setdefault(_CRITERIA_KEY, {})

    def record(number, passed, detail=""):
        results[number] = (bool(passed), detail)

    number = request.node.get_closest_marker("criterion").args[0]
    results[number] = (False, "did not complete")
    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
