import numpy as np
import pytest

from spikequant import Dataset, ModelConfig, build_toy_model, generate_synthetic

# Smallest valid network: 16x16 input, one transformer block in stage 3, none in stage 4.
TINY = ModelConfig(channels=4, image_size=(16, 16), blocks_stage3=1, blocks_stage4=0, timesteps=2)


@pytest.fixture(scope="session")
def toy_model():
    return build_toy_model(seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return build_toy_model(TINY, seed=1)


@pytest.fixture(scope="session")
def tiny_data() -> Dataset:
    return generate_synthetic(seed=3, n=48, classes=10, image_size=(16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records a pass/fail line and fails the test when ``ok`` is false."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config._criteria[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
