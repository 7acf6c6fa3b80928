import numpy as np
import pytest
import torch

from msras.audio import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_wave(rng, channels=2, length=4096, rate=8000, scale=0.3):
    return Waveform(torch.from_numpy((rng.standard_normal((channels, length)) * scale).astype(np.float32)), rate)


@pytest.fixture
def wave(rng):
    return random_wave(rng)


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
