import numpy as np
import pytest

from lstr.model import ModelConfig, ModelParams

TINY = ModelConfig(width=8, m_s=4, m_l=8, num_classes=2, n0=2, n1=2, l_enc=1, l_dec=1, heads=2, d_ff=16)
SMALL = ModelConfig(width=16, m_s=6, m_l=24, num_classes=3, n0=4, n1=4, l_enc=1, l_dec=1, heads=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    return TINY, ModelParams.init(TINY, seed=3)


@pytest.fixture(scope="session")
def small():
    return SMALL, ModelParams.init(SMALL, seed=5)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} | {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
