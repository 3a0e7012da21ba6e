import numpy as np
import pytest

from latentsteer.model import ModelConfig, init_weights, load_default_weights


@pytest.fixture(scope="session")
def weights():
    return load_default_weights()


@pytest.fixture(scope="session")
def random_weights():
    return init_weights(ModelConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record (and print) one PASS/FAIL line per acceptance criterion."""
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
