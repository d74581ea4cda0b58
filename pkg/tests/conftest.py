import numpy as np
import pytest

from ckpt_tailor.model import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec4():
    return ModelSpec(4)


_CRITERIA: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
