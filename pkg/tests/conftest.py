import sys
import numpy as np
import pytest

from sitgru.cells import CellKind, CellParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def filled(kind: CellKind, d: int, n: int, value: float) -> CellParams:
    p = CellParams.zeros(kind, d, n)
    for v in p.tensors.values():
        v[...] = value
    return p


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.VERDICTS):
        terminalreporter.write_line(module.VERDICTS[number])
