import re

import numpy as np
import pytest

from lifi.transformer import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=11, n_ctx=16)


@pytest.fixture
def small_cfg():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=13, n_ctx=32)


def _criterion(nodeid: str) -> int | None:
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", nodeid)
    return int(m.group(1)) if m else None


def pytest_runtest_logreport(report):
    import acceptance_report as ar

    n = _criterion(report.nodeid)
    if n is None:
        return
    ar.SEEN.add(n)
    if report.failed and n not in ar.RESULTS:
        ar.RESULTS[n] = (False, f"error during {report.when}")
    elif report.failed and ar.RESULTS[n][0]:
        ar.RESULTS[n] = (False, ar.RESULTS[n][1] + f" (but {report.when} failed)")


def pytest_terminal_summary(terminalreporter):
    import acceptance_report as ar

    if not ar.SEEN:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ar.SEEN):
        terminalreporter.write_line(ar.line(n))
