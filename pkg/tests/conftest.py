import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_TITLES = {
    1: "renderer gradients vs finite differences",
    2: "energy invariances",
    3: "least-squares offset initialization",
    4: "static-scene regression",
    5: "deformation regression",
    6: "occlusion regression",
    7: "extension correctness",
    8: "ablation directions",
    9: "determinism",
    10: "throughput",
}
_RESULTS = {}


class CriterionRecorder:
    def __init__(self, store, number):
        self.store = store
        self.number = number

    def check(self, passed, detail):
        """Record the outcome of this acceptance criterion, then assert it."""
        self.store[self.number] = (bool(passed), detail)
        print(f"criterion {self.number}: {'PASS' if passed else 'FAIL'} {detail}")
        assert passed, detail


@pytest.fixture
def criterion():
    return lambda number: CriterionRecorder(_RESULTS, number)


def pytest_runtest_logreport(report):
    # a criterion test that raised before recording its verdict still counts as failed
    name = report.nodeid.rpartition("::")[2]
    if report.failed and name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        _RESULTS.setdefault(number, (False, f"{report.when} raised: {report.longreprtext.strip().splitlines()[-1]}"))


def pytest_terminal_summary(terminalreporter, config):
    store = _RESULTS
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:>2}. {title}: not run")
