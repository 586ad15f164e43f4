import time

import numpy as np
import pytest
import torch

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, text = mark.args
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    ok = rep.passed and _CRITERIA.get(n, (True,))[0]
    _CRITERIA[n] = (ok, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


class ToyRuns:
    """Lazily trains and caches toy runs keyed by (seed, variant)."""

    def __init__(self, root):
        self.root = root
        self.data = {}
        self.results = {}
        self.seconds = 0.0

    def get(self, seed, variant):
        from qgface.toy import run_toy, toy_data

        key = (seed, variant)
        if key not in self.results:
            if seed not in self.data:
                self.data[seed] = toy_data(seed)
            out = self.root / f"{variant}-seed{seed}"
            t0 = time.perf_counter()
            state, report = run_toy(seed, variant, out_dir=out, data=self.data[seed])
            self.seconds += time.perf_counter() - t0
            self.results[key] = (state, report, out)
        return self.results[key]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))
