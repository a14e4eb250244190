import numpy as np
import pytest

from perceparator import ModelConfig
from perceparator.tensor import Tensor, map_tensors, named_tensors

TINY = ModelConfig(channels=8, chunk_size=10, latent_len=4, n_blocks=1, heads=2,
                   n_speakers=2)
SMALL = ModelConfig(channels=16, chunk_size=20, latent_len=4, n_blocks=2, heads=4,
                    n_speakers=2)


def tree_inputs(tree):
    """Named float64 arrays of a parameter tree plus a rebuild function for grad_check."""
    named = dict(named_tensors(tree))
    ids = {id(t): name for name, t in named.items()}

    def rebuild(d):
        return map_tensors(tree, lambda t: d[ids[id(t)]])

    return {k: np.array(v.data, dtype=np.float64) for k, v in named.items()}, rebuild


def to_tensor64(x):
    return Tensor(np.asarray(x), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n, title)`` roll up into one PASS/FAIL line per criterion.

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "ran": 0})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] += report.when == "call"
        if report.outcome != "passed":
            entry["failed"].append(report.nodeid.split("::")[-1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        ok = not entry["failed"] and entry["ran"] > 0
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {entry['title']}"
        if entry["failed"]:
            line += f"  (failed: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)
