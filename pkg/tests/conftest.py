import os
import time
from pathlib import Path

import pytest

CRITERIA = {
    1: "input gradients match central finite differences",
    2: "greedy logits equal teacher-forced logits",
    3: "CER matches recursive edit-distance oracle",
    4: "QP solver matches projected-gradient oracle, KKT <= 1e-6",
    5: "DeepFool step lands on affine decision boundary",
    6: "default training reaches test CER <= 0.05, deterministic",
    7: "untargeted efficacy at eps = 0.005",
    8: "targeted C&W re-verification and monotone success curves",
    9: "end-to-end pipeline byte-identical on rerun",
}

_outcomes = {}
_measurements = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call" or failed:
        _outcomes.setdefault(n, []).append(not failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, text in CRITERIA.items():
        if n in _outcomes:
            status = "PASS" if all(_outcomes[n]) else "FAIL"
            tr.write_line(f"criterion {n}: {status}  {text}")
    if _measurements:
        tr.section("acceptance measurements")
        for line in _measurements:
            tr.write_line(line)


@pytest.fixture(scope="session")
def measure():
    """Record a measured value that is reported but not asserted."""
    return _measurements.append


@pytest.fixture(scope="session")
def default_training(tmp_path_factory):
    """Model trained with the default config, reused across the session.

    Set ``SQAT_MODEL_CACHE`` to a directory to keep the trained model between
    sessions; it is retrained when the directory holds no model.
    """
    from sqat.harness.config import ExperimentConfig
    from sqat.harness.runner import run_train

    cache = os.environ.get("SQAT_MODEL_CACHE")
    out = Path(cache) if cache else tmp_path_factory.mktemp("default_train")
    timing = out / "train_seconds.txt"
    if not (out / "model.sqat").is_file() or not timing.is_file():
        start = time.perf_counter()
        run_train(ExperimentConfig(), out)
        timing.write_text(f"{time.perf_counter() - start:.3f}\n")
    return out
