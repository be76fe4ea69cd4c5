import numpy as np
import pytest

from driftbench import dataio as dio
from driftbench import model as mdl
from driftbench import trainer as tr


def small_task(n_classes=4, n_channels=8, trials=12, frames=300, seed=0):
    """Synthetic trials windowed at 50/25 with stats fitted on every trial."""
    trials = dio.synth_gestures(n_classes, n_channels, trials, frames, seed)
    stats = dio.fit_standardizer(trials)
    return trials, stats, dio.build_dataset(trials, stats, dio.WindowConfig(50, 25), n_classes)


@pytest.fixture(scope="session")
def trained_small():
    """A small source-trained classifier with the data it was trained on."""
    trials, stats, data = small_task(seed=3)
    clf = mdl.init_classifier(mdl.ModelConfig(8, 4, 16, 2, 16), np.random.default_rng(3))
    cfg = tr.TrainConfig(seed=3, max_epochs=120, early_stop_patience=10)
    clf, report = tr.train_source(clf, data, cfg)
    return clf, report, trials, stats, data


# ------------------------------------------------------------ acceptance

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "detail": ""})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    for name, value in item.user_properties:
        if name == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {number} {status}: {e['title']}"
        terminalreporter.write_line(line + (f" [{e['detail']}]" if e["detail"] else ""))
