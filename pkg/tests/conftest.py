import os
from pathlib import Path

import pytest

from vidres.metrics import standard_probe

PROBE_SEEDS = (0, 1, 2)

_results: dict[int, tuple[str, str, str]] = {}


@pytest.fixture(scope="session")
def probe_cache(tmp_path_factory):
    """Trained standard probes; ``VIDRES_PROBE_CACHE`` points at a directory to reuse them across sessions."""
    env = os.environ.get("VIDRES_PROBE_CACHE")
    return Path(env) if env else tmp_path_factory.mktemp("probes")


@pytest.fixture(scope="session")
def video_probes(probe_cache):
    return {s: standard_probe("video_3d", s, cache_dir=probe_cache) for s in PROBE_SEEDS}


@pytest.fixture(scope="session")
def standard_image_probe(probe_cache):
    return standard_probe("image_2d", 0, cache_dir=probe_cache)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed:
        msg = str(report.longrepr).strip().splitlines()
        detail = (detail + " | " if detail else "") + (msg[-1] if msg else "")
    if number not in _results or _results[number][0] == "PASS":
        _results[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, detail = _results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}  [{detail}]")
