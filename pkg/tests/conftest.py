import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dcpaseg import kernels  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["cython", "numpy"])
def backend(request):
    """Run a test once per kernel backend, restoring the default afterwards."""
    if request.param == "cython" and kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    previous = kernels.BACKEND_NAME
    kernels.use(request.param)
    yield request.param
    kernels.use(previous)


def random_blob_mask(rng, size=64, blobs=3, max_r=8):
    """A handful of filled ellipses, some of which may touch or overlap."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(blobs):
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(1, max_r, 2)
        mask |= (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1).astype(np.uint8)
    return mask


# -- acceptance reporting ---------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    if number not in _criteria or status != "PASS":
        _criteria[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {status}" + (f" [{detail}]" if detail else ""))
