import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> list of (test id, passed, detail)
_CRITERIA = {}
N_CRITERIA = 12


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    if report.when == "call" or report.failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else report.when
        _CRITERIA.setdefault(marker.args[0], []).append((item.nodeid, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        runs = _CRITERIA.get(n)
        if not runs:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        status = "PASS" if all(ok for _, ok, _ in runs) else "FAIL"
        details = " | ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {details}")


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    from a2mim.synthetic import make_shapes_dataset

    return make_shapes_dataset(tmp_path_factory.mktemp("shapes"), n_train_per_class=6, n_val_per_class=4, seed=3)


@pytest.fixture(scope="session")
def shapes_val(shapes_root):
    from a2mim.data import DatasetSpec, load_image_folder

    return load_image_folder(DatasetSpec(root=str(shapes_root), split="val"))
