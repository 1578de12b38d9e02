from __future__ import annotations

import pytest

from metahood.scanner import scan
from metahood.simfs import SimConfig, create_namespace
from metahood.store import open_store


def small_fs(n: int = 300, seed: int = 1, **kw):
    return create_namespace(SimConfig(seed=seed, **kw), n)


@pytest.fixture
def fs():
    return small_fs()


@pytest.fixture
def store():
    st = open_store()
    yield st
    st.close()


@pytest.fixture
def scanned(fs, store):
    scan(fs, store, 2)
    return fs, store


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title, informational=False): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    row = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": [],
                                   "info": mark.kwargs.get("informational", False)})
    if rep.when == "call" or rep.failed:
        row["ran"] = row["ran"] or rep.when == "call"
        row["ok"] = row["ok"] and not rep.failed
        row["notes"] += [f"{k}={v}" for k, v in item.user_properties if rep.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        row = _CRITERIA[n]
        verdict = "INFO" if row["info"] else ("PASS" if row["ok"] and row["ran"] else "FAIL")
        extra = f" [{', '.join(row['notes'])}]" if row["notes"] else ""
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {row['title']}{extra}")
