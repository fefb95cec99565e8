"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_OUTCOMES: dict[int, list] = {}
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    _TITLES[n] = title
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        # xfail (expected failure) counts as a failed criterion
        ok = rep.passed and not hasattr(rep, "wasxfail")
        detail = rep.wasxfail if hasattr(rep, "wasxfail") else ""
        if rep.failed:
            detail = str(rep.longrepr).strip().splitlines()[-1][:160]
        _OUTCOMES.setdefault(n, []).append((ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        results = _OUTCOMES[n]
        ok = all(r[0] for r in results)
        why = "; ".join(d for good, d in results if not good and d)
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {_TITLES[n]}"
        terminalreporter.write_line(line + (f"  ({why})" if why else ""))
