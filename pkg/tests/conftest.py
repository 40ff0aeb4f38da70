"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n = marker.args[0]
        ok = rep.passed and not hasattr(rep, "wasxfail")
        details = [f"{v}" for k, v in item.user_properties if k == "detail"]
        entry = _RESULTS.setdefault(n, {"ok": True, "parts": []})
        entry["ok"] &= ok
        entry["parts"].append((item.name, ok, "; ".join(details)))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entry = _RESULTS[n]
        tr.write_line(f"criterion {n:2d}: {'PASS' if entry['ok'] else 'FAIL'}")
        for name, ok, detail in entry["parts"]:
            tr.write_line(f"    {'ok  ' if ok else 'FAIL'} {name}" + (f"  [{detail}]" if detail else ""))
