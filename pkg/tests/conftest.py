import pytest

_results: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _results.setdefault(marker.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(p for _, p, _ in runs)
        details = "; ".join(f"{name}: {d}" if d else name for name, _, d in runs)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  ({details})")
