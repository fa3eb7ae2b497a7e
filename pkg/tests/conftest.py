"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

CRITERIA = {
    1: "gradient correctness for every objective",
    2: "closed-form loss values and J <= 0",
    3: "nonzero gradient at the identity point",
    4: "contrastive trend on the 200-image benchmark",
    5: "incremental gains under reference replacement",
    6: "NCE consistency on the 2-point problem",
    7: "metric oracles",
    8: "CLI determinism across repeats and thread counts",
    9: "self-retrieval invariants on produced reports",
}

_outcomes: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN  {title}")
            continue
        ok = all(passed for _, passed, _ in results)
        details = " | ".join(d for _, _, d in results if d)
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
