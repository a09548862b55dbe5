import pytest

RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")
    config.stash[RESULTS] = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the acceptance summary."""
    return lambda text: request.node.user_properties.append(("note", text))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    notes = [v for k, v in item.user_properties if k == "note"]
    item.config.stash[RESULTS].setdefault(marker.args[0], []).append((rep.outcome, notes))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        outcomes = [o for o, _ in results[number]]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        notes = "; ".join(n for _, ns in results[number] for n in ns)
        terminalreporter.write_line(f"criterion {number}: {verdict}" + (f"  ({notes})" if notes else ""))
