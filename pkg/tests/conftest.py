import pytest

# (criterion id, title) -> (outcome, detail), filled as acceptance tests run
RESULTS: dict[tuple[str, str], tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = tuple(marker.args)
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        if rep.skipped and not detail:
            detail = str(rep.longrepr[2]) if isinstance(rep.longrepr, tuple) else ""
        RESULTS[key] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (cid, title), (status, detail) in sorted(RESULTS.items(), key=lambda kv: int(kv[0][0][1:])):
        terminalreporter.write_line(f"{status} {cid} {title}: {detail}")
