import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    number, title = mark.args
    if number not in _results or rep.failed:
        _results[number] = (title, "FAIL" if rep.failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
