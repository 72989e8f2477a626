import re

import pytest

NOTES = pytest.StashKey[dict]()
OUTCOMES = pytest.StashKey[dict]()
CRITERIA = 10


def _criterion(name):
    m = re.search(r"test_criterion_(\d+)", name)
    return int(m.group(1)) if m else None


def pytest_configure(config):
    config.stash[NOTES] = {}
    config.stash[OUTCOMES] = {}


@pytest.fixture
def note(request):
    """Attach a one-line detail to the current acceptance criterion."""
    n = _criterion(request.node.name)
    return lambda text: request.config.stash[NOTES].setdefault(n, []).append(text)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    n = _criterion(item.name)
    if n is not None:
        outcomes = item.config.stash[OUTCOMES]
        if report.failed:
            outcomes[n] = "FAIL"
        elif report.skipped:
            outcomes.setdefault(n, "SKIP")
        elif report.when == "call":
            outcomes.setdefault(n, "PASS")
    return report


def pytest_terminal_summary(terminalreporter, config):
    outcomes, notes = config.stash[OUTCOMES], config.stash[NOTES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        detail = "; ".join(notes.get(n, []))
        line = f"ACCEPTANCE {n}: {outcomes.get(n, 'NOT RUN')}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
