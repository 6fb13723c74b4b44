import pytest

from splitserve.costmodel import default_profile
from splitserve.profile_table import ProfileTable

_REPORT = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def hw():
    return default_profile()


@pytest.fixture
def seeded_table(hw):
    return ProfileTable.seeded(hw)


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one (criterion, passed, detail) line per acceptance criterion."""
    lines = request.config.stash.setdefault(_REPORT, [])

    def report(name, ok, detail):
        lines.append((name, bool(ok), detail))
        print(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_REPORT, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in lines:
        terminalreporter.write_line(f"{name:<14} {'PASS' if ok else 'FAIL'}  {detail}")
