import pytest
import torch
from hypothesis import settings

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one ``<id> PASS|FAIL: detail`` line for the terminal summary."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record
