import numpy as np
import pytest

from bdglab.paths import GridSpec


@pytest.fixture
def grid():
    return GridSpec(horizon=1.0, n_steps=256, extension_chunk=256, hard_cap=4.0)


@pytest.fixture
def small_grid():
    return GridSpec(horizon=1.0, n_steps=64, extension_chunk=64, hard_cap=4.0)


def path_from_values(values, grid):
    from bdglab.paths import PathBundle
    return PathBundle.from_values(grid, np.asarray(values, float))


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance_log(request):
    """Collect one ``PASS``/``FAIL`` line per acceptance criterion."""
    lines = request.config.stash[_LINES]

    def record(label: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
