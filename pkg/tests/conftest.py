import logging

import pytest

from metastab.lab import ExperimentConfig, Lab

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def lab05():
    """Headline configuration: alpha = 0.5, grid 2**14, default schedule."""
    return Lab(ExperimentConfig())


@pytest.fixture(scope="session")
def small_config(tmp_path_factory):
    return ExperimentConfig(grid_m=2 ** 10, eps_schedule=(0.1, 0.05), mc_steps=200_000,
                            mc_chains=200, mc_burn=200,
                            output_dir=str(tmp_path_factory.mktemp("small")))


@pytest.fixture(scope="session")
def lab_small(small_config):
    return Lab(small_config)


@pytest.fixture
def record():
    """Print and keep one pass/fail line per acceptance criterion."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


def pytest_configure(config):
    logging.getLogger("metastab").setLevel(logging.WARNING)
