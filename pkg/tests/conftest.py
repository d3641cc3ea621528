import datetime as dt

import pytest
import torch

from resflow.synthgen import GeneratorConfig, generate

torch.set_num_threads(1)

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")


@pytest.fixture(scope="session")
def default_data():
    return generate(GeneratorConfig())


@pytest.fixture(scope="session")
def small_config():
    return GeneratorConfig(start_date=dt.date(2025, 5, 1), num_days=40, seed=11)


@pytest.fixture(scope="session")
def small_data(small_config):
    return generate(small_config)
