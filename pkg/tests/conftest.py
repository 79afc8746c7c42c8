import os
from pathlib import Path

import pytest
import torch
from hypothesis import settings

settings.register_profile("ukie", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ukie")

torch.set_num_threads(max(1, torch.get_num_threads()))


def data_root() -> Path:
    return Path(os.environ.get("UKIE_DATA_ROOT", "/root/data"))


# the library falls back to ./data; point it at the same root the tests use
os.environ.setdefault("UKIE_DATA_ROOT", str(data_root()))


@pytest.fixture(scope="session")
def mnist_root():
    root = data_root()
    if not (root / "mnist").is_dir():
        pytest.skip(f"MNIST not found under {root}; run scripts/fetch_mnist.py")
    return root


# --- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Records one pass/fail line per acceptance criterion; printed in the summary."""

    def record(number: int, passed: bool, detail: str):
        line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'} | {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
