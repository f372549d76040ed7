import time
from pathlib import Path

import pytest
import torch

from todinv import cli
from todinv.denoiser import load_weights
from todinv.evaluation import load_manifest
from todinv.toydata import toy_manifest_path

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config._todinv_start = time.perf_counter()


@pytest.fixture(scope="session")
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    def record(n: int, passed: bool, detail: str):
        _ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_weights(tmp_path_factory) -> Path:
    """Weights from ``todinv train-toy`` with default settings, trained once per session."""
    out = tmp_path_factory.mktemp("train")
    config = cli.RunConfig(output=str(out)).validate()
    return cli.cmd_train_toy(config)


@pytest.fixture(scope="session")
def toy_model(toy_weights):
    return load_weights(toy_weights)


@pytest.fixture(scope="session")
def toy_manifest():
    return load_manifest(toy_manifest_path())
