from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

from caesr.image import load_image

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")
torch.set_num_threads(1)

SMOKE_DIR = Path(__file__).resolve().parents[1] / "src" / "caesr" / "data" / "smoke"


@pytest.fixture(scope="session")
def smoke_dir():
    return SMOKE_DIR


@pytest.fixture(scope="session")
def smoke_images():
    return [load_image(p) for p in sorted(SMOKE_DIR.glob("*.png"))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion("6a", ok, detail)``."""
    def record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = f"criterion {key:<3s} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def _order(key: str):
    digits = "".join(c for c in key if c.isdigit())
    return int(digits), key


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_order):
        terminalreporter.write_line(ACCEPTANCE[key])
