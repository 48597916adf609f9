import numpy as np
import pytest

from mmflow.model import UnifiedDiT, tiny_config
from mmflow.numerics.rng import Rng
from mmflow.toyworld import build_dataset


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    grid = tiny_cfg.grid
    return {"easy": build_dataset(Rng(11), 16, "easy", grid),
            "standard": build_dataset(Rng(12), 32, "standard", grid)}


@pytest.fixture
def tiny_model(tiny_cfg):
    return UnifiedDiT(tiny_cfg, seed=0, dtype=np.float64)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
