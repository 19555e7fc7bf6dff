import pathlib

import pytest
import torch

from scenetext.config import RunConfig
from scenetext.corpus import FeatureBuilder

torch.set_num_threads(1)

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


@pytest.fixture(scope="session")
def desk_cfg() -> RunConfig:
    return RunConfig.desk()


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    """Very small model for unit tests: no dropout, 32-wide, 2+2 layers."""
    return RunConfig.desk().updated(
        {
            "model": {"hidden_size": 32, "num_heads": 4, "dropout": 0.0, "text_layers": 2, "mm_layers": 2},
            "schedule": {"batch_size": 4},
        }
    )


@pytest.fixture(scope="session")
def builder(desk_cfg) -> FeatureBuilder:
    return FeatureBuilder.from_config(desk_cfg)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
