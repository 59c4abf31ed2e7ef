import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from laekit.backbones import toy_backbone, toy_encoders  # noqa: E402
from laekit.trainer import TrainConfig, TrainState  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def backbone():
    return toy_backbone(7)


@pytest.fixture(scope="session")
def encoders():
    return toy_encoders(7)


@pytest.fixture
def state():
    return TrainState(TrainConfig(steps=1))


@pytest.fixture
def zero_edit_state():
    """A state whose mapper outputs exactly zero offsets."""
    st = TrainState(TrainConfig(steps=1))
    with torch.no_grad():
        for p in st.mapper.parameters():
            p.zero_()
    return st


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
