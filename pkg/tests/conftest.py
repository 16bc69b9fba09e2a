import numpy as np
import pytest
import torch

from soundboxes.config import desk_config
from soundboxes.dataset import generate_solo


def tiny_config(**overrides):
    """Small enough for unit tests: 128x32 spectrograms, narrow networks."""
    base = {
        "audio.clip_samples": 3968,
        "model.net_shape": [128, 32],
        "model.unet_base": 4,
        "model.unet_max_channels": 16,
        "model.encoder_channels": [8, 8, 8, 8],
        "model.crop_size": 16,
        "model.hidden": 16,
        "model.n_infer_boxes": 12,
        "train.batch_size": 4,
        "train.steps": 20,
    }
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_solos():
    cfg = tiny_config()
    return [generate_solo(i % 7, i, cfg.scene_config()) for i in range(14)]


@pytest.fixture(autouse=True)
def _seed():
    np.random.seed(0)
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> None:
    """Record one acceptance line; they are printed together at the end of the run."""
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
