import numpy as np
import pytest
import torch

from tcore.data import generate_glyphs
from tcore.models import EncoderConfig, HeadConfig, TrainOpts, attach_head, build_model, train_head

SMALL_ENC = EncoderConfig((8, 16))


def small_model(num_classes=4, seed=0):
    return build_model(SMALL_ENC, HeadConfig(16, 16, 8, num_classes), seed)


@pytest.fixture(scope="session")
def glyphs4():
    """4 classes x 40 samples, 16px."""
    return generate_glyphs(4, 40, 16, 3)


@pytest.fixture(scope="session")
def trained_small(glyphs4):
    model = small_model(4, 0)
    train_head(model, glyphs4, TrainOpts(epochs=40, learning_rate=0.05))
    return model


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.manual_seed(0)
    yield


ACCEPTANCE_LINES = []


def record_acceptance(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
