import numpy as np
import pytest

from swtrunet.model import SwtrConfig


def tiny_config(**kw) -> SwtrConfig:
    """Smallest network that still exercises every stage (32x32 input, 2x2 token grid)."""
    base = dict(input_size=(32, 32), encoder_channels=(4, 4, 6, 8), d_model=12, heads=2,
                num_transformer_layers=2, window_size=2, decoder_channels=(8, 6, 4, 4), seed=0)
    base.update(kw)
    return SwtrConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
