import numpy as np
import pytest
import torch

from cilcodec.codec.train import freeze_decoder_side, train_initial
from cilcodec.desk import make_tiles

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiles():
    return make_tiles(96, seed=11)


@pytest.fixture(scope="session")
def quick_codec(tiles):
    """Briefly trained, frozen codec: enough for coding-path contracts."""
    model = train_initial(tiles[:64], 16384.0, epochs=3, batch_size=8, seed=0)
    return freeze_decoder_side(model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
