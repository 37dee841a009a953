import numpy as np
import pytest

from mtlkit import scenes

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 train / 4 test stereo samples at 16 x 32."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = scenes.SceneConfig(height=16, width=32, focal=16.0, d_max=8.0)
    scenes.build_dataset(cfg, 8, 4, root_seed=5, out_dir=root)
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
