import numpy as np
import pytest

from attnet.data import SyntheticConfig, synthetic_sequence
from attnet.model import ModelConfig
from attnet.projection import ProjectionConfig
from attnet.training import prepare_sequence

SMALL_PROJ = ProjectionConfig.from_degrees(width=64, height=16, fov_up=10.0, fov_down=20.0)


def toy_config(encoder_depth=2, attention_depth=1, **kw):
    kw.setdefault("input_height", 16)
    kw.setdefault("input_width", 64)
    kw.setdefault("descriptor_dim", 128)
    return ModelConfig(encoder_depth, attention_depth, "toy", **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sequences():
    """Two short synthetic circuits, projected at 16x64."""
    out = []
    for seed in (1, 2):
        cfg = SyntheticConfig(noise=0.05, seed=seed, name=f"s{seed}", radius=15.0, laps=1.6, landmarks=150)
        out.append(prepare_sequence(synthetic_sequence(cfg), SMALL_PROJ, r_th=6.0, min_frame_gap=40))
    return out


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
