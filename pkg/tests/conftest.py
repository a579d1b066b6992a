import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from svforge.encoder import ConformerConfig

settings.register_profile("svforge", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("svforge")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # small enough for finite differences through a whole layer
    return ConformerConfig(num_layers=2, model_dim=8, ffn_dim=12, num_heads=2, head_dim=4, conv_kernel=3,
                           dropout_rate=0.0, input_dim=6, subsample=2, max_rel_pos=4)


@pytest.fixture
def toy_cfg():
    return ConformerConfig()


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
