import numpy as np
import pytest

from dpn.config import ArchConfig, RenderConfig, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_arch():
    return ArchConfig(conv_channels=[4, 4], conv_strides=[1, 1], dyn_hidden=8,
                      inf_hidden=4, dec_hidden=4, z_dim=2, vae_latent=3, vae_channels=2,
                      inverse_hidden=6)


@pytest.fixture
def micro_train(micro_arch):
    return TrainConfig(horizon=2, n_p=2, batch_size=2, iterations=5, arch=micro_arch)


@pytest.fixture
def micro_render():
    return RenderConfig(height=6, width=6, channels=1, blob_radius=1.0)


def pytest_configure(config):
    config.acceptance_results = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "acceptance_results", [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(results):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
