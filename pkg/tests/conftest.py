import pytest
import torch

from introvac.model import IntroVAC, ModelConfig


@pytest.fixture
def tiny_config():
    return ModelConfig(image_size=8, image_channels=1, latent_dim=3, channel_plan=[2, 3], num_attributes=2)


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return IntroVAC(tiny_config).double()


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return IntroVAC(ModelConfig(image_size=32, latent_dim=64, channel_plan=[8, 16, 32], num_attributes=2))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
