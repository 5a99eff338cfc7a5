import numpy as np
import pytest
import torch

from growthnp.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        image_size=32,
        encoder_channel_widths=(8, 8, 16, 16),
        latent_dim=16,
        attention_heads=2,
        attention_key_dim=4,
        spatiotemporal_scales=(2, 4),
        temporal_scales=(8, 16),
    )
    base.update(kw)
    return ModelConfig(**base)


def random_set(b, n, size=32, seed=0, dtype=torch.float32):
    """Random (images, segs, times) observation set of shape [b, n, ...]."""
    gen = torch.Generator().manual_seed(seed)
    images = torch.randn(b, n, 4, size, size, generator=gen, dtype=dtype)
    segs = torch.randint(0, 4, (b, n, size, size), generator=gen)
    times = torch.rand(b, n, generator=gen, dtype=dtype)
    return images, segs, times


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        lines.append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
