import numpy as np
import pytest

from core.layers import DropBlockConfig
from core.model import SdhsiConfig
from core.preprocess import SynthConfig, synth_scene


def tiny_config(**overrides) -> SdhsiConfig:
    """Small model with the full topology: two 3D convs, two 2D convs, FC head and both students"""
    settings = dict(
        patch_size=5,
        bands=6,
        num_classes=3,
        conv3d_channels=(2, 3),
        conv3d_spectral_kernels=(3, 2),
        conv2d_channels=(4, 4),
        fc_widths=(8, 6),
        fc_pool_grid=2,
        student_hidden=6,
        dropblock=DropBlockConfig(3, 0.15),
        dropout=0.4,
    )
    settings.update(overrides)
    return SdhsiConfig(**settings)


def to_float64(model):
    for tensor in model.params.values():
        tensor.values = tensor.values.astype(np.float64)
    for name, buffer in model.buffers.items():
        model.buffers[name] = buffer.astype(np.float64)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def small_scene():
    """16 x 16 x 8 synthetic scene with 3 classes"""
    return synth_scene(SynthConfig(height=16, width=16, bands=8, num_classes=3, noise_sigma=0.05, seed=3))


@pytest.fixture
def default_scene():
    return synth_scene(SynthConfig())


@pytest.fixture
def config_factory():
    return tiny_config


@pytest.fixture
def float64_model():
    return to_float64
