#!/usr/bin/env python3
"""
Shared fixtures for the canet_cli test suite
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from canet_cli.canet import ModelConfig
from canet_cli.imaging import ImageBuffer, write_ppm
from canet_cli.nn import Parameter


def make_natural_image(height=64, width=64, channels=3, seed=0):
    """Smooth gradients, oriented waves and fine grain, kept away from 0 and 255"""
    y, x = np.mgrid[0:height, 0:width] / 64.0
    rng = np.random.default_rng(seed)
    base = 128.0 + 40.0 * np.sin(2 * np.pi * (1.3 * x + 0.7 * y)) + 15.0 * np.cos(2 * np.pi * (3.1 * x - 2.3 * y))
    planes = [base + 10.0 * np.sin(2 * np.pi * (k + 1) * 4.0 * x * y + k) for k in range(channels)]
    raster = np.stack(planes, axis=2) + rng.normal(0.0, 3.0, (height, width, channels))
    return ImageBuffer.from_array(np.clip(np.round(raster), 20, 235).astype(np.uint8))


def make_parameter(name, shape, seed=0, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Parameter(name, rng.uniform(low, high, size=shape))


@pytest.fixture
def natural_image():
    """64×64 RGB test image"""
    return make_natural_image()


@pytest.fixture
def gray_image():
    """64×64 grayscale test image"""
    return make_natural_image(channels=1, seed=1)


@pytest.fixture
def image_factory():
    return make_natural_image


@pytest.fixture
def parameter_factory():
    return make_parameter


@pytest.fixture
def tiny_config():
    """CANet-tiny: 2 blocks × 2 layers, 16 channels, PA 16→8→4→1, CA ratio 4"""
    return ModelConfig.preset("tiny")


@pytest.fixture
def image_dir(tmp_path):
    """Directory with two small clean RGB images"""
    directory = tmp_path / "clean"
    directory.mkdir()
    write_ppm(make_natural_image(24, 24, seed=2), directory / "a.ppm")
    write_ppm(make_natural_image(24, 24, seed=3), directory / "b.ppm")
    return directory


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CANET_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="long run: set CANET_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
