"""Shared fixtures."""
import numpy as np
import pytest

from sceneflow.camera import CameraIntrinsics
from sceneflow.tensors import SampleRecord
from tests.builders import rendered


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def lattice_sample() -> SampleRecord:
    """A 16x16 lattice scene with exact scene flow attached."""
    return rendered(3)[0]


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=16.0, fy=16.0, cx=7.5, cy=7.5)
