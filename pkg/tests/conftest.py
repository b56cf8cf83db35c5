import numpy as np
import pytest

from depthnerf.encoding import EncoderConfig
from depthnerf.field import FieldConfig
from depthnerf.geometry import CameraView, intrinsics, look_at
from depthnerf.scene import preset_scene


def make_view(eye=(0.0, 0.0, -1.0), target=(0.0, 0.0, 0.0), focal=40.0, width=32, height=24):
    R, t = look_at(eye, target)
    return CameraView(intrinsics(focal, width, height), R, t, resolution=(height, width))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def view():
    return make_view()


@pytest.fixture(scope="session")
def two_spheres_small():
    return preset_scene("two-spheres", 16, 16)


@pytest.fixture
def tiny_field_cfg():
    """Narrow network for fast finite-difference checks."""
    return FieldConfig(
        encoder=EncoderConfig(hidden=(4, 4), features=4),
        pad=4,
        f1_hidden=(8,),
        f1_out=8,
        f2_hidden=(8,),
        length_unit=1e-2,
    )
