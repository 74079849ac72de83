import pytest
import torch

from photosdf.camera import Camera
from photosdf.config import desk_profile
from photosdf.field import AnalyticField, ConstantMaterial, Sphere


@pytest.fixture
def cfg():
    return desk_profile()


@pytest.fixture
def unit_sphere():
    return AnalyticField(Sphere(1.0))


@pytest.fixture
def front_camera():
    return Camera.look_at((0.0, 0.0, 3.0), width=64, height=64, fov_deg=40.0)


@pytest.fixture
def lit_sphere():
    mat = ConstantMaterial((0.6, 0.5, 0.4), (0.3, 0.3, 0.3), 0.3)
    return AnalyticField(Sphere(0.6), mat, light_intensity=9.0)


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    from photosdf.synthetic import make_synthetic

    return make_synthetic(tmp_path_factory.mktemp("sphere_ds"), "two_tone_sphere", 4, 48, seed=3)


