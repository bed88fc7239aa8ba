import numpy as np
import pytest
import torch

from SCV2.common import SH_COEFFS, rgb_to_sh_dc
from SCV2.scenegen import generate, town_spec
from SCV2.surfels import Camera, SceneModel, Surfel


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def _surfel(center, color=(0.8, 0.2, 0.1), scales=(0.2, 0.2), opacity=0.9, rotation=(1.0, 0.0, 0.0, 0.0)):
    sh = np.zeros((SH_COEFFS, 3))
    sh[0] = rgb_to_sh_dc(np.asarray(color, dtype=np.float64))
    return Surfel(center=center, rotation=rotation, scales=scales, opacity=opacity, sh=sh.reshape(-1))


@pytest.fixture
def make_surfel():
    return _surfel


@pytest.fixture
def camera():
    """Camera at the origin looking down +z with the principal point on a pixel center"""
    return Camera(fx=40.0, fy=40.0, cx=16.0, cy=12.0, rotation=np.eye(3), translation=np.zeros(3), width=33, height=25)


@pytest.fixture
def facing_model():
    """One opaque red surfel two units in front of the origin camera"""
    return SceneModel.from_surfels([_surfel((0.0, 0.0, 2.0), color=(0.9, 0.1, 0.1), opacity=0.9)])


@pytest.fixture
def blob_model():
    """A small seeded cluster of surfels spread in front of the origin camera"""
    rng = np.random.default_rng(3)
    surfels = []
    for _ in range(12):
        center = (rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(1.8, 2.6))
        quat = rng.normal(size=4)
        quat /= np.linalg.norm(quat)
        if abs(quat[0]) < 0.5:
            quat = np.array([1.0, 0.1, -0.1, 0.05]) / np.linalg.norm([1.0, 0.1, -0.1, 0.05])
        surfels.append(
            _surfel(
                center,
                color=tuple(rng.uniform(0.1, 0.9, size=3)),
                scales=tuple(rng.uniform(0.05, 0.15, size=2)),
                opacity=float(rng.uniform(0.3, 0.8)),
                rotation=quat,
            )
        )
    return SceneModel.from_surfels(surfels, dtype=torch.float64)


@pytest.fixture(scope="session")
def town_dir(tmp_path_factory):
    spec = town_spec(seed=7, n_boxes=3, n_cameras=8, width=64, height=64, n_gt_points=3000, n_init_points=600)
    return generate(spec, tmp_path_factory.mktemp("town"))
