import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.common import SH_C0, SH_COEFFS, rgb_to_sh_dc
from SCV2.surfels import Camera, SceneModel, elongation_rate, eval_sh, surfel_normal


def test_surfel_rejects_non_unit_rotation(make_surfel):
    with pytest.raises(utils.ContractError):
        make_surfel((0, 0, 1), rotation=(1.0, 1.0, 0.0, 0.0))


def test_surfel_rejects_non_positive_scale(make_surfel):
    with pytest.raises(utils.ContractError):
        make_surfel((0, 0, 1), scales=(0.0, 1.0))


def test_elongation_rate_is_symmetric(make_surfel):
    s = make_surfel((0, 0, 1), scales=(1.0, 4.0))
    assert elongation_rate(s) == pytest.approx(0.25)
    assert elongation_rate(s.swapped()) == pytest.approx(0.25)
    assert elongation_rate((2.0, 2.0)) == 1.0
    with pytest.raises(utils.ContractError):
        elongation_rate((0.0, 1.0))


def test_eval_sh_dc_only():
    rgb = np.array([0.2, 0.5, 0.9])
    sh = np.zeros((SH_COEFFS, 3))
    sh[0] = rgb_to_sh_dc(rgb)
    for direction in ([0, 0, 1], [1, 0, 0], [0, -1, 0]):
        np.testing.assert_allclose(eval_sh(sh.reshape(-1), direction), rgb, atol=1e-12)
    assert sh[0, 0] == pytest.approx((0.2 - 0.5) / SH_C0)


def test_eval_sh_rejects_bad_direction():
    with pytest.raises(utils.ContractError):
        eval_sh(np.zeros(27), [0, 0, 2])


def test_model_round_trips_surfels(make_surfel):
    surfels = [make_surfel((0, 0, 2), scales=(0.1, 0.3), opacity=0.4), make_surfel((1, 0, 2), opacity=0.7)]
    model = SceneModel.from_surfels(surfels)
    assert len(model) == 2
    for original, restored in zip(surfels, model):
        np.testing.assert_allclose(restored.center, original.center)
        np.testing.assert_allclose(restored.scales, original.scales)
        assert restored.opacity == pytest.approx(original.opacity)
        np.testing.assert_allclose(restored.sh, original.sh)


def test_select_concat_and_validate(blob_model):
    first = blob_model.select([0, 1, 2])
    rest = blob_model.select(torch.arange(3, len(blob_model)))
    joined = SceneModel.concat([first, rest])
    assert torch.equal(joined.means, blob_model.means)
    joined.validate()

    broken = blob_model.replace(means=blob_model.means.clone().index_fill_(0, torch.tensor([0]), float("nan")))
    with pytest.raises(utils.ContractError):
        broken.validate()


def test_iteration_counter_never_decreases(blob_model):
    later = blob_model.with_iteration(5)
    assert later.iteration == 5
    with pytest.raises(utils.ContractError):
        later.with_iteration(4)


def test_camera_projects_optical_axis_to_principal_point(camera):
    uv, z = camera.project(np.array([[0.0, 0.0, 3.0]]))
    np.testing.assert_allclose(uv[0], [camera.cx, camera.cy])
    assert z[0] == pytest.approx(3.0)


def test_camera_dict_round_trip():
    camera = Camera.look_at((3.0, 0.5, 2.0), (0.0, 0.0, 0.0), 64, 48, view_id=4)
    restored = Camera.from_dict(camera.to_dict())
    np.testing.assert_allclose(restored.rotation, camera.rotation)
    np.testing.assert_allclose(restored.center, [3.0, 0.5, 2.0], atol=1e-12)
    assert (restored.width, restored.height, restored.view_id) == (64, 48, 4)


def test_camera_rejects_improper_rotation():
    with pytest.raises(utils.ContractError):
        Camera(fx=1, fy=1, cx=0, cy=0, rotation=-np.eye(3), translation=np.zeros(3), width=4, height=4)


def test_surfel_normal_faces_camera(make_surfel, camera):
    s = make_surfel((0.3, -0.2, 2.0))
    normal = surfel_normal(s, camera)
    assert np.dot(normal, s.center - camera.center) <= 0
    assert np.linalg.norm(normal) == pytest.approx(1.0)
