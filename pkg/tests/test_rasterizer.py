import math

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.rasterizer import PixelGradients, RenderOptions, pixel_alphas, render, render_backward, render_visibility
from SCV2.surfels import SceneModel


def test_empty_model_renders_background(camera):
    model = SceneModel.empty(background=(0.2, 0.3, 0.4))
    output = render(model, camera)
    assert output.color.shape == (camera.height, camera.width, 3)
    assert torch.allclose(output.color, torch.tensor([0.2, 0.3, 0.4], dtype=torch.float64).expand_as(output.color))
    assert torch.all(output.alpha == 0)
    assert torch.all(torch.isinf(output.median_depth))


def test_center_pixel_of_facing_surfel(camera, facing_model):
    output = render(facing_model, camera)
    row, col = int(camera.cy), int(camera.cx)
    np.testing.assert_allclose(output.color[row, col].numpy(), 0.9 * np.array([0.9, 0.1, 0.1]), atol=1e-9)
    assert float(output.alpha[row, col]) == pytest.approx(0.9)
    assert float(output.expected_depth[row, col]) == pytest.approx(2.0)
    assert float(output.median_depth[row, col]) == pytest.approx(2.0)
    np.testing.assert_allclose(output.normal[row, col].numpy(), [0.0, 0.0, -1.0], atol=1e-9)
    assert bool(output.visible_mask[0])


def test_front_surfel_occludes_back(camera, make_surfel):
    front = make_surfel((0, 0, 2.0), color=(1.0, 0.0, 0.0), opacity=0.99)
    back = make_surfel((0, 0, 3.0), color=(0.0, 1.0, 0.0), opacity=0.99)
    row, col = int(camera.cy), int(camera.cx)
    a = render(SceneModel.from_surfels([front, back]), camera).color
    b = render(SceneModel.from_surfels([back, front]), camera).color
    assert float(a[row, col, 0]) > 0.95
    assert float(a[row, col, 1]) < 0.05
    assert torch.allclose(a, b, atol=1e-12)


def test_surfels_behind_near_plane_are_skipped(camera, make_surfel):
    model = SceneModel.from_surfels([make_surfel((0, 0, 0.1))])
    output = render(model, camera, RenderOptions(near=0.2))
    assert torch.all(output.alpha == 0)
    assert not bool(output.visible_mask[0])


def test_tile_layout_does_not_change_the_image(camera, blob_model):
    base = render(blob_model, camera, RenderOptions(tile_size=16))
    small = render(blob_model, camera, RenderOptions(tile_size=5))
    threaded = render(blob_model, camera, RenderOptions(tile_size=16, tile_workers=4))
    assert torch.allclose(base.color, small.color, atol=1e-12)
    assert torch.allclose(base.expected_depth, small.expected_depth, atol=1e-12)
    assert torch.equal(base.color, threaded.color)


def test_pixel_alphas_are_depth_ordered(camera, blob_model):
    order, alphas, depths = pixel_alphas(blob_model, camera, camera.cx, camera.cy)
    assert sorted(order.tolist()) == list(range(len(blob_model)))
    assert np.all((alphas >= 0) & (alphas <= 1))
    centers = blob_model.means[torch.as_tensor(order), 2].numpy()
    assert np.all(np.diff(centers) >= 0)


def _weighted_color_loss(model, camera, weights):
    return float((render(model, camera).color * weights).sum())


@pytest.mark.parametrize("name", ["means", "opacity_logits", "sh", "log_scales"])
def test_backward_matches_finite_differences(camera, blob_model, name):
    weights = torch.as_tensor(
        np.random.default_rng(0).uniform(-1, 1, size=(camera.height, camera.width, 3)), dtype=torch.float64
    )
    output = render(blob_model, camera, differentiable=True)
    grads = render_backward(blob_model, camera, output, PixelGradients(color=weights))
    analytic = getattr(grads, name)

    param = getattr(blob_model, name)
    eps = 1e-6
    for index in [(0,) + (0,) * (param.dim() - 1), (5,) + (param.dim() - 1) * (1,)]:
        plus, minus = param.clone(), param.clone()
        plus[index] += eps
        minus[index] -= eps
        numeric = (
            _weighted_color_loss(blob_model.replace(**{name: plus}), camera, weights)
            - _weighted_color_loss(blob_model.replace(**{name: minus}), camera, weights)
        ) / (2 * eps)
        assert float(analytic[index]) == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_backward_needs_a_differentiable_render(camera, facing_model):
    output = render(facing_model, camera)
    with pytest.raises(utils.ContractError):
        render_backward(facing_model, camera, output, PixelGradients(color=torch.zeros_like(output.color)))


def test_backward_records_both_screen_channels(camera, facing_model):
    output = render(facing_model, camera, differentiable=True)
    weights = torch.zeros_like(output.color)
    weights[:, : camera.width // 2] = 1.0
    grads = render_backward(facing_model, camera, output, PixelGradients(color=weights), weights * 0.5)
    assert float(grads.grad_total[0]) > 0
    assert float(grads.grad_ssim[0]) == pytest.approx(0.5 * float(grads.grad_total[0]), rel=1e-9)
    assert int(grads.count_total[0]) == 1
    assert grads.is_finite()


def test_contribution_statistic_is_collected(camera, facing_model):
    output = render(facing_model, camera, contribution_gamma=0.5)
    assert float(output.contribution_sum[0]) > 0
    assert int(output.contribution_pixels[0]) > 0
    with pytest.raises(utils.ContractError):
        render(facing_model, camera, contribution_gamma=1.5)


def test_visibility_hides_points_behind_a_disk(camera):
    visible = render_visibility(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 40.0], [0.6, 0.0, 3.0]]), camera, 0.5)
    assert visible.tolist() == [True, False, True]


def test_visibility_needs_positive_radius(camera):
    with pytest.raises(utils.ContractError):
        render_visibility(np.zeros((1, 3)), camera, 0.0)


def test_render_options_validate():
    RenderOptions().validate()
    with pytest.raises(utils.ConfigError, match="render.tile_size"):
        RenderOptions(tile_size=0).validate()
    assert math.isclose(RenderOptions().contribution_cutoff, 1 / 255)
