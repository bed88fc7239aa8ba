import math

import numpy as np
import pytest
import torch

from SCV2 import utils
from SCV2.objective import (
    DepthPrior,
    LossWeights,
    align_depth_prior,
    depth_loss,
    depth_to_normal,
    depth_weight,
    normal_loss,
    photometric_loss,
    psnr,
    ssim,
)


@pytest.fixture
def image():
    return torch.as_tensor(np.random.default_rng(1).uniform(0, 1, size=(20, 24, 3)))


def test_ssim_and_psnr_of_identical_images(image):
    assert float(ssim(image, image)) == pytest.approx(1.0)
    assert psnr(image, image) == math.inf


def test_psnr_of_constant_offset():
    a = torch.full((8, 8, 3), 0.5, dtype=torch.float64)
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_photometric_loss_is_zero_at_the_target(image):
    loss, grad_total, grad_ssim = photometric_loss(image, image)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)
    assert grad_total.shape == image.shape
    assert grad_ssim.shape == image.shape


def test_photometric_gradient_without_ssim_is_the_l1_sign(image):
    shifted = (image + 0.05).clamp(0, 1)
    loss, grad_total, grad_ssim = photometric_loss(shifted, image, lambda_ssim=0.0)
    expected = torch.sign(shifted - image) / image.numel()
    assert torch.allclose(grad_total, expected)
    assert torch.count_nonzero(grad_ssim) == 0
    assert float(loss) == pytest.approx(float((shifted - image).abs().mean()))


def test_photometric_loss_rejects_mismatched_shapes(image):
    with pytest.raises(utils.ContractError):
        photometric_loss(image, image[:-1])


def test_depth_weight_schedule():
    weights = LossWeights(total_iters=1000)
    assert depth_weight(0, weights) == pytest.approx(0.5)
    assert depth_weight(1000, weights) == pytest.approx(0.0025)
    values = [depth_weight(i, weights) for i in range(0, 1001, 100)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_depth_loss_value_and_range():
    weights = LossWeights(total_iters=100)
    prior = DepthPrior(np.full((4, 5), 0.5), np.ones((4, 5), dtype=bool))
    pred = torch.ones((4, 5), dtype=torch.float64)
    result = depth_loss(pred, prior, 0, weights)
    assert float(result.loss) == pytest.approx(0.5 * 0.5)
    assert torch.allclose(result.grad, torch.full((4, 5), 0.5 / 20, dtype=torch.float64))
    assert not result.empty_mask
    with pytest.raises(utils.ContractError):
        depth_loss(pred, prior, 101, weights)


def test_depth_loss_with_empty_mask_is_skipped():
    prior = DepthPrior(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))
    result = depth_loss(torch.ones((3, 3), dtype=torch.float64), prior, 0, LossWeights())
    assert result.empty_mask
    assert float(result.loss) == 0.0


def test_align_depth_prior_recovers_scale_and_shift():
    rng = np.random.default_rng(2)
    raw = rng.uniform(0.1, 1.0, size=(10, 12))
    pixels = np.stack([rng.integers(0, 10, 40), rng.integers(0, 12, 40)], axis=1)
    targets = 2.0 * raw[pixels[:, 0], pixels[:, 1]] + 0.1
    prior = align_depth_prior(raw, pixels, targets)
    assert prior.scale == pytest.approx(2.0)
    assert prior.shift == pytest.approx(0.1)
    assert not prior.degenerate


def test_align_depth_prior_flags_constant_samples():
    raw = np.full((6, 6), 0.3)
    prior = align_depth_prior(raw, np.array([[0, 0], [1, 1], [2, 2]]), np.array([0.5, 0.5, 0.5]))
    assert prior.degenerate
    assert prior.scale == 1.0
    assert prior.shift == pytest.approx(0.2)
    with pytest.raises(utils.ContractError):
        align_depth_prior(raw, np.array([[0, 0]]), np.array([0.5]))


def test_depth_to_normal_of_a_frontal_plane(camera):
    depth = torch.full((camera.height, camera.width), 2.0, dtype=torch.float64)
    normals, valid = depth_to_normal(depth, camera)
    assert not bool(valid[0].any()) and not bool(valid[:, -1].any())
    assert bool(valid[1:-1, 1:-1].all())
    assert torch.allclose(normals[1:-1, 1:-1], torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64).expand(23, 31, 3))


def test_normal_loss_masks_and_gradient():
    normal = torch.zeros((4, 4, 3), dtype=torch.float64)
    normal[..., 2] = -1.0
    alpha = torch.ones((4, 4), dtype=torch.float64)
    loss, grad = normal_loss(normal, normal, alpha, weight=0.1)
    assert float(loss) == pytest.approx(0.0)
    assert torch.allclose(grad, -0.1 * normal / 16)

    loss, grad = normal_loss(normal, -normal, alpha * 0.4, weight=0.1)
    assert float(loss) == 0.0
    assert torch.count_nonzero(grad) == 0
