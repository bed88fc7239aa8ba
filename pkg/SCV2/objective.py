import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import utils
from .surfels import Camera


logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
INV_DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss mix and schedules.

    Attributes:
        lambda_ssim (float): D-SSIM share of the photometric loss
        lambda_depth_start (float): depth weight at iteration 0
        lambda_depth_end (float): depth weight at the last iteration
        lambda_normal (float): normal-consistency weight
        normal_activation_iter (int): first pretraining iteration that uses the normal loss
        total_iters (int): length of the schedule
        depth_enabled (bool): use the depth prior at all
    """

    lambda_ssim: float = 0.2
    lambda_depth_start: float = 0.5
    lambda_depth_end: float = 0.0025
    lambda_normal: float = 0.0125
    normal_activation_iter: int = 7000
    total_iters: int = 30000
    depth_enabled: bool = True

    def validate(self, section: str = "loss") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a weight is negative or the depth schedule isn't decreasing
        """

        for name in ("lambda_ssim", "lambda_depth_start", "lambda_depth_end", "lambda_normal"):
            if getattr(self, name) < 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be >= 0, got {getattr(self, name)}")
        if self.lambda_ssim > 1:
            raise utils.ConfigError(f"{section}.lambda_ssim", f"must be <= 1, got {self.lambda_ssim}")
        if self.depth_enabled and not self.lambda_depth_start >= self.lambda_depth_end > 0:
            raise utils.ConfigError(
                f"{section}.lambda_depth_end",
                f"needs lambda_depth_start >= lambda_depth_end > 0, got {self.lambda_depth_start} and "
                f"{self.lambda_depth_end}",
            )
        if self.total_iters < 1:
            raise utils.ConfigError(f"{section}.total_iters", f"must be >= 1, got {self.total_iters}")
        if self.normal_activation_iter < 0:
            raise utils.ConfigError(
                f"{section}.normal_activation_iter", f"must be >= 0, got {self.normal_activation_iter}"
            )


@dataclass(frozen=True)
class DepthPrior:
    """Aligned inverse-depth prior of one view. The aligned target is scale * inv_depth + shift on `mask`."""

    inv_depth: np.ndarray
    mask: np.ndarray
    scale: float = 1.0
    shift: float = 0.0
    view_id: int = 0
    degenerate: bool = False

    def __post_init__(self):
        utils.require(self.inv_depth.shape == self.mask.shape, "depth prior and mask must have the same shape")
        utils.require(self.scale > 0, f"depth prior scale must be positive, got {self.scale}")
        masked = self.inv_depth[self.mask]
        utils.require(bool(np.all(np.isfinite(masked)) and np.all(masked >= 0)), "masked prior values must be >= 0")

    def aligned(self) -> np.ndarray:
        return self.scale * self.inv_depth + self.shift


class DepthLoss(NamedTuple):
    loss: torch.Tensor
    grad: torch.Tensor
    empty_mask: bool


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype: torch.dtype = torch.float64):
    coords = torch.arange(size, dtype=dtype) - size // 2
    gauss = torch.exp(-(coords**2) / (2 * sigma**2))
    gauss = gauss / gauss.sum()
    return gauss[:, None] @ gauss[None, :]


def ssim_map(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of two (H, W, C) images in [0, 1], zero-padded at the borders"""
    utils.require(img1.shape == img2.shape, f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
    channels = img1.shape[-1]
    x = img1.permute(2, 0, 1)[None]
    y = img2.permute(2, 0, 1)[None].to(x.dtype)
    window = gaussian_window(dtype=x.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()

    def blur(t):
        return F.conv2d(t, window, padding=SSIM_WINDOW // 2, groups=channels)

    mu1, mu2 = blur(x), blur(y)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = blur(x * x) - mu1_sq
    sigma2_sq = blur(y * y) - mu2_sq
    sigma12 = blur(x * y) - mu12
    value = ((2 * mu12 + SSIM_C1) * (2 * sigma12 + SSIM_C2)) / (
        (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    )
    return value[0].permute(1, 2, 0)


def ssim(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    return ssim_map(img1, img2).mean()


def l1(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    return (img1 - img2).abs().mean()


def psnr(img1: torch.Tensor, img2: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical images give +inf"""
    mse = float(((img1.detach().double() - img2.detach().double()) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def photometric_loss(
    render: torch.Tensor, gt: torch.Tensor, lambda_ssim: float = 0.2
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(1 - lambda_ssim) * L1 + lambda_ssim * (1 - SSIM) / 2.

    Args:
        render (torch.Tensor): (H, W, 3) rendered color
        gt (torch.Tensor): (H, W, 3) target color
        lambda_ssim (float, optional): D-SSIM share. Defaults to 0.2.

    Raises:
        utils.ContractError: the images have different shapes

    Returns:
        tuple: loss, dL/dcolor, and the gradient of the weighted D-SSIM term alone
    """

    utils.require(render.shape == gt.shape, f"image shapes differ: {tuple(render.shape)} vs {tuple(gt.shape)}")
    x = render.detach().clone().requires_grad_(True)
    target = gt.detach().to(x.dtype)
    with torch.enable_grad():
        d_ssim = lambda_ssim * (1.0 - ssim(x, target)) / 2.0
        loss = (1.0 - lambda_ssim) * l1(x, target) + d_ssim
        (grad_total,) = torch.autograd.grad(loss, x, retain_graph=True)
        (grad_ssim,) = torch.autograd.grad(d_ssim, x)
    return loss.detach(), grad_total, grad_ssim


def depth_weight(iteration: int, weights: LossWeights) -> float:
    """lambda_start * (lambda_end / lambda_start) ** (iteration / total_iters)"""
    progress = iteration / weights.total_iters
    return weights.lambda_depth_start * (weights.lambda_depth_end / weights.lambda_depth_start) ** progress


def inverse_depth(expected_depth: torch.Tensor) -> torch.Tensor:
    return 1.0 / expected_depth.clamp_min(INV_DEPTH_EPS)


def depth_loss(pred_inv_depth: torch.Tensor, prior: DepthPrior, iteration: int, weights: LossWeights) -> DepthLoss:
    """Weighted L1 between the rendered inverse depth and the aligned prior over the prior's mask.

    Raises:
        utils.ContractError: iteration outside [0, total_iters] or shapes differ

    Returns:
        DepthLoss: loss, dL/dinv_depth (sign subgradient, 0 at ties) and whether the mask was empty
    """

    utils.require(
        0 <= iteration <= weights.total_iters, f"iteration {iteration} outside [0, {weights.total_iters}]"
    )
    utils.require(
        tuple(pred_inv_depth.shape) == prior.inv_depth.shape,
        f"depth shapes differ: {tuple(pred_inv_depth.shape)} vs {prior.inv_depth.shape}",
    )
    dtype = pred_inv_depth.dtype
    mask = torch.from_numpy(prior.mask)
    count = int(mask.sum())
    if count == 0:
        logger.warning("Depth prior of view %d has an empty mask; depth loss skipped", prior.view_id)
        return DepthLoss(torch.zeros((), dtype=dtype), torch.zeros_like(pred_inv_depth), True)

    weight = depth_weight(iteration, weights)
    target = torch.from_numpy(np.where(prior.mask, prior.aligned(), 0.0)).to(dtype)
    diff = torch.where(mask, pred_inv_depth.detach() - target, torch.zeros_like(target))
    loss = weight * diff.abs().sum() / count
    grad = weight * torch.sign(diff) / count
    return DepthLoss(loss, grad, False)


def align_depth_prior(
    raw_inv_depth: np.ndarray,
    ref_pixels: np.ndarray,
    ref_values: np.ndarray,
    mask: Optional[np.ndarray] = None,
    view_id: int = 0,
) -> DepthPrior:
    """Fits scale and shift so that scale * raw + shift matches sparse reference inverse depths.

    Args:
        raw_inv_depth (np.ndarray): (H, W) unaligned inverse depth
        ref_pixels (np.ndarray): (K, 2) integer (row, col) sample positions
        ref_values (np.ndarray): (K,) reference inverse depths
        mask (np.ndarray, optional): validity mask; defaults to finite non-negative raw values
        view_id (int, optional): view the prior belongs to

    Raises:
        utils.ContractError: fewer than 2 valid samples

    Returns:
        DepthPrior: aligned prior; `degenerate` is set when the raw samples are constant or the fit isn't positive
    """

    raw = np.asarray(raw_inv_depth, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(raw) & (raw >= 0)
    ref_pixels = np.asarray(ref_pixels, dtype=np.int64).reshape(-1, 2)
    ref_values = np.asarray(ref_values, dtype=np.float64).reshape(-1)
    inside = (
        (ref_pixels[:, 0] >= 0)
        & (ref_pixels[:, 0] < raw.shape[0])
        & (ref_pixels[:, 1] >= 0)
        & (ref_pixels[:, 1] < raw.shape[1])
    )
    ref_pixels, ref_values = ref_pixels[inside], ref_values[inside]
    valid = mask[ref_pixels[:, 0], ref_pixels[:, 1]] & np.isfinite(ref_values)
    samples = raw[ref_pixels[valid, 0], ref_pixels[valid, 1]]
    targets = ref_values[valid]
    utils.require(len(samples) >= 2, f"depth alignment of view {view_id} needs >= 2 samples, got {len(samples)}")

    degenerate = np.ptp(samples) <= 1e-12 * max(1.0, float(np.abs(samples).max()))
    if not degenerate:
        design = np.stack([samples, np.ones_like(samples)], axis=1)
        (scale, shift), *_ = np.linalg.lstsq(design, targets, rcond=None)
        degenerate = not scale > 0
    if degenerate:
        logger.warning("Depth prior of view %d is degenerate; using scale 1 and the mean offset", view_id)
        scale, shift = 1.0, float(np.mean(targets - samples))
    return DepthPrior(
        inv_depth=np.where(mask, raw, 0.0),
        mask=mask,
        scale=float(scale),
        shift=float(shift),
        view_id=view_id,
        degenerate=bool(degenerate),
    )


def depth_to_normal(expected_depth: torch.Tensor, camera: Camera) -> Tuple[torch.Tensor, torch.Tensor]:
    """Camera-space normals of the back-projected depth map by central differences.

    Returns:
        tuple: (H, W, 3) unit normals facing the camera and an (H, W) validity mask (border and holes invalid)
    """

    depth = expected_depth.detach()
    height, width = depth.shape
    points = camera.pixel_rays(depth.dtype).reshape(height, width, 3) * depth[..., None]
    normals = torch.zeros((height, width, 3), dtype=depth.dtype)
    valid = torch.zeros((height, width), dtype=torch.bool)
    if height < 3 or width < 3:
        return normals, valid

    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    cross = torch.cross(dx, dy, dim=-1)
    length = torch.linalg.norm(cross, dim=-1, keepdim=True)
    inner = cross / length.clamp_min(1e-12)
    inner = torch.where((inner * points[1:-1, 1:-1]).sum(-1, keepdim=True) > 0, -inner, inner)

    good = depth > 0
    support = good[1:-1, 1:-1] & good[1:-1, 2:] & good[1:-1, :-2] & good[2:, 1:-1] & good[:-2, 1:-1]
    support = support & (length[..., 0] > 0)
    normals[1:-1, 1:-1] = torch.where(support[..., None], inner, torch.zeros_like(inner))
    valid[1:-1, 1:-1] = support
    return normals, valid


def normal_loss(
    render_normal: torch.Tensor,
    depth_normal: torch.Tensor,
    alpha: torch.Tensor,
    weight: float = 0.0125,
    valid: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """weight * mean(1 - n_render . n_depth) over pixels with alpha > 0.5.

    The depth normals are constants; the gradient is taken w.r.t. the rendered normals only.

    Raises:
        utils.ContractError: the images have different shapes

    Returns:
        tuple: loss and dL/drender_normal
    """

    utils.require(
        render_normal.shape == depth_normal.shape and render_normal.shape[:2] == alpha.shape,
        "normal images and alpha must share their size",
    )
    mask = alpha.detach() > 0.5
    if valid is not None:
        mask = mask & valid
    count = int(mask.sum())
    if count == 0:
        return torch.zeros((), dtype=render_normal.dtype), torch.zeros_like(render_normal)
    target = depth_normal.detach().to(render_normal.dtype)
    cosine = (render_normal.detach() * target).sum(-1)
    loss = weight * torch.where(mask, 1.0 - cosine, torch.zeros_like(cosine)).sum() / count
    grad = torch.where(mask[..., None], -weight * target / count, torch.zeros_like(target))
    return loss, grad
