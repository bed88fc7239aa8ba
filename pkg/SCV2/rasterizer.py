"""Tile-based surfel rasterizer.

Every surfel is intersected with the pixel rays in its own tangent frame, composited front to back in
camera-depth order and reduced into color, alpha, depth and normal images. The forward pass is written with
torch operations only, so reverse-mode autodiff gives the exact adjoint of the compositing.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from . import utils
from .common import normalize, quat_from_z_to, quat_to_rotmat, sh_to_rgb
from .surfels import Camera, SceneModel
from .threadable import ThreadPool


logger = logging.getLogger(__name__)

DEN_EPS = 1e-12
NORMAL_FLOOR = 1e-3


@dataclass(frozen=True)
class RenderOptions:
    """Rasterizer settings.

    Attributes:
        near (float): surfels (and plane hits) closer than this camera-space depth are skipped
        tile_size (int): tile edge in pixels
        lowpass_std (float): std in pixels of the screen-space low-pass term
        cutoff_sigma (float): splat values are zero beyond this many std
        transmittance_min (float): compositing stops after transmittance drops below this value
        contribution_cutoff (float): minimum blend weight counted as a visible contribution
        tile_workers (int): threads used over tiles
    """

    near: float = 0.2
    tile_size: int = 16
    lowpass_std: float = 0.7
    cutoff_sigma: float = 3.0
    transmittance_min: float = 1e-4
    contribution_cutoff: float = 1.0 / 255.0
    tile_workers: int = 1

    def validate(self, section: str = "render") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        for name in ("near", "lowpass_std", "cutoff_sigma"):
            if getattr(self, name) <= 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be > 0, got {getattr(self, name)}")
        for name in ("tile_size", "tile_workers"):
            if getattr(self, name) < 1:
                raise utils.ConfigError(f"{section}.{name}", f"must be >= 1, got {getattr(self, name)}")
        for name in ("transmittance_min", "contribution_cutoff"):
            if not 0 <= getattr(self, name) < 1:
                raise utils.ConfigError(f"{section}.{name}", f"must be in [0, 1), got {getattr(self, name)}")


@dataclass
class PixelGradients:
    """Per-pixel derivatives of a scalar loss w.r.t. the differentiable render images. Missing images count as zero."""

    color: Optional[torch.Tensor] = None
    depth: Optional[torch.Tensor] = None
    normal: Optional[torch.Tensor] = None

    def pairs(self, output: "RenderOutput") -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        outputs, grads = [], []
        for name, image in (("color", output.color), ("depth", output.expected_depth), ("normal", output.normal)):
            grad = getattr(self, name)
            if grad is None:
                continue
            utils.require(
                tuple(grad.shape) == tuple(image.shape),
                f"{name} gradient has shape {tuple(grad.shape)}, expected {tuple(image.shape)}",
            )
            if not image.requires_grad:
                continue
            outputs.append(image)
            grads.append(grad.to(image.dtype))
        return outputs, grads

    def __add__(self, other: "PixelGradients") -> "PixelGradients":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return PixelGradients(
            add(self.color, other.color), add(self.depth, other.depth), add(self.normal, other.normal)
        )


@dataclass
class SurfelGradients:
    """Per-surfel partials plus the two screen-space gradient accumulators used for densification.

    `grad_total` and `grad_ssim` hold summed per-view norms of the NDC positional gradient of the total loss and of
    the densification source loss; the counts hold the number of views each surfel was visible in.
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    grad_total: torch.Tensor
    grad_ssim: torch.Tensor
    count_total: torch.Tensor
    count_ssim: torch.Tensor

    PARTIALS = SceneModel.PARAMS

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def zeros(cls, n: int, dtype: torch.dtype = torch.float64) -> "SurfelGradients":
        return cls(
            means=torch.zeros((n, 3), dtype=dtype),
            quats=torch.zeros((n, 4), dtype=dtype),
            log_scales=torch.zeros((n, 2), dtype=dtype),
            opacity_logits=torch.zeros((n,), dtype=dtype),
            sh=torch.zeros((n, 9, 3), dtype=dtype),
            grad_total=torch.zeros((n,), dtype=dtype),
            grad_ssim=torch.zeros((n,), dtype=dtype),
            count_total=torch.zeros((n,), dtype=torch.int64),
            count_ssim=torch.zeros((n,), dtype=torch.int64),
        )

    def partials(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.PARTIALS}

    def accumulate(self, other: "SurfelGradients") -> "SurfelGradients":
        utils.require(len(self) == len(other), f"cannot accumulate gradients of {len(other)} into {len(self)} surfels")
        return SurfelGradients(**{f: getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__})

    def select(self, index: Union[torch.Tensor, np.ndarray]) -> "SurfelGradients":
        index = torch.as_tensor(np.asarray(index))
        return SurfelGradients(**{f: getattr(self, f)[index] for f in self.__dataclass_fields__})

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, f).double()).all()) for f in self.__dataclass_fields__)


@dataclass
class RenderOutput:
    """Images for one view plus per-surfel visibility records.

    Images are (H, W[, 3]) tensors. `median_depth` holds +inf where alpha < 0.5; `expected_depth` is 0 where nothing
    was hit. `max_contribution` and `visible_mask` are indexed like the rendered model. When the render was asked
    for contributions, `contribution_sum` and `contribution_pixels` hold the per-surfel sums and pixel counts of the
    blend-weight statistic.
    """

    color: torch.Tensor
    alpha: torch.Tensor
    expected_depth: torch.Tensor
    median_depth: torch.Tensor
    normal: torch.Tensor
    visible_mask: torch.Tensor
    max_contribution: torch.Tensor
    camera: Camera
    options: RenderOptions
    contribution_sum: Optional[torch.Tensor] = None
    contribution_pixels: Optional[torch.Tensor] = None
    inputs: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]

    def detach(self) -> "RenderOutput":
        return RenderOutput(
            color=self.color.detach(),
            alpha=self.alpha.detach(),
            expected_depth=self.expected_depth.detach(),
            median_depth=self.median_depth.detach(),
            normal=self.normal.detach(),
            visible_mask=self.visible_mask,
            max_contribution=self.max_contribution,
            camera=self.camera,
            options=self.options,
            contribution_sum=self.contribution_sum,
            contribution_pixels=self.contribution_pixels,
        )


@dataclass
class _Projected:
    """Camera-space quantities of the surfels in front of the near plane, sorted by center depth"""

    order: torch.Tensor
    p: torch.Tensor
    nprime: torch.Tensor
    hu: torch.Tensor
    hv: torch.Tensor
    normal: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    uv: torch.Tensor
    bbox: np.ndarray

    def __len__(self) -> int:
        return self.order.shape[0]


def _project(
    model: SceneModel, camera: Camera, options: RenderOptions, screen_offset: Optional[torch.Tensor]
) -> _Projected:
    dtype = model.dtype
    rotation = torch.as_tensor(camera.rotation, dtype=dtype)
    translation = torch.as_tensor(camera.translation, dtype=dtype)

    p = model.means @ rotation.T + translation
    if screen_offset is not None:
        # An NDC offset of 1 moves the projected center by half the image size.
        lateral = torch.stack(
            [
                screen_offset[:, 0] * (camera.width / 2.0) / camera.fx,
                screen_offset[:, 1] * (camera.height / 2.0) / camera.fy,
                torch.zeros_like(screen_offset[:, 0]),
            ],
            dim=-1,
        )
        p = p + lateral * p[:, 2:3]

    keep = torch.nonzero(p[:, 2].detach() > options.near).flatten()
    z = p[keep, 2].detach()
    order = keep[torch.sort(z, stable=True).indices]

    p = p[order]
    frame = torch.einsum("ij,njk->nik", rotation, quat_to_rotmat(model.quats[order]))
    scales = torch.exp(model.log_scales[order])
    axis_u = frame[:, :, 0] * scales[:, 0:1]
    axis_v = frame[:, :, 1] * scales[:, 1:2]

    normal = frame[:, :, 2]
    facing = 1.0 - 2.0 * ((normal * p).sum(-1).detach() > 0).to(dtype)
    normal = normal * facing[:, None]

    cam_center = torch.as_tensor(camera.center, dtype=dtype)
    dirs = model.means[order] - cam_center
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    color = sh_to_rgb(model.sh[order], dirs)

    uv = torch.stack([camera.fx * p[:, 0] / p[:, 2] + camera.cx, camera.fy * p[:, 1] / p[:, 2] + camera.cy], dim=-1)

    return _Projected(
        order=order,
        p=p,
        nprime=torch.cross(axis_u, axis_v, dim=-1),
        hu=-torch.cross(p, axis_v, dim=-1),
        hv=torch.cross(p, axis_u, dim=-1),
        normal=normal,
        color=color,
        opacity=torch.sigmoid(model.opacity_logits[order]),
        uv=uv,
        bbox=_pixel_bounds(p.detach(), axis_u.detach(), axis_v.detach(), uv.detach(), camera, options),
    )


def _pixel_bounds(
    p: torch.Tensor,
    axis_u: torch.Tensor,
    axis_v: torch.Tensor,
    uv: torch.Tensor,
    camera: Camera,
    options: RenderOptions,
) -> np.ndarray:
    """(M, 4) conservative [x0, y0, x1, y1] pixel bounds of each surfel's truncated footprint"""
    k = options.cutoff_sigma
    corners = torch.stack(
        [p + su * k * axis_u + sv * k * axis_v for su in (-1.0, 1.0) for sv in (-1.0, 1.0)], dim=1
    ).numpy()
    behind = (corners[:, :, 2] <= options.near).any(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cx = camera.fx * corners[:, :, 0] / corners[:, :, 2] + camera.cx
        cy = camera.fy * corners[:, :, 1] / corners[:, :, 2] + camera.cy
    radius = k * options.lowpass_std
    uv = uv.numpy()
    bounds = np.stack(
        [
            np.minimum(cx.min(axis=1), uv[:, 0] - radius),
            np.minimum(cy.min(axis=1), uv[:, 1] - radius),
            np.maximum(cx.max(axis=1), uv[:, 0] + radius),
            np.maximum(cy.max(axis=1), uv[:, 1] + radius),
        ],
        axis=1,
    )
    bounds[behind] = (-np.inf, -np.inf, np.inf, np.inf)
    return bounds


def _splat(
    proj: _Projected, ids: torch.Tensor, rays: torch.Tensor, pixels: torch.Tensor, options: RenderOptions
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel alpha and depth, (P, M), of the surfels `ids` (in depth order) along `rays`"""
    p = proj.p[ids]
    den = rays @ proj.nprime[ids].T
    den = torch.where(den.abs() < DEN_EPS, torch.full_like(den, DEN_EPS), den)
    a = (rays @ proj.hu[ids].T) / den
    b = (rays @ proj.hv[ids].T) / den
    z_plane = (p * proj.nprime[ids]).sum(-1)[None, :] / den

    zeros = torch.zeros_like(den)
    r2 = a * a + b * b
    on_disk = (r2.detach() <= options.cutoff_sigma**2) & (z_plane.detach() > options.near)
    g = torch.where(on_disk, torch.exp(-0.5 * torch.where(on_disk, r2, zeros)), zeros)

    d2 = ((pixels[:, None, :] - proj.uv[ids][None, :, :]) ** 2).sum(-1)
    near_center = d2.detach() <= (options.cutoff_sigma * options.lowpass_std) ** 2
    lowpass = torch.where(
        near_center, torch.exp(-0.5 * torch.where(near_center, d2, zeros) / options.lowpass_std**2), zeros
    )

    use_plane = on_disk & (g.detach() >= lowpass.detach())
    g_hat = torch.where(use_plane, g, lowpass)
    depth = torch.where(use_plane, z_plane, p[:, 2][None, :].expand_as(z_plane))
    return proj.opacity[ids][None, :] * g_hat, depth


@dataclass
class _TileResult:
    pixels: torch.Tensor
    color: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    median: torch.Tensor
    normal: torch.Tensor
    ids: torch.Tensor
    max_weight: torch.Tensor
    contribution: Optional[torch.Tensor]
    contribution_pixels: Optional[torch.Tensor]


def _render_tile(
    proj: _Projected,
    ids: torch.Tensor,
    pixel_index: torch.Tensor,
    rays: torch.Tensor,
    pixels: torch.Tensor,
    background: torch.Tensor,
    options: RenderOptions,
    gamma: Optional[float],
    grad_enabled: bool,
) -> _TileResult:
    with torch.set_grad_enabled(grad_enabled):
        n_pix = pixel_index.shape[0]
        dtype = rays.dtype
        if ids.numel() == 0:
            return _TileResult(
                pixels=pixel_index,
                color=background[None, :].expand(n_pix, 3),
                alpha=torch.zeros(n_pix, dtype=dtype),
                depth=torch.zeros(n_pix, dtype=dtype),
                median=torch.full((n_pix,), math.inf, dtype=dtype),
                normal=torch.zeros((n_pix, 3), dtype=dtype),
                ids=ids,
                max_weight=torch.zeros(0, dtype=dtype),
                contribution=None if gamma is None else torch.zeros(0, dtype=dtype),
                contribution_pixels=None if gamma is None else torch.zeros(0, dtype=torch.int64),
            )

        alpha, depth = _splat(proj, ids, rays, pixels, options)
        one_minus = 1.0 - alpha
        t_incl = torch.cumprod(one_minus, dim=1)
        t_before = torch.cat([torch.ones_like(t_incl[:, :1]), t_incl[:, :-1]], dim=1)
        # The surfel that takes transmittance below the cutoff is still blended.
        active = t_before.detach() >= options.transmittance_min
        weight = torch.where(active, alpha * t_before, torch.zeros_like(alpha))
        t_final = torch.where(active, one_minus, torch.ones_like(alpha)).prod(dim=1)

        color = weight @ proj.color[ids] + t_final[:, None] * background[None, :]
        weight_sum = weight.sum(dim=1)
        exp_depth = (weight * depth).sum(dim=1) / weight_sum.clamp_min(1e-10)
        normal_sum = weight @ proj.normal[ids]
        normal_len = torch.sqrt((normal_sum * normal_sum).sum(-1, keepdim=True).clamp_min(NORMAL_FLOOR**2))

        with torch.no_grad():
            t_masked = torch.cumprod(torch.where(active, one_minus, torch.ones_like(alpha)), dim=1)
            crossed = t_masked <= 0.5
            first = crossed.to(torch.int8).argmax(dim=1)
            median = depth.detach().gather(1, first[:, None])[:, 0]
            median = torch.where(crossed.any(dim=1), median, torch.full_like(median, math.inf))
            w = weight.detach()
            max_weight = w.max(dim=0).values
            contribution = contribution_pixels = None
            if gamma is not None:
                counted = w > options.contribution_cutoff
                term = alpha.detach().pow(gamma) * t_before.detach().pow(1.0 - gamma)
                contribution = torch.where(counted, term, torch.zeros_like(term)).sum(dim=0)
                contribution_pixels = counted.sum(dim=0)

        return _TileResult(
            pixels=pixel_index,
            color=color,
            alpha=1.0 - t_final,
            depth=exp_depth,
            median=median,
            normal=normal_sum / normal_len,
            ids=ids,
            max_weight=max_weight,
            contribution=contribution,
            contribution_pixels=contribution_pixels,
        )


def _tiles(camera: Camera, options: RenderOptions):
    size = options.tile_size
    for y0 in range(0, camera.height, size):
        for x0 in range(0, camera.width, size):
            yield x0, y0, min(x0 + size, camera.width) - 1, min(y0 + size, camera.height) - 1


def render(
    model: SceneModel,
    camera: Camera,
    options: Optional[RenderOptions] = None,
    differentiable: bool = False,
    contribution_gamma: Optional[float] = None,
) -> RenderOutput:
    """Renders a model from one camera.

    Args:
        model (SceneModel): surfels to render
        camera (Camera): view
        options (RenderOptions, optional): rasterizer settings. Defaults to RenderOptions().
        differentiable (bool, optional): keep the autograd graph so render_backward can be called. Defaults to False.
        contribution_gamma (float, optional): also accumulate the per-surfel blend-weight statistic with this exponent

    Raises:
        utils.ContractError: the image has zero size or gamma is outside [0, 1]

    Returns:
        RenderOutput: rendered images
    """

    options = options or RenderOptions()
    utils.require(camera.width > 0 and camera.height > 0, f"cannot render a {camera.width}x{camera.height} image")
    if contribution_gamma is not None:
        utils.require(0.0 <= contribution_gamma <= 1.0, f"gamma must be in [0, 1], got {contribution_gamma}")

    inputs = None
    screen_offset = None
    if differentiable:
        inputs = {}
        for name, tensor in model.params().items():
            inputs[name] = tensor if tensor.requires_grad else tensor.detach().clone().requires_grad_(True)
        screen_offset = torch.zeros((len(model), 2), dtype=model.dtype, requires_grad=True)
        inputs["screen_offset"] = screen_offset
        model = model.replace(**{name: inputs[name] for name in SceneModel.PARAMS})

    with torch.set_grad_enabled(differentiable):
        output = _render(model, camera, options, screen_offset, contribution_gamma, differentiable)
    output.inputs = inputs
    return output


def _render(
    model: SceneModel,
    camera: Camera,
    options: RenderOptions,
    screen_offset: Optional[torch.Tensor],
    gamma: Optional[float],
    grad_enabled: bool,
) -> RenderOutput:
    dtype = model.dtype
    n = len(model)
    height, width = camera.height, camera.width
    background = torch.as_tensor(model.background, dtype=dtype)
    proj = _project(model, camera, options, screen_offset)
    rays = camera.pixel_rays(dtype)
    rows, cols = torch.meshgrid(torch.arange(height), torch.arange(width), indexing="ij")
    pixels_all = torch.stack([cols, rows], dim=-1).reshape(-1, 2).to(dtype)

    bbox = proj.bbox
    pool = ThreadPool(options.tile_workers)
    for x0, y0, x1, y1 in _tiles(camera, options):
        hit = (bbox[:, 2] >= x0) & (bbox[:, 0] <= x1) & (bbox[:, 3] >= y0) & (bbox[:, 1] <= y1)
        ids = torch.as_tensor(np.nonzero(hit)[0], dtype=torch.int64)
        tile_rows, tile_cols = torch.meshgrid(torch.arange(y0, y1 + 1), torch.arange(x0, x1 + 1), indexing="ij")
        pixel_index = (tile_rows * width + tile_cols).reshape(-1)
        pool.add_task(
            lambda ids=ids, pixel_index=pixel_index: _render_tile(
                proj,
                ids,
                pixel_index,
                rays[pixel_index],
                pixels_all[pixel_index],
                background,
                options,
                gamma,
                grad_enabled,
            )
        )
    tiles: List[_TileResult] = pool.start()

    inverse = torch.empty(height * width, dtype=torch.int64)
    inverse[torch.cat([t.pixels for t in tiles])] = torch.arange(height * width)

    def image(attr: str, channels: int = 0) -> torch.Tensor:
        flat = torch.cat([getattr(t, attr) for t in tiles], dim=0)[inverse]
        return flat.reshape(height, width, channels) if channels else flat.reshape(height, width)

    m = len(proj)
    all_ids = torch.cat([t.ids for t in tiles])
    max_sorted = torch.zeros(m, dtype=dtype)
    if all_ids.numel():
        max_sorted = max_sorted.scatter_reduce(0, all_ids, torch.cat([t.max_weight for t in tiles]), reduce="amax")
    max_contribution = torch.zeros(n, dtype=dtype)
    max_contribution[proj.order] = max_sorted

    contribution_sum = contribution_pixels = None
    if gamma is not None:
        sums = torch.zeros(m, dtype=dtype)
        counts = torch.zeros(m, dtype=torch.int64)
        if all_ids.numel():
            sums = sums.index_add(0, all_ids, torch.cat([t.contribution for t in tiles]))
            counts = counts.index_add(0, all_ids, torch.cat([t.contribution_pixels for t in tiles]))
        contribution_sum = torch.zeros(n, dtype=dtype)
        contribution_pixels = torch.zeros(n, dtype=torch.int64)
        contribution_sum[proj.order] = sums
        contribution_pixels[proj.order] = counts

    return RenderOutput(
        color=image("color", 3),
        alpha=image("alpha"),
        expected_depth=image("depth"),
        median_depth=image("median"),
        normal=image("normal", 3),
        visible_mask=max_contribution > options.contribution_cutoff,
        max_contribution=max_contribution,
        camera=camera,
        options=options,
        contribution_sum=contribution_sum,
        contribution_pixels=contribution_pixels,
    )


def render_backward(
    model: SceneModel,
    camera: Camera,
    output: RenderOutput,
    loss_grads: PixelGradients,
    ssim_only_grads: Union[torch.Tensor, PixelGradients, None] = None,
    retain_graph: bool = False,
) -> SurfelGradients:
    """Pulls per-pixel loss gradients back to the surfel parameters.

    The total channel covers every image in `loss_grads`; the second channel only records the NDC positional
    gradient of the densification source (the SSIM color gradient by default).

    Args:
        model (SceneModel): the rendered model
        camera (Camera): the rendered view
        output (RenderOutput): result of render(model, camera, differentiable=True)
        loss_grads (PixelGradients): dL/dcolor, dL/ddepth and dL/dnormal
        ssim_only_grads (torch.Tensor | PixelGradients, optional): densification source gradients; a bare tensor is
            a color gradient
        retain_graph (bool, optional): keep the render graph alive for another backward call

    Raises:
        utils.ContractError: the output wasn't rendered differentiably or image sizes don't match

    Returns:
        SurfelGradients: partials and one view's screen-space accumulators
    """

    utils.require(output.inputs is not None, "render_backward needs an output rendered with differentiable=True")
    utils.require(
        (output.height, output.width) == (camera.height, camera.width),
        f"render is {output.width}x{output.height} but the camera is {camera.width}x{camera.height}",
    )
    utils.require(len(output.visible_mask) == len(model), "output was rendered from a different model")
    if ssim_only_grads is None:
        ssim_only_grads = PixelGradients()
    elif isinstance(ssim_only_grads, torch.Tensor):
        ssim_only_grads = PixelGradients(color=ssim_only_grads)

    names = list(SceneModel.PARAMS)
    targets = [output.inputs[name] for name in names] + [output.inputs["screen_offset"]]
    outputs, grads = loss_grads.pairs(output)
    src_outputs, src_grads = ssim_only_grads.pairs(output)

    total: List[Optional[torch.Tensor]] = [None] * len(targets)
    if outputs:
        total = list(
            torch.autograd.grad(
                outputs, targets, grads, retain_graph=retain_graph or bool(src_outputs), allow_unused=True
            )
        )
    source: Optional[torch.Tensor] = None
    if src_outputs:
        (source,) = torch.autograd.grad(
            src_outputs, [targets[-1]], src_grads, retain_graph=retain_graph, allow_unused=True
        )
    total = [torch.zeros_like(t) if g is None else g.detach() for g, t in zip(total, targets)]
    if source is None:
        source = torch.zeros_like(targets[-1])

    visible = output.visible_mask.to(torch.int64)
    return SurfelGradients(
        **dict(zip(names, total[:-1])),
        grad_total=torch.linalg.norm(total[-1], dim=-1),
        grad_ssim=torch.linalg.norm(source.detach(), dim=-1),
        count_total=visible,
        count_ssim=visible.clone(),
    )


def render_visibility(
    points: np.ndarray, camera: Camera, radius: float, options: Optional[RenderOptions] = None
) -> np.ndarray:
    """Flags the points that stay visible when each is drawn as an opaque disk facing the camera.

    Args:
        points (np.ndarray): (N, 3) world positions
        camera (Camera): view
        radius (float): disk std in scene units
        options (RenderOptions, optional): rasterizer settings

    Raises:
        utils.ContractError: radius isn't positive

    Returns:
        np.ndarray: (N,) booleans
    """

    utils.require(radius > 0, f"visibility radius must be positive, got {radius}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    toward_camera = camera.center[None, :] - points
    lengths = np.linalg.norm(toward_camera, axis=1, keepdims=True)
    toward_camera = np.where(lengths > 0, toward_camera / np.maximum(lengths, 1e-300), [[0.0, 0.0, 1.0]])
    n = len(points)
    model = SceneModel(
        means=torch.from_numpy(points),
        quats=torch.from_numpy(quat_from_z_to(normalize(toward_camera))),
        log_scales=torch.full((n, 2), math.log(radius), dtype=torch.float64),
        opacity_logits=torch.full((n,), 30.0, dtype=torch.float64),
        sh=torch.zeros((n, 9, 3), dtype=torch.float64),
    )
    return render(model, camera, options).visible_mask.numpy()


def pixel_alphas(
    model: SceneModel, camera: Camera, x: float, y: float, options: Optional[RenderOptions] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splat values of every surfel at one pixel, without tiling or compositing.

    Returns:
        (np.ndarray, np.ndarray, np.ndarray): model indices in depth order, their alphas and their depths
    """

    options = options or RenderOptions()
    with torch.no_grad():
        proj = _project(model, camera, options, None)
        ray = torch.tensor([[(x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0]], dtype=model.dtype)
        pixel = torch.tensor([[x, y]], dtype=model.dtype)
        alpha, depth = _splat(proj, torch.arange(len(proj)), ray, pixel, options)
    return proj.order.numpy(), alpha[0].numpy(), depth[0].numpy()
