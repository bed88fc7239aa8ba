"""Adaptive density control: densification gradient, clone/split selection and mechanics, opacity reset and culling."""

import enum
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch

from . import utils
from .common import inverse_sigmoid
from .rasterizer import SurfelGradients
from .surfels import SceneModel, elongation_rates


logger = logging.getLogger(__name__)


class GradientSource(str, enum.Enum):
    """Loss terms whose positional gradient drives densification"""

    SSIM_ONLY = "SSIM_ONLY"
    TOTAL = "TOTAL"
    RGB_ONLY = "RGB_ONLY"
    SSIM_PLUS_DEPTH = "SSIM_PLUS_DEPTH"
    SSIM_PLUS_NORMAL = "SSIM_PLUS_NORMAL"


@dataclass(frozen=True)
class DensifyConfig:
    """Density-control settings.

    Attributes:
        grad_threshold (float): densification threshold on the NDC gradient norm
        omega (float): scaling weight of the total-to-source gradient ratio
        elongation_min (float): surfels with min/max scale below this are never cloned or split
        densify_start_iter (int): first densification iteration
        densify_end_iter (int, optional): last densification iteration; None means half of the run
        densify_interval (int): iterations between densification rounds
        opacity_reset_interval (int): iterations between opacity resets
        min_opacity_cull (float): opacity below which surfels are removed
        split_scale_threshold (float, optional): world-space max scale separating clones from splits;
            None means 1% of the scene extent
        gradient_source (GradientSource): loss terms feeding the densification channel
        dgd_autoscale (bool): rescale the source channel to the total-gradient magnitude
        split_children (int): children per split
        split_divisor (float): scale divisor of split children
        clone_step (float): clone offset in units of the max scale
        max_surfels (int): hard cap on the surfel count
    """

    grad_threshold: float = 2e-4
    omega: float = 0.9
    elongation_min: float = 0.01
    densify_start_iter: int = 500
    densify_end_iter: Optional[int] = None
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    min_opacity_cull: float = 0.005
    split_scale_threshold: Optional[float] = None
    gradient_source: GradientSource = GradientSource.SSIM_ONLY
    dgd_autoscale: bool = True
    split_children: int = 2
    split_divisor: float = 1.6
    clone_step: float = 0.01
    max_surfels: int = 200_000

    def validate(self, section: str = "densify") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        def fail(name, message):
            raise utils.ConfigError(f"{section}.{name}", message)

        if not 0 < self.omega <= 1:
            fail("omega", f"must be in (0, 1], got {self.omega}")
        if not 0 <= self.elongation_min < 1:
            fail("elongation_min", f"must be in [0, 1), got {self.elongation_min}")
        if self.grad_threshold <= 0:
            fail("grad_threshold", f"must be > 0, got {self.grad_threshold}")
        for name in ("densify_interval", "opacity_reset_interval", "split_children", "max_surfels"):
            if getattr(self, name) <= 0:
                fail(name, f"must be > 0, got {getattr(self, name)}")
        if self.densify_start_iter < 0:
            fail("densify_start_iter", f"must be >= 0, got {self.densify_start_iter}")
        if self.densify_end_iter is not None and self.densify_end_iter < 0:
            fail("densify_end_iter", f"must be >= 0, got {self.densify_end_iter}")
        if not 0 <= self.min_opacity_cull < 0.5:
            fail("min_opacity_cull", f"must be in [0, 0.5), got {self.min_opacity_cull}")
        if self.split_scale_threshold is not None and self.split_scale_threshold <= 0:
            fail("split_scale_threshold", f"must be > 0, got {self.split_scale_threshold}")
        if self.split_divisor <= 1:
            fail("split_divisor", f"must be > 1, got {self.split_divisor}")

    def end_iter(self, total_iters: int) -> int:
        return total_iters // 2 if self.densify_end_iter is None else self.densify_end_iter

    def split_threshold(self, extent: float) -> float:
        return 0.01 * extent if self.split_scale_threshold is None else self.split_scale_threshold

    def is_densify_iter(self, iteration: int, total_iters: int) -> bool:
        return (
            self.densify_start_iter <= iteration <= self.end_iter(total_iters)
            and iteration > 0
            and iteration % self.densify_interval == 0
        )


class DensifySelection(NamedTuple):
    clone: torch.Tensor
    split: torch.Tensor


class DensifyResult(NamedTuple):
    model: SceneModel
    # old index of every surfel in the new model, -1 for new surfels
    index_map: torch.Tensor


class CullResult(NamedTuple):
    model: SceneModel
    keep: torch.Tensor
    opacity_reset: bool


def _channel_means(accumulated: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    mean = accumulated / counts.clamp_min(1).to(accumulated.dtype)
    return torch.where(counts > 0, mean, torch.zeros_like(accumulated))


def densify_scale(grads: SurfelGradients, omega: float) -> float:
    """Global factor max(omega * |grad_total|_avg / |grad_source|_avg, 1), or 1 when the source average is 0"""
    total_seen = grads.count_total > 0
    source_seen = grads.count_ssim > 0
    if not bool(total_seen.any()) or not bool(source_seen.any()):
        return 1.0
    avg_total = float(_channel_means(grads.grad_total, grads.count_total)[total_seen].mean())
    avg_source = float(_channel_means(grads.grad_ssim, grads.count_ssim)[source_seen].mean())
    if avg_source == 0:
        return 1.0
    return max(omega * avg_total / avg_source, 1.0)


def densify_gradient(
    grads: SurfelGradients,
    omega: float,
    source: GradientSource = GradientSource.SSIM_ONLY,
    autoscale: bool = True,
) -> torch.Tensor:
    """Per-surfel densification gradient norms.

    The source channel's per-surfel mean norm is multiplied by a single factor per round (see densify_scale), which
    brings it to the magnitude the threshold was tuned for. With the TOTAL source the plain total-channel mean is
    returned.

    Args:
        grads (SurfelGradients): accumulated screen-space statistics of this round
        omega (float): scaling weight in (0, 1]
        source (GradientSource, optional): what fed the source channel. Defaults to GradientSource.SSIM_ONLY.
        autoscale (bool, optional): apply the factor. Defaults to True.

    Returns:
        torch.Tensor: (N,) norms
    """

    if source == GradientSource.TOTAL:
        return _channel_means(grads.grad_total, grads.count_total)
    factor = densify_scale(grads, omega) if autoscale else 1.0
    return factor * _channel_means(grads.grad_ssim, grads.count_ssim)


def select_densify(
    model: SceneModel, norms: torch.Tensor, config: DensifyConfig, extent: float = 1.0
) -> DensifySelection:
    """Splits the high-gradient, non-degenerate surfels into clone and split sets by their max scale"""
    utils.require(len(norms) == len(model), f"got {len(norms)} norms for {len(model)} surfels")
    candidates = (norms > config.grad_threshold) & (elongation_rates(model) >= config.elongation_min)
    small = model.scales.detach().max(dim=1).values <= config.split_threshold(extent)
    return DensifySelection(
        clone=torch.nonzero(candidates & small).flatten(),
        split=torch.nonzero(candidates & ~small).flatten(),
    )


def apply_densify(
    model: SceneModel,
    clone: torch.Tensor,
    split: torch.Tensor,
    config: DensifyConfig,
    position_grads: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> DensifyResult:
    """Clones and splits surfels.

    The new model holds the survivors in their original order, then the clones, then the split children
    (parent-major). Clones move along the accumulated position gradient by `clone_step` times their max scale;
    split children are drawn from the parent's disk Gaussian (clipped at 3 sigma) with scales divided by
    `split_divisor`.

    Args:
        model (SceneModel): current model
        clone (torch.Tensor): indices to clone
        split (torch.Tensor): indices to split
        config (DensifyConfig): settings
        position_grads (torch.Tensor, optional): (N, 3) accumulated position gradients giving the clone direction
        generator (torch.Generator, optional): sampling source for split children

    Raises:
        utils.ContractError: the sets overlap or contain a surfel below the elongation cutoff

    Returns:
        DensifyResult: new model and the old index of every surfel
    """

    clone = torch.as_tensor(clone, dtype=torch.int64).flatten()
    split = torch.as_tensor(split, dtype=torch.int64).flatten()
    n = len(model)
    if clone.numel() == 0 and split.numel() == 0:
        return DensifyResult(model, torch.arange(n))

    utils.require(
        len(set(clone.tolist()) & set(split.tolist())) == 0, "clone and split sets must be disjoint"
    )
    touched = torch.cat([clone, split])
    rates = elongation_rates(model)[touched]
    utils.require(
        bool((rates >= config.elongation_min).all()),
        f"{int((rates < config.elongation_min).sum())} selected surfels fall below the elongation cutoff",
    )

    params = {name: t.detach() for name, t in model.params().items()}
    dtype = model.dtype

    cloned = {name: t[clone] for name, t in params.items()}
    if position_grads is not None and clone.numel():
        direction = position_grads.detach()[clone].to(dtype)
        length = torch.linalg.norm(direction, dim=-1, keepdim=True)
        direction = torch.where(length > 0, direction / length.clamp_min(1e-300), torch.zeros_like(direction))
        step = config.clone_step * model.scales.detach()[clone].max(dim=1).values
        cloned["means"] = cloned["means"] + step[:, None] * direction

    k = config.split_children
    parents = split.repeat_interleave(k)
    children = {name: t[parents] for name, t in params.items()}
    if parents.numel():
        samples = torch.randn((parents.numel(), 2), generator=generator, dtype=dtype).clamp(-3.0, 3.0)
        frame = model.rotations.detach()[parents]
        scales = model.scales.detach()[parents]
        offset = frame[:, :, 0] * (scales[:, 0:1] * samples[:, 0:1])
        offset = offset + frame[:, :, 1] * (scales[:, 1:2] * samples[:, 1:2])
        children["means"] = children["means"] + offset
        children["log_scales"] = children["log_scales"] - math.log(config.split_divisor)

    keep = torch.ones(n, dtype=torch.bool)
    keep[split] = False
    survivors = torch.nonzero(keep).flatten()
    merged = {
        name: torch.cat([params[name][survivors], cloned[name], children[name]], dim=0) for name in SceneModel.PARAMS
    }
    index_map = torch.cat(
        [survivors, torch.full((clone.numel() + parents.numel(),), -1, dtype=torch.int64)]
    )
    logger.debug("Densify: %d clones, %d splits, %d -> %d surfels", clone.numel(), split.numel(), n, len(index_map))
    return DensifyResult(model.replace(**merged), index_map)


def cull(model: SceneModel, config: DensifyConfig, iteration: int) -> CullResult:
    """Removes near-transparent surfels, then applies the periodic opacity reset.

    Raises:
        utils.ContractError: every surfel would be removed

    Returns:
        CullResult: new model, keep mask over the old model, whether the opacity reset ran
    """

    keep = model.opacities.detach() >= config.min_opacity_cull
    utils.require(
        bool(keep.any()), f"culling at opacity {config.min_opacity_cull} would remove all {len(model)} surfels"
    )
    if not bool(keep.all()):
        model = model.select(keep)

    reset = iteration > 0 and iteration % config.opacity_reset_interval == 0
    if reset:
        ceiling = float(inverse_sigmoid(torch.tensor(2.0 * config.min_opacity_cull, dtype=torch.float64)))
        model = model.replace(opacity_logits=model.opacity_logits.detach().clamp_max(ceiling))
    return CullResult(model, keep, reset)


def check_budget(count: int, cap: int, where: str = "") -> None:
    """Raises utils.SurfelBudgetError when count is above the cap"""

    if count > cap:
        raise utils.SurfelBudgetError(count, cap, where)
