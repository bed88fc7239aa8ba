"""The optimize loop shared by pretraining and block tuning."""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree
from tqdm import tqdm

from . import utils
from .common import SH_COEFFS, inverse_sigmoid, rgb_to_sh_dc
from .contribution import DEFAULT_GAMMA, accumulate_contributions, average_contribution, trim
from .density import (
    DensifyConfig,
    GradientSource,
    apply_densify,
    check_budget,
    cull,
    densify_gradient,
    densify_scale,
    select_densify,
)
from .objective import (
    DepthPrior,
    LossWeights,
    depth_loss,
    depth_weight,
    depth_to_normal,
    inverse_depth,
    normal_loss,
    photometric_loss,
    psnr,
    ssim,
)
from .rasterizer import PixelGradients, RenderOptions, SurfelGradients, render, render_backward
from .surfels import Camera, SceneModel
from .threadable import parallel_map


logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    Attributes:
        iterations (int): pretraining iterations
        position_lr (float): initial position learning rate, multiplied by the scene extent
        position_lr_final_ratio (float): final / initial position learning rate
        sh_lr, opacity_lr, scaling_lr, rotation_lr (float): learning rates of the other groups
        beta1, beta2 (float): adaptive moment decay rates
        init_opacity (float): opacity of surfels created from points
        dtype (str): "float32" or "float64"
        truncated_pretrain (int): when > 0, stop pretraining at this iteration before partitioning
    """

    iterations: int = 2000
    position_lr: float = 1.6e-4
    position_lr_final_ratio: float = 0.01
    sh_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    init_opacity: float = 0.1
    dtype: str = "float32"
    truncated_pretrain: int = 0

    def validate(self, section: str = "train") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        if self.iterations < 0:
            raise utils.ConfigError(f"{section}.iterations", f"must be >= 0, got {self.iterations}")
        for name in ("position_lr", "sh_lr", "opacity_lr", "scaling_lr", "rotation_lr"):
            if getattr(self, name) <= 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be > 0, got {getattr(self, name)}")
        if not 0 < self.position_lr_final_ratio <= 1:
            raise utils.ConfigError(
                f"{section}.position_lr_final_ratio", f"must be in (0, 1], got {self.position_lr_final_ratio}"
            )
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise utils.ConfigError(f"{section}.{name}", f"must be in [0, 1), got {getattr(self, name)}")
        if not 0 < self.init_opacity < 1:
            raise utils.ConfigError(f"{section}.init_opacity", f"must be in (0, 1), got {self.init_opacity}")
        if self.dtype not in DTYPES:
            raise utils.ConfigError(f"{section}.dtype", f"must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.truncated_pretrain < 0:
            raise utils.ConfigError(f"{section}.truncated_pretrain", f"must be >= 0, got {self.truncated_pretrain}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass(frozen=True)
class TrimConfig:
    """Contribution trimming settings.

    Attributes:
        gamma (float): exponent of the blend-weight statistic
        pretrain_ratio (float): ratio used during pretraining
        tune_ratio (float): ratio used during block tuning and by the standalone trim stage
        interval_fraction (float): trims run every this fraction of a stage's iterations
    """

    gamma: float = DEFAULT_GAMMA
    pretrain_ratio: float = 0.025
    tune_ratio: float = 0.1
    interval_fraction: float = 0.3

    def validate(self, section: str = "trim") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        if not 0 <= self.gamma <= 1:
            raise utils.ConfigError(f"{section}.gamma", f"must be in [0, 1], got {self.gamma}")
        for name in ("pretrain_ratio", "tune_ratio"):
            if not 0 <= getattr(self, name) < 1:
                raise utils.ConfigError(f"{section}.{name}", f"must be in [0, 1), got {getattr(self, name)}")
        if not 0 < self.interval_fraction <= 1:
            raise utils.ConfigError(
                f"{section}.interval_fraction", f"must be in (0, 1], got {self.interval_fraction}"
            )

    def trim_iterations(self, total: int, at_start: bool) -> List[int]:
        """Iterations at which a stage of `total` iterations trims"""
        if total <= 0:
            return []
        step = max(1, int(round(self.interval_fraction * total)))
        marks = list(range(step, total, step))
        return ([0] if at_start else []) + marks


@dataclass
class TrainResult:
    model: SceneModel
    history: List[Dict[str, float]] = field(default_factory=list)
    peak_count: int = 0


def scene_extent(cameras: Sequence[Camera]) -> float:
    """1.1 times the largest camera distance from the mean camera position"""
    centers = np.array([camera.center for camera in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) if len(centers) else 0.0
    return 1.1 * max(radius, 1e-6)


def init_from_points(
    points: np.ndarray,
    colors: np.ndarray,
    seed: int = 0,
    init_opacity: float = 0.1,
    dtype: torch.dtype = torch.float32,
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> SceneModel:
    """Creates one isotropic surfel per point.

    Scales are the mean distance to the 3 nearest neighbours, orientations are seeded random rotations and the SH
    DC term reproduces the point color.

    Raises:
        utils.ContractError: the cloud is empty
    """

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    utils.require(len(points) > 0, "cannot initialize surfels from an empty point cloud")
    if len(points) > 1:
        k = min(4, len(points))
        distances, _ = cKDTree(points).query(points, k=k)
        mean_distance = distances[:, 1:].mean(axis=1)
    else:
        mean_distance = np.ones(1)
    mean_distance = np.maximum(mean_distance, 1e-7)

    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(len(points), 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    sh = np.zeros((len(points), SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(np.asarray(colors, dtype=np.float64).reshape(-1, 3))
    return SceneModel(
        means=torch.tensor(points, dtype=dtype),
        quats=torch.tensor(quats, dtype=dtype),
        log_scales=torch.tensor(np.log(np.repeat(mean_distance[:, None], 2, axis=1)), dtype=dtype),
        opacity_logits=torch.full((len(points),), float(inverse_sigmoid(np.float64(init_opacity))), dtype=dtype),
        sh=torch.tensor(sh, dtype=dtype),
        background=background,
    )


def evaluate_views(
    model: SceneModel,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    options: Optional[RenderOptions] = None,
) -> Tuple[float, float, List[Tuple[int, float, float]]]:
    """Mean PSNR and SSIM of renders against images.

    Returns:
        tuple: mean PSNR, mean SSIM and (view_id, psnr, ssim) per view
    """

    def score(pair):
        camera, image = pair
        color = render(model, camera, options).color.clamp(0.0, 1.0)
        target = torch.as_tensor(image, dtype=color.dtype)
        return camera.view_id, psnr(color, target), float(ssim(color, target))

    rows = parallel_map(score, list(zip(cameras, images)))
    if not rows:
        return math.nan, math.nan, []
    finite = [r[1] for r in rows if math.isfinite(r[1])]
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    return mean_psnr, float(np.mean([r[2] for r in rows])), rows


class Trainer:
    """Optimizes the owned surfels of a model against a set of views.

    When `context` is given, it is rendered behind the owned surfels as a frozen part of the scene; only the owned
    surfels receive gradients, densify and get trimmed.

    Args:
        model (SceneModel): owned surfels
        cameras (Sequence[Camera]): training views
        images (Sequence[np.ndarray]): target images matching `cameras`
        extent (float): scene extent for learning rates and the clone/split threshold
        train (TrainConfig): optimizer settings
        loss (LossWeights): loss weights
        densify (DensifyConfig): density control
        trim_config (TrimConfig): trimming cadence
        render_options (RenderOptions): rasterizer settings
        priors (Dict[int, DepthPrior], optional): depth priors by view id
        context (SceneModel, optional): frozen surfels rendered with the owned ones
        seed (int): seed of the view order and the split sampling
        stage (str): "pretrain" or "tune"
        lr_scales (Dict[str, float], optional): per-group learning-rate multipliers
    """

    def __init__(
        self,
        model: SceneModel,
        cameras: Sequence[Camera],
        images: Sequence[np.ndarray],
        extent: float,
        train: TrainConfig,
        loss: LossWeights,
        densify: DensifyConfig,
        trim_config: TrimConfig,
        render_options: RenderOptions,
        priors: Optional[Dict[int, DepthPrior]] = None,
        context: Optional[SceneModel] = None,
        seed: int = 0,
        stage: str = "pretrain",
        lr_scales: Optional[Dict[str, float]] = None,
    ):
        utils.require(len(cameras) > 0, f"{stage} needs at least one view")
        utils.require(len(cameras) == len(images), "every training view needs an image")
        self.cameras = list(cameras)
        self.images = [torch.as_tensor(np.asarray(image), dtype=model.dtype) for image in images]
        self.extent = extent
        self.train = train
        self.loss = loss
        self.densify = densify
        self.trim_config = trim_config
        self.render_options = render_options
        self.priors = priors or {}
        self.context = context.detach() if context is not None else None
        self.stage = stage
        self.lr_scales = lr_scales or {}
        self.background = model.background
        self.iteration = model.iteration
        self.stage_step = 0
        self._view_rng = np.random.default_rng(seed)
        self._view_queue: List[int] = []
        self._generator = torch.Generator().manual_seed(seed)
        self.peak_count = len(model)
        self._build_optimizer(model)
        self.stats = SurfelGradients.zeros(len(model), model.dtype)

    def _base_lrs(self) -> Dict[str, float]:
        return {
            "means": self.train.position_lr * self.extent * self.lr_scales.get("means", 1.0),
            "quats": self.train.rotation_lr * self.lr_scales.get("quats", 1.0),
            "log_scales": self.train.scaling_lr * self.lr_scales.get("log_scales", 1.0),
            "opacity_logits": self.train.opacity_lr * self.lr_scales.get("opacity_logits", 1.0),
            "sh": self.train.sh_lr * self.lr_scales.get("sh", 1.0),
        }

    def _build_optimizer(self, model: SceneModel) -> None:
        self.params = {name: t.detach().clone().requires_grad_(True) for name, t in model.params().items()}
        lrs = self._base_lrs()
        self.optimizer = torch.optim.Adam(
            [{"params": [self.params[name]], "lr": lrs[name], "name": name} for name in SceneModel.PARAMS],
            lr=0.0,
            betas=(self.train.beta1, self.train.beta2),
            eps=1e-15,
        )

    @property
    def model(self) -> SceneModel:
        return SceneModel(
            **{name: t.detach().clone() for name, t in self.params.items()},
            background=self.background,
            iteration=self.iteration,
        )

    def _live_model(self) -> SceneModel:
        return SceneModel(**self.params, background=self.background, iteration=self.iteration)

    def _remap(self, model: SceneModel, index_map: torch.Tensor) -> None:
        """Swaps in new parameter tensors, carrying the moments of surviving surfels and zeroing the rest"""
        valid = index_map >= 0
        for group in self.optimizer.param_groups:
            name = group["name"]
            old = group["params"][0]
            new = getattr(model, name).detach().clone().requires_grad_(True)
            state = self.optimizer.state.pop(old, None)
            if state:
                for key in ("exp_avg", "exp_avg_sq"):
                    buffer = torch.zeros_like(new)
                    buffer[valid] = state[key][index_map[valid]]
                    state[key] = buffer
                self.optimizer.state[new] = state
            group["params"][0] = new
            self.params[name] = new
        self.stats = SurfelGradients.zeros(len(model), model.dtype)

    def _reset_moments(self, name: str) -> None:
        state = self.optimizer.state.get(self.params[name])
        if state:
            state["exp_avg"].zero_()
            state["exp_avg_sq"].zero_()

    def _depth_weights(self, total: int) -> LossWeights:
        return replace(self.loss, total_iters=max(total, 1))

    def schedule(self, total: int) -> Tuple[float, float]:
        """Position learning rate and depth weight for the next step of a `total`-step stage.

        Both decay over the stage's own steps, so a tuning stage restarts them even though the model carries the
        pretraining iteration count.
        """

        weights = self._depth_weights(total)
        progress = min(self.stage_step / weights.total_iters, 1.0)
        lr = self._base_lrs()["means"] * self.train.position_lr_final_ratio**progress
        return lr, depth_weight(min(self.stage_step, weights.total_iters), weights)

    def _update_learning_rate(self, total: int) -> None:
        lr, _ = self.schedule(total)
        for group in self.optimizer.param_groups:
            if group["name"] == "means":
                group["lr"] = lr

    def _next_view(self) -> int:
        if not self._view_queue:
            self._view_queue = list(self._view_rng.permutation(len(self.cameras)))
        return int(self._view_queue.pop())

    def _normal_active(self) -> bool:
        if self.stage == "tune":
            return True
        return self.iteration >= self.loss.normal_activation_iter

    def step(self, total: int) -> Dict[str, float]:
        """Runs one optimization step on a randomly ordered view.

        Raises:
            utils.DivergenceError: the loss or a gradient isn't finite

        Returns:
            dict: loss terms of this step
        """

        index = self._next_view()
        camera, target = self.cameras[index], self.images[index]
        owned = self._live_model()
        full = owned if self.context is None else SceneModel.concat([owned, self.context.to(owned.dtype)])
        output = render(full, camera, self.render_options, differentiable=True)

        loss, grad_color, grad_ssim = photometric_loss(output.color, target, self.loss.lambda_ssim)
        terms = {"photometric": float(loss)}
        depth_grad = None
        prior = self.priors.get(camera.view_id)
        if self.loss.depth_enabled and prior is not None:
            depth = output.expected_depth.detach().requires_grad_(True)
            inv = inverse_depth(depth)
            weights = self._depth_weights(total)
            result = depth_loss(inv.detach(), prior, min(self.stage_step, weights.total_iters), weights)
            (depth_grad,) = torch.autograd.grad(inv, depth, result.grad)
            terms["depth"] = float(result.loss)
        normal_grad = None
        if self._normal_active() and self.loss.lambda_normal > 0:
            depth_normals, valid = depth_to_normal(output.expected_depth, camera)
            value, normal_grad = normal_loss(
                output.normal, depth_normals, output.alpha, self.loss.lambda_normal, valid
            )
            terms["normal"] = float(value)

        pixel = PixelGradients(color=grad_color, depth=depth_grad, normal=normal_grad)
        source = self._source_gradients(grad_color, grad_ssim, depth_grad, normal_grad)
        grads = render_backward(full, camera, output, pixel, source)
        if self.context is not None:
            grads = grads.select(torch.arange(len(owned)))

        total_loss = sum(terms.values())
        if not math.isfinite(total_loss) or not grads.is_finite():
            raise utils.DivergenceError(
                f"Non-finite loss or gradient at {self.stage} iteration {self.iteration} (view {camera.view_id})"
            )

        for name, partial in grads.partials().items():
            self.params[name].grad = partial.to(self.params[name].dtype)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.stats = self.stats.accumulate(grads)
        self.iteration += 1
        self.stage_step += 1
        self._update_learning_rate(total)
        terms["loss"] = total_loss
        return terms

    def _source_gradients(self, grad_color, grad_ssim, depth_grad, normal_grad) -> PixelGradients:
        source = self.densify.gradient_source
        if source == GradientSource.TOTAL:
            return PixelGradients(color=grad_color, depth=depth_grad, normal=normal_grad)
        if source == GradientSource.RGB_ONLY:
            return PixelGradients(color=grad_color)
        if source == GradientSource.SSIM_PLUS_DEPTH:
            return PixelGradients(color=grad_ssim, depth=depth_grad)
        if source == GradientSource.SSIM_PLUS_NORMAL:
            return PixelGradients(color=grad_ssim, normal=normal_grad)
        return PixelGradients(color=grad_ssim)

    def densify_round(self, iteration: int) -> Tuple[int, int]:
        """Clones, splits and culls using the statistics gathered since the previous round.

        `iteration` is the stage-local iteration that decides the opacity reset.

        Raises:
            utils.SurfelBudgetError: the count exceeds the hard cap

        Returns:
            tuple: number of clones and splits
        """

        model = self.model
        norms = densify_gradient(
            self.stats, self.densify.omega, self.densify.gradient_source, self.densify.dgd_autoscale
        )
        selection = select_densify(model, norms, self.densify, self.extent)
        result = apply_densify(
            model, selection.clone, selection.split, self.densify, self.stats.means, self._generator
        )
        logger.debug(
            "%s iteration %d: factor %.3f, %d clones, %d splits",
            self.stage,
            self.iteration,
            densify_scale(self.stats, self.densify.omega),
            len(selection.clone),
            len(selection.split),
        )
        self._remap(result.model, result.index_map)
        self.peak_count = max(self.peak_count, len(result.model))
        check_budget(len(result.model), self.densify.max_surfels, f"{self.stage} iteration {self.iteration}")

        culled = cull(self.model, self.densify, iteration)
        self._remap(culled.model, torch.nonzero(culled.keep).flatten())
        if culled.opacity_reset:
            self._reset_moments("opacity_logits")
        return len(selection.clone), len(selection.split)

    def trim_round(self, ratio: float) -> int:
        """Trims owned surfels by their mean contribution over the training views; returns the number removed"""
        owned = self.model
        full = owned if self.context is None else SceneModel.concat([owned, self.context.to(owned.dtype)])
        stats = accumulate_contributions(full, self.cameras, self.trim_config.gamma, self.render_options)
        contributions = average_contribution(stats)[: len(owned)]
        result = trim(owned, contributions, ratio)
        self._remap(result.model, torch.nonzero(torch.from_numpy(result.keep)).flatten())
        return int((~result.keep).sum())

    def run(
        self,
        iterations: int,
        trim_ratio: float = 0.0,
        trim_at_start: bool = False,
        on_log: Optional[Callable[[Dict[str, float]], None]] = None,
        log_interval: int = 100,
    ) -> TrainResult:
        """Runs `iterations` steps with density control and trimming on their schedules.

        Raises:
            utils.DivergenceError: optimization diverged or exceeded the surfel cap
        """

        trims = set(self.trim_config.trim_iterations(iterations, trim_at_start)) if trim_ratio > 0 else set()
        history = []
        start = time.perf_counter()
        for i in tqdm(range(iterations), desc=self.stage, disable=None, leave=False):
            if i in trims:
                removed = self.trim_round(trim_ratio)
                logger.debug("%s iteration %d: trimmed %d surfels", self.stage, i, removed)
            terms = self.step(iterations)
            if self.densify.is_densify_iter(i + 1, iterations):
                self.densify_round(i + 1)
            if log_interval and ((i + 1) % log_interval == 0 or i + 1 == iterations):
                row = {"iter": float(self.iteration), "count": float(len(self.params["means"])), **terms}
                row["wall_ms"] = (time.perf_counter() - start) * 1000.0
                history.append(row)
                if on_log:
                    on_log(row)
        return TrainResult(self.model, history, self.peak_count)
