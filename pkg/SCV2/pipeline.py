"""Pretraining, block partition, view assignment, parallel block tuning and merge."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import utils
from .objective import ssim
from .rasterizer import RenderOptions, render
from .surfels import Camera, SceneModel
from .threadable import ThreadPool, parallel_map
from .training import TrainResult, Trainer, init_from_points, scene_extent


if TYPE_CHECKING:
    from .config import RunConfig
    from .dataset import Dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockConfig:
    """Block partition and tuning settings.

    Attributes:
        grid_x, grid_y (int): blocks along the two ground axes
        foreground_fraction (float): central fraction of the point bounds used as the contraction box
        ssim_epsilon (float): a view joins a block when removing the block drops its SSIM below 1 - epsilon
        tune_iterations (int): iterations per block
        position_lr_scale (float): position learning-rate multiplier during tuning
        scaling_lr_scale (float): scaling learning-rate multiplier during tuning
    """

    grid_x: int = 2
    grid_y: int = 2
    foreground_fraction: float = 1.0 / 3.0
    ssim_epsilon: float = 0.05
    tune_iterations: int = 500
    position_lr_scale: float = 0.4
    scaling_lr_scale: float = 0.8

    def validate(self, section: str = "blocks") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        for name in ("grid_x", "grid_y"):
            if getattr(self, name) < 1:
                raise utils.ConfigError(f"{section}.{name}", f"must be >= 1, got {getattr(self, name)}")
        if not 0 < self.foreground_fraction <= 1:
            raise utils.ConfigError(
                f"{section}.foreground_fraction", f"must be in (0, 1], got {self.foreground_fraction}"
            )
        if not 0 < self.ssim_epsilon < 1:
            raise utils.ConfigError(f"{section}.ssim_epsilon", f"must be in (0, 1), got {self.ssim_epsilon}")
        if self.tune_iterations < 0:
            raise utils.ConfigError(f"{section}.tune_iterations", f"must be >= 0, got {self.tune_iterations}")
        for name in ("position_lr_scale", "scaling_lr_scale"):
            if getattr(self, name) <= 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class BlockPartition:
    """Exclusive assignment of surfels to a bx x by grid of blocks, plus the views each block trains on.

    Block `ix * by + iy` covers the contracted ground cell (ix, iy).
    """

    grid: Tuple[int, int]
    box_min: np.ndarray
    box_max: np.ndarray
    blocks: List[np.ndarray]
    views: List[List[int]] = field(default_factory=list)
    degenerate: List[bool] = field(default_factory=list)
    epsilon: float = 0.05

    def __post_init__(self):
        utils.require(len(self.blocks) == self.grid[0] * self.grid[1], "one surfel list per block")

    def __repr__(self):
        sizes = ", ".join(str(len(b)) for b in self.blocks)
        return f"<BlockPartition {self.grid[0]}x{self.grid[1]} [{sizes}]>"

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_surfels(self) -> int:
        return int(sum(len(b) for b in self.blocks))

    def owner(self) -> np.ndarray:
        """Block index of every surfel"""
        owner = np.full(self.n_surfels, -1, dtype=np.int64)
        for m, index in enumerate(self.blocks):
            owner[index] = m
        return owner

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "box_min": [float(v) for v in self.box_min],
            "box_max": [float(v) for v in self.box_max],
            "epsilon": self.epsilon,
            "blocks": [[int(i) for i in b] for b in self.blocks],
            "views": [list(map(int, v)) for v in self.views],
            "degenerate": [bool(d) for d in self.degenerate],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockPartition":
        try:
            return cls(
                grid=(int(d["grid"][0]), int(d["grid"][1])),
                box_min=np.asarray(d["box_min"], dtype=np.float64),
                box_max=np.asarray(d["box_max"], dtype=np.float64),
                blocks=[np.asarray(b, dtype=np.int64) for b in d["blocks"]],
                views=[list(map(int, v)) for v in d.get("views", [])],
                degenerate=[bool(x) for x in d.get("degenerate", [])],
                epsilon=float(d.get("epsilon", 0.05)),
            )
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise utils.DataError(f"Malformed partition: {e}") from e

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BlockPartition":
        path = Path(path)
        if not path.exists():
            raise utils.MissingArtifactError(path, "partition")
        return cls.from_dict(json.loads(path.read_text()))


def foreground_box(points: np.ndarray, fraction: float = 1.0 / 3.0) -> Tuple[np.ndarray, np.ndarray]:
    """Central `fraction` of the axis-aligned bounds of points, never thinner than 1e-6 per axis"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    utils.require(len(points) > 0, "the foreground box needs at least one point")
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum(fraction * (hi - lo) / 2.0, 1e-6)
    return center - half, center + half


def contract(positions: np.ndarray, box_min: np.ndarray, box_max: np.ndarray) -> np.ndarray:
    """Maps positions inside the box linearly to [-1, 1] and squeezes each outside coordinate into (1, 2).

    Raises:
        utils.ContractError: the box has a non-positive extent
    """

    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    utils.require(bool(np.all(box_max > box_min)), "the foreground box must have a positive extent on every axis")
    center = (box_min + box_max) / 2.0
    half = (box_max - box_min) / 2.0
    m = (np.asarray(positions, dtype=np.float64) - center) / half
    magnitude = np.abs(m)
    outside = np.sign(m) * (2.0 - 1.0 / np.maximum(magnitude, 1.0))
    return np.where(magnitude <= 1.0, m, outside)


def partition(
    model: SceneModel, grid: Tuple[int, int], box: Tuple[np.ndarray, np.ndarray], epsilon: float = 0.05
) -> BlockPartition:
    """Bins contracted ground-plane centers uniformly over (-2, 2)^2 into a bx x by grid"""
    bx, by = grid
    utils.require(bx >= 1 and by >= 1, f"grid must be at least 1x1, got {bx}x{by}")
    contracted = contract(model.means.detach().double().numpy(), *box)
    ix = np.clip(np.floor((contracted[:, 0] + 2.0) / 4.0 * bx), 0, bx - 1).astype(np.int64)
    iy = np.clip(np.floor((contracted[:, 1] + 2.0) / 4.0 * by), 0, by - 1).astype(np.int64)
    block = ix * by + iy
    blocks = [np.nonzero(block == m)[0] for m in range(bx * by)]
    logger.info("Partitioned %d surfels into %dx%d blocks: %s", len(model), bx, by, [len(b) for b in blocks])
    return BlockPartition((bx, by), np.asarray(box[0]), np.asarray(box[1]), blocks, epsilon=epsilon)


def removal_ssim(
    model: SceneModel,
    partition: BlockPartition,
    camera: Camera,
    options: Optional[RenderOptions] = None,
) -> np.ndarray:
    """SSIM between the full render of a view and the render without each block; 1 for empty blocks"""
    full = render(model, camera, options).color
    owner = partition.owner()
    scores = np.ones(partition.n_blocks)
    for m, index in enumerate(partition.blocks):
        if len(index) == 0:
            continue
        without = render(model.select(owner != m), camera, options).color
        scores[m] = float(ssim(full, without))
    return scores


def assign_views(
    model: SceneModel,
    partition: BlockPartition,
    cameras: Sequence[Camera],
    epsilon: Optional[float] = None,
    options: Optional[RenderOptions] = None,
) -> BlockPartition:
    """Assigns each view to every block whose removal changes it by more than epsilon in SSIM.

    A view no block claims goes to the block whose removal changes it most. Blocks left without views are flagged
    degenerate.

    Raises:
        utils.ContractError: no cameras were given or the partition doesn't cover the model
    """

    utils.require(len(cameras) > 0, "view assignment needs at least one camera")
    utils.require(partition.n_surfels == len(model), "the partition doesn't cover the model")
    epsilon = partition.epsilon if epsilon is None else epsilon
    scores = parallel_map(lambda camera: removal_ssim(model, partition, camera, options), cameras)

    views: List[List[int]] = [[] for _ in range(partition.n_blocks)]
    for camera, score in zip(cameras, scores):
        claimed = np.nonzero(score < 1.0 - epsilon)[0]
        if len(claimed) == 0:
            claimed = [int(np.argmin(score))]
        for m in claimed:
            views[int(m)].append(camera.view_id)

    degenerate = [len(v) == 0 for v in views]
    for m, flag in enumerate(degenerate):
        if flag:
            logger.warning(
                "Block %d has no assigned views (%d surfels); it is kept untuned", m, len(partition.blocks[m])
            )
    logger.info("Assigned views per block: %s", [len(v) for v in views])
    return replace(partition, views=views, degenerate=degenerate, epsilon=epsilon)


def block_seed(seed: int, block: int) -> int:
    return seed * 1009 + block + 1


@dataclass
class TuneResult:
    block: int
    model: SceneModel
    peak_count: int
    history: List[Dict[str, float]] = field(default_factory=list)


def tune_block(
    model: SceneModel,
    partition: BlockPartition,
    block: int,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    config: "RunConfig",
    priors: Optional[Dict] = None,
    iterations: Optional[int] = None,
    extent: Optional[float] = None,
) -> TuneResult:
    """Fine-tunes one block's surfels against its assigned views with the rest of the model frozen.

    Learning rates are reduced for positions and scales, the normal loss is on from the start, and trimming runs at
    the start and then every `trim.interval_fraction` of the iterations on the block's own contributions.

    Raises:
        utils.ContractError: the block has no assigned views
        utils.DivergenceError: the loss diverged or the block exceeded the surfel cap

    Returns:
        TuneResult: the block's surfels only
    """

    iterations = config.blocks.tune_iterations if iterations is None else iterations
    owner = partition.owner()
    owned = model.select(torch.from_numpy(np.asarray(partition.blocks[block])))
    if iterations == 0 or len(owned) == 0:
        return TuneResult(block, owned, len(owned))
    assigned = set(partition.views[block]) if partition.views else set()
    picks = [i for i, camera in enumerate(cameras) if camera.view_id in assigned]
    utils.require(len(picks) > 0, f"block {block} has no assigned views")

    context = model.select(owner != block)
    trainer = Trainer(
        owned,
        [cameras[i] for i in picks],
        [images[i] for i in picks],
        extent if extent is not None else scene_extent(cameras),
        config.train,
        config.loss,
        config.densify,
        config.trim,
        config.render,
        priors=priors if config.loss.depth_enabled else None,
        context=context if len(context) else None,
        seed=block_seed(config.seed, block),
        stage="tune",
        lr_scales={"means": config.blocks.position_lr_scale, "log_scales": config.blocks.scaling_lr_scale},
    )
    result = trainer.run(iterations, trim_ratio=config.trim.tune_ratio, trim_at_start=True)
    utils.require(len(trainer.context) == len(context), "tuning changed the frozen context")
    logger.info("Block %d: %d -> %d surfels (peak %d)", block, len(owned), len(result.model), result.peak_count)
    return TuneResult(block, result.model, result.peak_count, result.history)


def tune_blocks(
    model: SceneModel,
    partition: BlockPartition,
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    config: "RunConfig",
    priors: Optional[Dict] = None,
    iterations: Optional[int] = None,
    maximum: Optional[int] = None,
) -> List[TuneResult]:
    """Tunes every block on the worker pool; degenerate blocks pass through untuned"""
    extent = scene_extent(cameras)
    pool = ThreadPool(maximum)
    for m in range(partition.n_blocks):
        skip = bool(partition.degenerate[m]) if partition.degenerate else False

        def task(m=m, skip=skip):
            return tune_block(
                model, partition, m, cameras, images, config, priors, 0 if skip else iterations, extent
            )

        pool.add_task(task)
    return pool.start()


def merge(partition: BlockPartition, tuned: Sequence[Optional[SceneModel]]) -> SceneModel:
    """Concatenates block models in block order

    Raises:
        utils.ContractError: a block is missing
    """

    utils.require(len(tuned) == partition.n_blocks, f"got {len(tuned)} tuned blocks for {partition.n_blocks} blocks")
    missing = [m for m, block in enumerate(tuned) if block is None]
    utils.require(not missing, f"blocks {missing} were not tuned")
    merged = SceneModel.concat(list(tuned))
    logger.info("Merged %d blocks into %d surfels", len(tuned), len(merged))
    return merged


def pretrain(
    dataset: "Dataset",
    config: "RunConfig",
    views: Optional[Sequence[int]] = None,
    iterations: Optional[int] = None,
    on_log: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Initializes surfels from the dataset's points and optimizes them on the training views.

    Args:
        dataset (Dataset): loaded scene
        config (RunConfig): run settings
        views (Sequence[int], optional): view indices to train on. Defaults to the training split.
        iterations (int, optional): overrides the configured iteration count
        on_log (Callable, optional): receives a metrics row at every log interval

    Raises:
        utils.ContractError: the initial cloud is empty
        utils.DivergenceError: the loss diverged or the surfel cap was exceeded

    Returns:
        TrainResult: trained model and its metric history
    """

    if iterations is None:
        iterations = config.train.truncated_pretrain or config.train.iterations
    views = list(dataset.train_indices if views is None else views)
    model = init_from_points(
        dataset.points,
        dataset.colors,
        seed=config.seed,
        init_opacity=config.train.init_opacity,
        dtype=config.train.torch_dtype,
    )
    logger.info("Initialized %d surfels from %s", len(model), dataset.root)
    if iterations == 0:
        return TrainResult(model, [], len(model))
    cameras = [dataset.cameras[i] for i in views]
    trainer = Trainer(
        model,
        cameras,
        [dataset.images[i] for i in views],
        scene_extent(dataset.cameras),
        config.train,
        config.loss,
        config.densify,
        config.trim,
        config.render,
        priors=dataset.priors if config.loss.depth_enabled else None,
        seed=config.seed,
        stage="pretrain",
    )
    return trainer.run(iterations, trim_ratio=config.trim.pretrain_ratio, on_log=on_log)
