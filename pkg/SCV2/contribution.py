import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from . import utils
from .rasterizer import RenderOptions, render
from .surfels import Camera, SceneModel
from .threadable import parallel_map


logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5


@dataclass(frozen=True)
class ContributionStats:
    """Per-surfel sums of single-view contributions over `n_views` views"""

    sums: np.ndarray
    n_views: int = 0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        utils.require(bool(np.all(self.sums >= 0)), "contribution sums must be non-negative")
        utils.require(self.n_views >= 0, "view count must be non-negative")

    @classmethod
    def zeros(cls, n: int, gamma: float = DEFAULT_GAMMA) -> "ContributionStats":
        return cls(np.zeros(n, dtype=np.float64), 0, gamma)

    def add(self, values: np.ndarray) -> "ContributionStats":
        values = np.asarray(values, dtype=np.float64)
        utils.require(values.shape == self.sums.shape, f"got {values.shape[0]} values for {self.sums.shape[0]} surfels")
        return ContributionStats(self.sums + values, self.n_views + 1, self.gamma)


class TrimResult(NamedTuple):
    model: SceneModel
    keep: np.ndarray
    threshold: float


def single_view_contribution(
    model: SceneModel, camera: Camera, gamma: float = DEFAULT_GAMMA, options: Optional[RenderOptions] = None
) -> np.ndarray:
    """Mean of alpha^gamma * T^(1 - gamma) over the pixels where each surfel's blend weight passes the cutoff.

    Surfels without such pixels get 0.

    Raises:
        utils.ContractError: gamma outside [0, 1]
    """

    output = render(model, camera, options, contribution_gamma=gamma)
    sums = output.contribution_sum.numpy()
    pixels = output.contribution_pixels.numpy()
    return np.where(pixels > 0, sums / np.maximum(pixels, 1), 0.0)


def accumulate_contributions(
    model: SceneModel,
    cameras: Sequence[Camera],
    gamma: float = DEFAULT_GAMMA,
    options: Optional[RenderOptions] = None,
) -> ContributionStats:
    """Single-view contributions of every camera, rendered on the worker pool and summed in camera order"""
    per_view = parallel_map(lambda camera: single_view_contribution(model, camera, gamma, options), cameras)
    stats = ContributionStats.zeros(len(model), gamma)
    for values in per_view:
        stats = stats.add(values)
    return stats


def average_contribution(stats: ContributionStats) -> np.ndarray:
    """Mean contribution over the accumulated views; never-observed surfels get 0

    Raises:
        utils.ContractError: no view was accumulated
    """

    utils.require(stats.n_views >= 1, "average contribution needs at least one view")
    return stats.sums / stats.n_views


def trim(model: SceneModel, contributions: np.ndarray, ratio: float) -> TrimResult:
    """Removes every surfel whose contribution is at or below the nearest-rank `ratio` quantile.

    Args:
        model (SceneModel): model to trim
        contributions (np.ndarray): (N,) contributions
        ratio (float): quantile in [0, 1); 0 removes only zero contributions

    Raises:
        utils.ContractError: the sizes differ or every surfel would be removed

    Returns:
        TrimResult: trimmed model, keep mask and threshold
    """

    contributions = np.asarray(contributions, dtype=np.float64)
    utils.require(
        len(contributions) == len(model), f"got {len(contributions)} contributions for {len(model)} surfels"
    )
    threshold = utils.nearest_rank_threshold(contributions, ratio)
    keep = contributions > threshold
    utils.require(bool(keep.any()), f"trimming at ratio {ratio} (threshold {threshold:.3g}) would remove every surfel")
    logger.info("Trim at ratio %.3f removed %d of %d surfels", ratio, int((~keep).sum()), len(model))
    return TrimResult(model.select(keep), keep, threshold)


def export_csv(path: Union[str, Path], contributions: np.ndarray, stats: Optional[ContributionStats] = None) -> None:
    """Writes one row per surfel: index, contribution and, when given, the accumulated sum"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "contribution"] + (["sum", "n_views"] if stats is not None else []))
        for i, value in enumerate(contributions):
            row = [i, repr(float(value))]
            if stats is not None:
                row += [repr(float(stats.sums[i])), stats.n_views]
            writer.writerow(row)
