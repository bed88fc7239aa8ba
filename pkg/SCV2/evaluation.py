"""Geometry evaluation: downsampling, visibility-based crop volumes, surface sampling and F1."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from scipy.spatial import Delaunay, QhullError, cKDTree
from shapely.geometry import MultiPoint, Polygon
from shapely.ops import unary_union

from . import utils
from .rasterizer import RenderOptions, render_visibility
from .surfels import Camera
from .threadable import parallel_map


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
_ORACLE_CHUNK = 256


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings.

    Attributes:
        downsample_voxel (float, optional): ground-truth voxel size; None means extent / 128
        vis_threshold (int): minimum number of views that must see a ground-truth point
        alpha_factor (float): alpha-shape radius in units of the median nearest-neighbour spacing
        alpha (float, optional): explicit alpha-shape radius
        tau (float, optional): explicit distance threshold
        tau_scale (float): tau in units of the median nearest-neighbour spacing
        tau_min, tau_max (float): clamp range of the derived tau
        samples (int, optional): surface samples; None means as many as cropped ground-truth points
    """

    downsample_voxel: Optional[float] = None
    vis_threshold: int = 3
    alpha_factor: float = 3.0
    alpha: Optional[float] = None
    tau: Optional[float] = None
    tau_scale: float = 1.5
    tau_min: float = 1e-4
    tau_max: float = math.inf
    samples: Optional[int] = None

    def validate(self, section: str = "eval") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        if self.vis_threshold < 1:
            raise utils.ConfigError(f"{section}.vis_threshold", f"must be >= 1, got {self.vis_threshold}")
        for name in ("downsample_voxel", "alpha", "tau", "samples"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be > 0, got {value}")
        for name in ("alpha_factor", "tau_scale", "tau_min"):
            if getattr(self, name) <= 0:
                raise utils.ConfigError(f"{section}.{name}", f"must be > 0, got {getattr(self, name)}")
        if self.tau_max < self.tau_min:
            raise utils.ConfigError(f"{section}.tau_max", f"must be >= tau_min ({self.tau_min}), got {self.tau_max}")


@dataclass(frozen=True, eq=False)
class CropVolume:
    """Ground-plane polygon and height interval, both in the frame of `transform`"""

    polygon: Union[Polygon, "shapely.MultiPolygon"]
    z_min: float
    z_max: float
    transform: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        utils.require(
            self.z_min < self.z_max, f"crop heights must satisfy z_min < z_max, got {self.z_min} and {self.z_max}"
        )
        utils.require(self.polygon.is_valid, "crop polygon is not a valid simple geometry")

    @property
    def area(self) -> float:
        return float(self.polygon.area)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tau: float
    n_recon: int
    n_gt_cropped: int
    n_gt: int = 0
    crop: Optional[dict] = None
    cropped: str = "both"
    distances: Optional[dict] = None

    def to_dict(self, with_distances: bool = False) -> dict:
        d = asdict(self)
        if not with_distances:
            d.pop("distances")
        return d

    def save(self, path: PathLike, with_distances: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_distances), indent=1, sort_keys=True))


def voxel_downsample(cloud: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid of the points in every occupied voxel, ordered by voxel key

    Raises:
        utils.ContractError: voxel isn't positive
    """

    utils.require(voxel > 0, f"voxel size must be > 0, got {voxel}")
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud)
    return sums / counts[:, None]


def median_spacing(points: np.ndarray) -> float:
    """Median nearest-neighbour distance, 0 for fewer than two points"""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    distances, _ = cKDTree(points).query(points, k=2)
    return float(np.median(distances[:, 1]))


def to_frame(cloud: np.ndarray, transform: np.ndarray) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    return cloud @ transform[:3, :3].T + transform[:3, 3]


def alpha_shape(points: np.ndarray, alpha: float):
    """Union of the Delaunay triangles whose circumradius is below alpha.

    Degenerate inputs (fewer than 3 points, collinear points, or no triangle passing the filter) fall back to the
    convex hull buffered by alpha.
    """

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    fallback = MultiPoint([tuple(p) for p in points]).convex_hull.buffer(alpha)
    if len(points) < 3:
        return fallback
    try:
        triangulation = Delaunay(points)
    except QhullError:
        return fallback
    a, b, c = (points[triangulation.simplices[:, i]] for i in range(3))
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    cross = (b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0]
    area = 0.5 * np.abs(cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        circumradius = np.where(area > 0, la * lb * lc / (4.0 * area), np.inf)
    kept = triangulation.simplices[circumradius < alpha]
    if len(kept) == 0:
        return fallback
    shape = unary_union([Polygon(points[tri]) for tri in kept])
    return shape if shape.is_valid else shape.buffer(0)


def visibility_counts(
    points: np.ndarray, cameras: Sequence[Camera], radius: float, options: Optional[RenderOptions] = None
) -> np.ndarray:
    """Number of views in which each point survives the visibility render"""
    masks = parallel_map(lambda camera: render_visibility(points, camera, radius, options), cameras)
    counts = np.zeros(len(points), dtype=np.int64)
    for mask in masks:
        counts += mask.astype(np.int64)
    return counts


def estimate_crop_volume(
    gt_cloud: np.ndarray,
    cameras: Sequence[Camera],
    vis_threshold: int = 3,
    alpha: Optional[float] = None,
    transform: Optional[np.ndarray] = None,
    radius: Optional[float] = None,
    options: Optional[RenderOptions] = None,
    alpha_factor: float = 3.0,
) -> CropVolume:
    """Alpha shape and height range of the ground-truth points seen by at least `vis_threshold` views.

    A flat height range is widened by half the visibility radius on each side.

    Args:
        gt_cloud (np.ndarray): (N, 3) ground-truth points in world coordinates
        cameras (Sequence[Camera]): training views
        vis_threshold (int): minimum view count
        alpha (float, optional): alpha-shape radius; defaults to `alpha_factor` x the median spacing of the survivors
        transform (np.ndarray, optional): 4x4 world-to-ground transform; z is height
        radius (float, optional): disk radius of the visibility render; defaults to the median spacing
        options (RenderOptions, optional): rasterizer settings
        alpha_factor (float): see `alpha`

    Raises:
        utils.ContractError: no camera, a threshold below 1, or no point survives

    Returns:
        CropVolume: polygon and heights in the ground frame
    """

    utils.require(len(cameras) >= 1, "crop estimation needs at least one camera")
    utils.require(vis_threshold >= 1, f"visibility threshold must be >= 1, got {vis_threshold}")
    gt_cloud = np.asarray(gt_cloud, dtype=np.float64).reshape(-1, 3)
    transform = np.eye(4) if transform is None else np.asarray(transform, dtype=np.float64)
    radius = radius or median_spacing(gt_cloud) or 1e-3
    counts = visibility_counts(gt_cloud, cameras, radius, options)
    survivors = gt_cloud[counts >= vis_threshold]
    utils.require(
        len(survivors) > 0, f"no ground-truth point is visible in at least {vis_threshold} views"
    )
    ground = to_frame(survivors, transform)
    if alpha is None:
        alpha = alpha_factor * (median_spacing(ground[:, :2]) or radius)
    polygon = alpha_shape(ground[:, :2], alpha)
    z_min, z_max = float(ground[:, 2].min()), float(ground[:, 2].max())
    if z_max - z_min <= 0:
        # flat reference: widen by half the visibility radius each way
        z_min, z_max = z_min - 0.5 * radius, z_max + 0.5 * radius
    volume = CropVolume(polygon, z_min, z_max, transform)
    logger.info(
        "Crop volume from %d of %d points: area %.4g, z in [%.4g, %.4g]",
        len(survivors),
        len(gt_cloud),
        volume.area,
        volume.z_min,
        volume.z_max,
    )
    return volume


def crop(cloud: np.ndarray, volume: CropVolume) -> np.ndarray:
    """Points inside the polygon (boundary included) and within the height interval"""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        return cloud
    ground = to_frame(cloud, volume.transform)
    inside = shapely.intersects_xy(volume.polygon, ground[:, 0], ground[:, 1])
    inside &= (ground[:, 2] >= volume.z_min) & (ground[:, 2] <= volume.z_max)
    return cloud[inside]


def sample_triangles(
    vertices: np.ndarray, faces: np.ndarray, count: int, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on a triangle mesh and the face each sample lies on

    Raises:
        utils.ContractError: count is below 1 or the mesh has no area
    """

    utils.require(count >= 1, f"sample count must be >= 1, got {count}")
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    utils.require(len(faces) > 0, "cannot sample an empty mesh")
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    utils.require(total > 0, "cannot sample a mesh with zero area")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(faces), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))[:, None]
    r2 = rng.random(count)[:, None]
    return (1.0 - r1) * a[picks] + r1 * (1.0 - r2) * b[picks] + r1 * r2 * c[picks], picks


def sample_surface(vertices: np.ndarray, faces: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh

    Raises:
        utils.ContractError: count is below 1 or the mesh has no area
    """

    return sample_triangles(vertices, faces, count, seed)[0]


def nearest_distances(queries: np.ndarray, reference: np.ndarray, oracle: bool = False) -> np.ndarray:
    """Distance from every query point to its nearest reference point"""
    if not oracle:
        return cKDTree(reference).query(queries, k=1)[0]

    def chunk(start):
        block = queries[start : start + _ORACLE_CHUNK]
        diff = block[:, None, :] - reference[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2).min(axis=1))

    parts = parallel_map(chunk, range(0, len(queries), _ORACLE_CHUNK))
    return np.concatenate(parts) if parts else np.zeros(0)


def default_tau(gt_cloud: np.ndarray, config: Optional[EvalConfig] = None) -> float:
    config = config or EvalConfig()
    if config.tau is not None:
        return config.tau
    tau = config.tau_scale * median_spacing(gt_cloud)
    return float(np.clip(tau, config.tau_min, config.tau_max))


def f1_score(recon: np.ndarray, gt: np.ndarray, tau: float, oracle: bool = False) -> EvalReport:
    """Precision, recall and F1 at distance threshold tau.

    Args:
        recon (np.ndarray): reconstructed points
        gt (np.ndarray): ground-truth points
        tau (float): distance threshold
        oracle (bool, optional): use exhaustive pairing instead of the spatial index

    Raises:
        utils.ContractError: a cloud is empty or tau isn't positive
    """

    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    utils.require(len(recon) > 0 and len(gt) > 0, "F1 needs two non-empty clouds")
    utils.require(tau > 0, f"tau must be > 0, got {tau}")
    to_gt = nearest_distances(recon, gt, oracle)
    to_recon = nearest_distances(gt, recon, oracle)
    precision = float(np.mean(to_gt <= tau))
    recall = float(np.mean(to_recon <= tau))
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        precision,
        recall,
        f1,
        float(tau),
        len(recon),
        len(gt),
        len(gt),
        distances={"recon_to_gt": to_gt.tolist(), "gt_to_recon": to_recon.tolist()},
    )


def align(cloud: np.ndarray, transform: np.ndarray) -> np.ndarray:
    """Applies a 4x4 similarity transform

    Raises:
        utils.ContractError: the transform isn't an invertible similarity with positive scale
    """

    transform = np.asarray(transform, dtype=np.float64)
    utils.require(transform.shape == (4, 4), f"transform must be 4x4, got {transform.shape}")
    utils.require(np.allclose(transform[3], [0.0, 0.0, 0.0, 1.0]), "transform's last row must be 0 0 0 1")
    linear = transform[:3, :3]
    det = np.linalg.det(linear)
    utils.require(abs(det) > 1e-12, "transform is singular")
    scale = np.cbrt(det)
    utils.require(scale > 0, "transform must have a positive scale")
    utils.require(
        np.allclose(linear.T @ linear, scale**2 * np.eye(3), atol=1e-6 * max(scale**2, 1.0)),
        "transform is not a similarity",
    )
    return to_frame(cloud, transform)


def evaluate_mesh(
    vertices: np.ndarray,
    faces: np.ndarray,
    gt_points: np.ndarray,
    cameras: Sequence[Camera],
    extent: float,
    config: Optional[EvalConfig] = None,
    transform: Optional[np.ndarray] = None,
    recon_transform: Optional[np.ndarray] = None,
    seed: int = 0,
    oracle: bool = False,
    options: Optional[RenderOptions] = None,
) -> EvalReport:
    """Full protocol: downsample the ground truth, estimate the crop, sample the mesh, crop both clouds and score.

    Raises:
        utils.ContractError: an input is empty or nothing survives cropping
    """

    config = config or EvalConfig()
    gt = voxel_downsample(gt_points, config.downsample_voxel or extent / 128.0)
    volume = estimate_crop_volume(
        gt, cameras, config.vis_threshold, config.alpha, transform, options=options, alpha_factor=config.alpha_factor
    )
    gt_cropped = crop(gt, volume)
    recon = sample_surface(vertices, faces, config.samples or max(len(gt_cropped), 1), seed)
    if recon_transform is not None:
        recon = align(recon, recon_transform)
    recon_cropped = crop(recon, volume)
    utils.require(len(gt_cropped) > 0, "cropping removed every ground-truth point")
    utils.require(len(recon_cropped) > 0, "cropping removed every reconstructed point")
    tau = default_tau(gt, config)
    report = f1_score(recon_cropped, gt_cropped, tau, oracle)
    report.n_gt = len(gt)
    report.crop = {"area": volume.area, "zmin": volume.z_min, "zmax": volume.z_max}
    logger.info("F1 %.4f (P %.4f, R %.4f) at tau %.4g", report.f1, report.precision, report.recall, tau)
    return report
