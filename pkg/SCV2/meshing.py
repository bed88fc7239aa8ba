"""TSDF fusion of rendered median depth and marching-cubes surface extraction."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes
from tqdm import tqdm

from . import utils
from .dataset import read_mesh_ply, write_mesh_ply
from .rasterizer import RenderOptions, render
from .surfels import Camera, SceneModel
from .threadable import parallel_map, workers


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class MeshConfig:
    """Fusion settings.

    Attributes:
        voxel_divisor (int): voxel size is the scene extent divided by this
        trunc_voxels (float): SDF truncation in voxels
        depth_truncation (float, optional): depths beyond this are ignored; None means 10x the scene extent
        padding_voxels (int): margin added around the model bounds
    """

    voxel_divisor: int = 128
    trunc_voxels: float = 4.0
    depth_truncation: Optional[float] = None
    padding_voxels: int = 4

    def validate(self, section: str = "mesh") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        if self.voxel_divisor < 1:
            raise utils.ConfigError(f"{section}.voxel_divisor", f"must be >= 1, got {self.voxel_divisor}")
        if self.trunc_voxels < 1:
            raise utils.ConfigError(f"{section}.trunc_voxels", f"must be >= 1, got {self.trunc_voxels}")
        if self.depth_truncation is not None and self.depth_truncation <= 0:
            raise utils.ConfigError(f"{section}.depth_truncation", f"must be > 0, got {self.depth_truncation}")
        if self.padding_voxels < 0:
            raise utils.ConfigError(f"{section}.padding_voxels", f"must be >= 0, got {self.padding_voxels}")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.faces)

    def __repr__(self):
        return f"<TriangleMesh [{len(self.vertices)} vertices, {len(self.faces)} faces]>"

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self) -> float:
        return float(self.triangle_areas().sum()) if len(self.faces) else 0.0

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and the number of faces sharing each"""
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0, return_counts=True)

    def euler_characteristic(self) -> int:
        edges, _ = self.edges()
        used = len(np.unique(self.faces)) if len(self.faces) else 0
        return used - len(edges) + len(self.faces)

    def boundary_edges(self) -> int:
        _, counts = self.edges()
        return int((counts == 1).sum())

    def save(self, path: PathLike) -> None:
        write_mesh_ply(path, self.vertices, self.faces, self.normals)

    @classmethod
    def load(cls, path: PathLike) -> "TriangleMesh":
        path = Path(path)
        if not path.exists():
            raise utils.MissingArtifactError(path, "mesh")
        vertices, faces = read_mesh_ply(path)
        return cls(vertices, faces, np.zeros_like(vertices))


class TSDFVolume:
    """Dense voxel grid of truncated signed distances, positive on the camera side of the surface.

    Voxel centers sit at `origin + index * voxel_size`. Unobserved voxels hold tsdf 1 and weight 0.

    Args:
        bounds_min, bounds_max (np.ndarray): corners of the fused region
        voxel_size (float): voxel edge length
        truncation (float): SDF truncation distance, at least one voxel

    Raises:
        utils.ContractError: the bounds are empty or the truncation is below the voxel size
    """

    def __init__(self, bounds_min: np.ndarray, bounds_max: np.ndarray, voxel_size: float, truncation: float):
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        utils.require(voxel_size > 0, f"voxel size must be > 0, got {voxel_size}")
        utils.require(truncation >= voxel_size, f"truncation {truncation} is below the voxel size {voxel_size}")
        utils.require(bool(np.all(bounds_max > bounds_min)), "volume bounds must have a positive extent")
        self.origin = bounds_min
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.shape = tuple(int(math.ceil(s)) + 1 for s in (bounds_max - bounds_min) / voxel_size)
        self.tsdf = np.ones(self.shape, dtype=np.float64)
        self.weight = np.zeros(self.shape, dtype=np.float64)
        logger.debug("TSDF volume %s at voxel %.4g", self.shape, voxel_size)

    def __repr__(self):
        return f"<TSDFVolume {self.shape[0]}x{self.shape[1]}x{self.shape[2]} voxel={self.voxel_size:.4g}>"

    @classmethod
    def around(cls, points: np.ndarray, extent: float, config: Optional[MeshConfig] = None) -> "TSDFVolume":
        """Volume covering the bounds of points with the configured voxel size and padding"""
        config = config or MeshConfig()
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        utils.require(len(points) > 0, "cannot size a volume from no points")
        voxel = extent / config.voxel_divisor
        pad = config.padding_voxels * voxel + 1e-9
        return cls(points.min(axis=0) - pad, points.max(axis=0) + pad, voxel, config.trunc_voxels * voxel)

    @property
    def bounds_max(self) -> np.ndarray:
        return self.origin + (np.array(self.shape) - 1) * self.voxel_size

    def voxel_centers(self, xs: slice = slice(None)) -> np.ndarray:
        ix = np.arange(self.shape[0])[xs]
        grid = np.meshgrid(ix, np.arange(self.shape[1]), np.arange(self.shape[2]), indexing="ij")
        return self.origin + np.stack(grid, axis=-1) * self.voxel_size

    def _integrate_slab(self, xs: slice, depth: np.ndarray, camera: Camera, depth_truncation: float) -> None:
        centers = self.voxel_centers(xs).reshape(-1, 3)
        cam = camera.world_to_camera(centers)
        z = cam[:, 2]
        in_front = z > 1e-9
        safe_z = np.where(in_front, z, 1.0)
        u = np.round(camera.fx * cam[:, 0] / safe_z + camera.cx).astype(np.int64)
        v = np.round(camera.fy * cam[:, 1] / safe_z + camera.cy).astype(np.int64)
        inside = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        d = np.full(len(centers), np.inf)
        d[inside] = depth[v[inside], u[inside]]
        valid = inside & np.isfinite(d) & (d > 0) & (d <= depth_truncation)
        sdf = d - z
        valid &= sdf >= -self.truncation
        if not valid.any():
            return
        normalized = np.clip(sdf[valid], -self.truncation, self.truncation) / self.truncation

        tsdf = self.tsdf[xs].reshape(-1)
        weight = self.weight[xs].reshape(-1)
        tsdf[valid] = (weight[valid] * tsdf[valid] + normalized) / (weight[valid] + 1.0)
        weight[valid] += 1.0
        self.tsdf[xs] = tsdf.reshape(self.tsdf[xs].shape)
        self.weight[xs] = weight.reshape(self.weight[xs].shape)

    def integrate(self, depth: Union[np.ndarray, torch.Tensor], camera: Camera, depth_truncation: float = math.inf):
        """Fuses one median-depth image; non-finite depths are skipped.

        Each voxel in front of the observed depth, or less than one truncation behind it, takes a unit-weight
        running average of its normalized clamped SDF.

        Raises:
            utils.ContractError: the image size doesn't match the camera, the truncation isn't positive or the camera
                pose isn't finite

        Returns:
            TSDFVolume: self
        """

        depth = depth.detach().double().numpy() if isinstance(depth, torch.Tensor) else np.asarray(depth, np.float64)
        utils.require(
            depth.shape == (camera.height, camera.width), f"depth image {depth.shape} doesn't match the camera"
        )
        utils.require(depth_truncation > 0, f"depth truncation must be > 0, got {depth_truncation}")
        utils.require(
            bool(np.isfinite(camera.rotation).all() and np.isfinite(camera.translation).all()),
            "camera pose must be finite",
        )
        utils.require(bool(np.abs(camera.center).max() < 1e12), "camera lies outside the representable range")
        slabs = max(1, min(workers.threads, self.shape[0]))
        bounds = np.linspace(0, self.shape[0], slabs + 1).astype(int)
        parallel_map(
            lambda i: self._integrate_slab(slice(bounds[i], bounds[i + 1]), depth, camera, depth_truncation),
            range(slabs),
        )
        return self

    def observed_cells(self) -> np.ndarray:
        """Cells whose 8 corners all carry weight"""
        w = self.weight > 0
        cells = w[:-1, :-1, :-1].copy()
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    cells &= w[dx : w.shape[0] - 1 + dx, dy : w.shape[1] - 1 + dy, dz : w.shape[2] - 1 + dz]
        return cells


def _vertex_normals(volume: TSDFVolume, grid_vertices: np.ndarray) -> np.ndarray:
    """Normalized TSDF gradient at vertex positions given in voxel units, pointing to the camera side"""
    gradient = np.gradient(volume.tsdf)
    normals = np.stack(
        [map_coordinates(g, grid_vertices.T, order=1, mode="nearest") for g in gradient],
        axis=1,
    )
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.where(length > 0, normals / np.maximum(length, 1e-300), 0.0)


def extract_mesh(volume: TSDFVolume) -> TriangleMesh:
    """Marching cubes on the zero level set, restricted to cells whose corners were all observed.

    The TSDF grows away from the surface on the camera side, so faces wind counter-clockwise seen from there and
    agree with the vertex normals.

    Returns:
        TriangleMesh: vertices in world units, faces and normals; empty when there is no zero crossing
    """

    if min(volume.shape) < 2:
        return TriangleMesh.empty()
    cells = volume.observed_cells()
    tsdf = volume.tsdf
    observed = tsdf[volume.weight > 0]
    if not cells.any() or observed.min() > 0 or observed.max() < 0:
        return TriangleMesh.empty()
    mask = np.zeros(volume.shape, dtype=bool)
    mask[:-1, :-1, :-1] = cells
    try:
        verts, faces, _, _ = marching_cubes(
            tsdf, level=0.0, gradient_direction="ascent", allow_degenerate=False, mask=mask
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()

    centroid = verts[faces].mean(axis=1)
    cell = np.clip(np.floor(centroid + 1e-9).astype(np.int64), 0, np.array(cells.shape) - 1)
    keep = cells[cell[:, 0], cell[:, 1], cell[:, 2]]
    faces = faces[keep]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, inverse = np.unique(faces, return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)
    grid_vertices = verts[used].astype(np.float64)
    mesh = TriangleMesh(
        vertices=volume.origin + grid_vertices * volume.voxel_size,
        faces=faces,
        normals=_vertex_normals(volume, grid_vertices),
    )
    logger.info("Extracted %r", mesh)
    return mesh


def median_depths(
    model: SceneModel, cameras: Sequence[Camera], options: Optional[RenderOptions] = None
) -> list:
    return parallel_map(lambda camera: render(model, camera, options).median_depth, cameras)


def fuse(
    model: SceneModel,
    cameras: Sequence[Camera],
    extent: float,
    config: Optional[MeshConfig] = None,
    options: Optional[RenderOptions] = None,
) -> Tuple[TSDFVolume, TriangleMesh]:
    """Renders median depth for every camera, fuses it in camera order and extracts the surface"""
    config = config or MeshConfig()
    utils.require(len(model) > 0, "cannot mesh an empty model")
    volume = TSDFVolume.around(model.means.detach().double().numpy(), extent, config)
    depth_truncation = config.depth_truncation or 10.0 * extent
    depths = median_depths(model, cameras, options)
    for camera, depth in tqdm(list(zip(cameras, depths)), desc="fuse", disable=None, leave=False):
        volume.integrate(depth, camera, depth_truncation)
    return volume, extract_mesh(volume)
