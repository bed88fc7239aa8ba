"""Deterministic synthetic town scenes: ray-cast views, depth priors, ground truth and an initial cloud."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import torch

from . import utils
from .common import inverse_sigmoid
from .dataset import (
    PriorEntry,
    save_cameras,
    write_mesh_ply,
    write_pfm,
    write_png,
    write_points_ply,
    write_sidecar,
    write_transform,
)
from .evaluation import sample_triangles
from .surfels import Camera, SceneModel
from .threadable import parallel_map


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# box faces without the bottom, as (axis, side) pairs
_BOX_FACES = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 1))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box standing on the ground: footprint center, size and albedo"""

    x: float
    y: float
    size: Tuple[float, float, float]
    albedo: Tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x - self.size[0] / 2, self.y - self.size[1] / 2, 0.0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x + self.size[0] / 2, self.y + self.size[1] / 2, self.size[2]])


@dataclass(frozen=True)
class SceneSpec:
    """Ground plane, boxes, a ring of cameras looking at the center and the dataset options.

    Attributes:
        ground_half_size (float): the ground covers [-g, g]^2 at z = 0
        ground_albedo (Tuple[float, float, float]): base ground color
        checker_size (float): edge length of the ground checker pattern
        boxes (Tuple[Box, ...]): buildings
        n_cameras (int): views on the ring
        ring_radius (float): horizontal camera distance from the center
        ring_height (float): camera height
        width, height (int): image size in pixels
        fov_x (float): horizontal field of view in degrees
        light (Tuple[float, float, float]): direction toward the light
        ambient (float): ambient shading term
        n_gt_points (int): ground-truth surface samples
        n_init_points (int): initial cloud size
        init_jitter (float): standard deviation of the initial cloud noise
        perturb_priors (bool): store depth priors under a random affine map
        seed (int): sampling seed
    """

    ground_half_size: float = 2.5
    ground_albedo: Tuple[float, float, float] = (0.55, 0.55, 0.5)
    checker_size: float = 0.5
    boxes: Tuple[Box, ...] = ()
    n_cameras: int = 24
    ring_radius: float = 3.0
    ring_height: float = 2.0
    width: int = 96
    height: int = 72
    fov_x: float = 60.0
    light: Tuple[float, float, float] = (0.4, 0.3, 0.85)
    ambient: float = 0.3
    n_gt_points: int = 20000
    n_init_points: int = 3000
    init_jitter: float = 0.01
    perturb_priors: bool = False
    seed: int = 7

    def validate(self) -> None:
        """Checks value ranges

        Raises:
            utils.ContractError: the scene is malformed
        """

        utils.require(self.n_cameras >= 8, f"a scene needs at least 8 cameras, got {self.n_cameras}")
        utils.require(
            64 <= self.width <= 128 and 64 <= self.height <= 128,
            f"image size {self.width}x{self.height} outside 64-128",
        )
        utils.require(self.ground_half_size > 0, "ground must have a positive size")
        g = self.ground_half_size
        for i, box in enumerate(self.boxes):
            utils.require(bool(np.all(np.array(box.size) > 0)), f"box {i} has a non-positive size")
            utils.require(
                bool(np.all(np.abs(box.lo[:2]) <= g) and np.all(np.abs(box.hi[:2]) <= g)),
                f"box {i} leaves the ground",
            )
        utils.require(self.n_gt_points >= 1 and self.n_init_points >= 1, "point counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def town_spec(seed: int = 7, n_boxes: int = 6, **overrides) -> SceneSpec:
    """The bundled town: seeded boxes of varied height around the center"""
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_boxes):
        sx, sy = rng.uniform(0.3, 0.7, size=2)
        sz = rng.uniform(0.3, 1.0)
        x, y = rng.uniform(-1.2, 1.2, size=2)
        albedo = tuple(float(c) for c in rng.uniform(0.2, 0.9, size=3))
        boxes.append(Box(float(x), float(y), (float(sx), float(sy), float(sz)), albedo))
    return SceneSpec(boxes=tuple(boxes), seed=seed, **overrides)


def ring_cameras(spec: SceneSpec) -> List[Camera]:
    cameras = []
    for i in range(spec.n_cameras):
        angle = 2.0 * math.pi * i / spec.n_cameras
        eye = (spec.ring_radius * math.cos(angle), spec.ring_radius * math.sin(angle), spec.ring_height)
        cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), spec.width, spec.height, spec.fov_x, view_id=i))
    return cameras


def _checker(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    cells = np.floor(points[:, 0] / spec.checker_size) + np.floor(points[:, 1] / spec.checker_size)
    return np.where(cells % 2 == 0, 1.0, 0.7)[:, None] * np.asarray(spec.ground_albedo)[None, :]


def ray_cast(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit along each ray.

    Args:
        spec (SceneSpec): scene
        origin (np.ndarray): (3,) ray origin
        dirs (np.ndarray): (N, 3) directions, not necessarily normalized

    Returns:
        tuple: (N,) ray parameters (inf on a miss), (N, 3) normals and (N, 3) albedos
    """

    n = len(dirs)
    t_best = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        hit = origin[None, :] + t_ground[:, None] * dirs
        on_ground = (t_ground > 0) & np.all(np.abs(hit[:, :2]) <= spec.ground_half_size, axis=1)
        t_best = np.where(on_ground, t_ground, t_best)
        normals[on_ground] = (0.0, 0.0, 1.0)
        albedo[on_ground] = _checker(spec, hit[on_ground])

        for box in spec.boxes:
            t1 = (box.lo[None, :] - origin[None, :]) / dirs
            t2 = (box.hi[None, :] - origin[None, :]) / dirs
            t_min = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
            t_max = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
            t_near = t_min.max(axis=1)
            t_far = t_max.min(axis=1)
            closer = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
            axis = np.argmax(t_min, axis=1)
            face_normal = np.zeros((n, 3))
            face_normal[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            t_best = np.where(closer, t_near, t_best)
            normals[closer] = face_normal[closer]
            albedo[closer] = box.albedo
    return t_best, normals, albedo


def shade(spec: SceneSpec, normals: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    return np.clip(albedo * (spec.ambient + (1.0 - spec.ambient) * lambert)[:, None], 0.0, 1.0)


def render_view(spec: SceneSpec, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic color (H, W, 3) and camera-space depth (H, W) of one view; misses are black with infinite depth"""
    rays = camera.pixel_rays(torch.float64).numpy()
    dirs = rays @ camera.rotation
    t, normals, albedo = ray_cast(spec, camera.center, dirs)
    color = np.where(np.isfinite(t)[:, None], shade(spec, normals, albedo), 0.0)
    return color.reshape(camera.height, camera.width, 3), t.reshape(camera.height, camera.width)


def ground_truth_mesh(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ground quad plus the visible faces of every box.

    Returns:
        tuple: vertices, triangles, per-triangle normals and per-triangle albedos
    """

    g = spec.ground_half_size
    vertices = [np.array([[-g, -g, 0.0], [g, -g, 0.0], [g, g, 0.0], [-g, g, 0.0]])]
    faces = [np.array([[0, 1, 2], [0, 2, 3]])]
    normals = [np.array([[0.0, 0.0, 1.0]] * 2)]
    albedos = [np.array([spec.ground_albedo] * 2)]
    offset = 4
    for box in spec.boxes:
        lo, hi = box.lo, box.hi
        for axis, side in _BOX_FACES:
            u, v = [a for a in range(3) if a != axis]
            corners = np.zeros((4, 3))
            corners[:, axis] = hi[axis] if side else lo[axis]
            for k, (a, b) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
                corners[k, u] = hi[u] if a else lo[u]
                corners[k, v] = hi[v] if b else lo[v]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            tri = np.array([[0, 1, 2], [0, 2, 3]])
            if np.dot(np.cross(corners[1] - corners[0], corners[2] - corners[0]), normal) < 0:
                tri = tri[:, ::-1]
            vertices.append(corners)
            faces.append(tri + offset)
            normals.append(np.array([normal] * 2))
            albedos.append(np.array([box.albedo] * 2))
            offset += 4
    return np.concatenate(vertices), np.concatenate(faces), np.concatenate(normals), np.concatenate(albedos)


def under_boxes(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Ground points hidden under a box footprint"""
    hidden = np.zeros(len(points), dtype=bool)
    flat = np.abs(points[:, 2]) < 1e-9
    for box in spec.boxes:
        inside = np.all((points[:, :2] > box.lo[:2]) & (points[:, :2] < box.hi[:2]), axis=1)
        hidden |= flat & inside
    return hidden


def sample_ground_truth(spec: SceneSpec, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-uniform visible surface samples with their normals and albedos"""
    vertices, faces, normals, albedos = ground_truth_mesh(spec)
    points, picks = sample_triangles(vertices, faces, count, seed)
    keep = ~under_boxes(spec, points)
    points, picks = points[keep], picks[keep]
    albedo = albedos[picks]
    ground = picks < 2
    albedo[ground] = _checker(spec, points[ground])
    return points, normals[picks], albedo


def generate(spec: SceneSpec, out_dir: PathLike) -> Path:
    """Writes a complete dataset directory for the scene.

    Raises:
        utils.ContractError: the scene description is malformed
        OSError: the directory can't be written
    """

    spec.validate()
    root = Path(out_dir)
    for sub in ("images", "depth_priors", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    cameras = ring_cameras(spec)
    save_cameras(root / "cameras.json", cameras)
    views = parallel_map(lambda camera: render_view(spec, camera), cameras)

    rng = np.random.default_rng(spec.seed)
    entries = []
    for camera, (color, depth) in zip(cameras, views):
        write_png(root / "images" / f"{camera.view_id:04d}.png", color)
        with np.errstate(divide="ignore"):
            inv = np.where(np.isfinite(depth), 1.0 / depth, np.nan)
        if spec.perturb_priors:
            scale, shift = rng.uniform(0.5, 2.0), rng.uniform(-0.2, 0.2)
            write_pfm(root / "depth_priors" / f"{camera.view_id:04d}.pfm", (inv - shift) / scale)
            entries.append(PriorEntry(camera.view_id, None, None, "finite"))
        else:
            write_pfm(root / "depth_priors" / f"{camera.view_id:04d}.pfm", inv)
            entries.append(PriorEntry(camera.view_id, 1.0, 0.0, "finite"))
    write_sidecar(root / "depth_priors" / "sidecar.txt", entries)

    vertices, faces, _, _ = ground_truth_mesh(spec)
    write_mesh_ply(root / "gt" / "mesh.ply", vertices, faces)
    gt_points, gt_normals, _ = sample_ground_truth(spec, spec.n_gt_points, spec.seed)
    write_points_ply(root / "gt" / "points.ply", gt_points, normals=gt_normals)
    write_transform(root / "gt" / "transform.txt", np.eye(4))

    init_points, init_normals, init_albedo = sample_ground_truth(spec, spec.n_init_points, spec.seed + 1)
    init_points = init_points + rng.normal(scale=spec.init_jitter, size=init_points.shape)
    write_points_ply(root / "points3d.ply", init_points, shade(spec, init_normals, init_albedo))

    (root / "scene.json").write_text(json.dumps(spec.to_dict(), indent=1))
    logger.info(
        "Generated %d views, %d gt points and %d initial points in %s",
        len(cameras),
        len(gt_points),
        len(init_points),
        root,
    )
    return root


def make_adversarial_elongated(model: SceneModel, fraction: float, seed: int = 0) -> SceneModel:
    """Turns a seeded `fraction` of surfels into opaque needles with elongation rate 1e-3.

    Raises:
        utils.ContractError: fraction outside [0, 1)
    """

    utils.require(0.0 <= fraction < 1.0, f"fraction must be in [0, 1), got {fraction}")
    count = int(round(fraction * len(model)))
    if count == 0:
        return model
    rng = np.random.default_rng(seed)
    picks = torch.from_numpy(np.sort(rng.choice(len(model), size=count, replace=False)))
    log_scales = model.log_scales.detach().clone()
    longest = log_scales[picks].max(dim=1).values
    log_scales[picks, 0] = longest
    log_scales[picks, 1] = longest + math.log(1e-3)
    opacity_logits = model.opacity_logits.detach().clone()
    opacity_logits[picks] = float(inverse_sigmoid(np.float64(0.9)))
    return model.replace(log_scales=log_scales, opacity_logits=opacity_logits)
