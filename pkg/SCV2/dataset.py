"""Dataset directory layout and file formats.

    <root>/images/0000.png           8-bit RGB views
    <root>/cameras.json              pinhole intrinsics and world-to-camera extrinsics per view
    <root>/points3d.ply              initial sparse cloud (x, y, z, red, green, blue)
    <root>/depth_priors/0000.pfm     raw inverse depth per view
    <root>/depth_priors/sidecar.txt  view_id scale shift mask per line ("auto" scale/shift = align from points3d)
    <root>/gt/mesh.ply, gt/points.ply, gt/transform.txt
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from . import utils
from .objective import DepthPrior, align_depth_prior
from .surfels import Camera


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TEST_EVERY = 8
MASK_CONVENTIONS = ("finite_positive", "finite")


def write_pfm(path: PathLike, image: np.ndarray) -> None:
    """Writes a single-channel little-endian PFM, rows stored bottom-up"""
    image = np.asarray(image, dtype="<f4")
    utils.require(image.ndim == 2, f"PFM writer takes (H, W) images, got shape {image.shape}")
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(image).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    """Reads a single- or three-channel PFM into a float32 array with the top row first

    Raises:
        utils.DataError: the header is malformed or the file is truncated
    """

    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise utils.DataError(f"{path} is not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise utils.DataError(f"{path} has a malformed PFM size line")
        width, height = int(dims.group(1)), int(dims.group(2))
        scale = float(f.readline().strip())
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    if data.size != width * height * channels:
        raise utils.DataError(f"{path} holds {data.size} values, expected {width * height * channels}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path: PathLike, image: np.ndarray) -> None:
    """Writes an (H, W, 3) float image in [0, 1] as 8-bit RGB"""
    data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_points_ply(
    path: PathLike, points: np.ndarray, colors: Optional[np.ndarray] = None, normals: Optional[np.ndarray] = None
) -> None:
    """Writes a binary PLY point cloud; colors in [0, 1] are stored as uchar"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vertices = np.empty(len(points), dtype=fields)
    vertices["x"], vertices["y"], vertices["z"] = points.T
    if normals is not None:
        vertices["nx"], vertices["ny"], vertices["nz"] = np.asarray(normals).reshape(-1, 3).T
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255.0), 0, 255).astype(np.uint8)
        vertices["red"], vertices["green"], vertices["blue"] = rgb.T
    PlyData([PlyElement.describe(vertices, "vertex")]).write(str(path))


def read_points_ply(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Returns (N, 3) positions and (N, 3) colors in [0, 1] when present

    Raises:
        utils.MissingArtifactError: the file doesn't exist
    """

    path = Path(path)
    if not path.exists():
        raise utils.MissingArtifactError(path)
    vertex = PlyData.read(str(path))["vertex"]
    points = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    names = vertex.data.dtype.names
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1).astype(np.float64) / 255.0
    return points, colors


def write_mesh_ply(
    path: PathLike, vertices: np.ndarray, faces: np.ndarray, normals: Optional[np.ndarray] = None
) -> None:
    """Binary PLY mesh: float32 vertices (and normals), u32 triangle indices"""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if normals is not None:
        fields += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    vertex = np.empty(len(vertices), dtype=fields)
    vertex["x"], vertex["y"], vertex["z"] = vertices.T
    if normals is not None:
        vertex["nx"], vertex["ny"], vertex["nz"] = np.asarray(normals, dtype=np.float64).reshape(-1, 3).T
    face = np.empty(len(faces), dtype=[("vertex_indices", "u4", (3,))])
    face["vertex_indices"] = np.asarray(faces, dtype=np.uint32).reshape(-1, 3)
    PlyData(
        [PlyElement.describe(vertex, "vertex"), PlyElement.describe(face, "face", len_types={"vertex_indices": "u1"})]
    ).write(str(path))


def read_mesh_ply(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (V, 3) vertices and (F, 3) triangles

    Raises:
        utils.MissingArtifactError: the file doesn't exist
        utils.DataError: a face isn't a triangle
    """

    path = Path(path)
    if not path.exists():
        raise utils.MissingArtifactError(path)
    ply = PlyData.read(str(path))
    vertex = ply["vertex"]
    vertices = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in [el.name for el in ply.elements] and ply["face"].count:
        rows = ply["face"]["vertex_indices"]
        if any(len(row) != 3 for row in rows):
            raise utils.DataError(f"{path} holds non-triangular faces")
        faces = np.stack([np.asarray(row, dtype=np.int64) for row in rows])
    return vertices, faces


def save_cameras(path: PathLike, cameras: Sequence[Camera]) -> None:
    views = []
    for camera in cameras:
        entry = camera.to_dict()
        entry["image"] = f"images/{camera.view_id:04d}.png"
        views.append(entry)
    Path(path).write_text(json.dumps({"views": views}, indent=2))


def load_cameras(path: PathLike) -> List[Camera]:
    """Reads cameras.json

    Raises:
        utils.MissingArtifactError: the file doesn't exist
        utils.DataError: an entry is malformed or view ids repeat
    """

    path = Path(path)
    if not path.exists():
        raise utils.MissingArtifactError(path, "gen")
    try:
        views = json.loads(path.read_text())["views"]
        cameras = [Camera.from_dict(view) for view in views]
    except (KeyError, TypeError, ValueError, utils.ContractError) as e:
        raise utils.DataError(f"{path} is malformed: {e}") from e
    ids = [camera.view_id for camera in cameras]
    if len(set(ids)) != len(ids):
        raise utils.DataError(f"{path} repeats view ids")
    return cameras


def write_transform(path: PathLike, transform: np.ndarray) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in np.asarray(transform).reshape(16)) + "\n")


def read_transform(path: PathLike) -> np.ndarray:
    """Reads 16 whitespace-separated floats, row-major

    Raises:
        utils.DataError: the file doesn't hold 16 numbers
    """

    values = Path(path).read_text().split()
    if len(values) != 16:
        raise utils.DataError(f"{path} must hold 16 numbers, got {len(values)}")
    return np.array([float(v) for v in values], dtype=np.float64).reshape(4, 4)


@dataclass(frozen=True)
class PriorEntry:
    view_id: int
    scale: Optional[float]
    shift: Optional[float]
    mask: str = "finite_positive"


def write_sidecar(path: PathLike, entries: Sequence[PriorEntry]) -> None:
    lines = ["# view_id scale shift mask"]
    for entry in entries:
        scale = "auto" if entry.scale is None else repr(entry.scale)
        shift = "auto" if entry.shift is None else repr(entry.shift)
        lines.append(f"{entry.view_id} {scale} {shift} {entry.mask}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path: PathLike) -> Dict[int, PriorEntry]:
    """Reads the depth prior sidecar

    Raises:
        utils.DataError: a line is malformed or names an unknown mask convention
    """

    entries = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[3] not in MASK_CONVENTIONS:
            raise utils.DataError(f"{path}:{number}: expected 'view_id scale shift mask', got {line!r}")
        try:
            view_id = int(parts[0])
            scale = None if parts[1] == "auto" else float(parts[1])
            shift = None if parts[2] == "auto" else float(parts[2])
        except ValueError as e:
            raise utils.DataError(f"{path}:{number}: {e}") from e
        entries[view_id] = PriorEntry(view_id, scale, shift, parts[3])
    return entries


def prior_mask(raw: np.ndarray, convention: str) -> np.ndarray:
    valid = np.isfinite(raw)
    if convention == "finite_positive":
        valid &= raw > 0
    return valid


def project_reference(points: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest projected point per pixel as sparse inverse-depth samples: (K, 2) (row, col) and (K,) values"""
    uv, z = camera.project(points)
    front = z > 1e-6
    cols = np.round(uv[front, 0]).astype(np.int64)
    rows = np.round(uv[front, 1]).astype(np.int64)
    z = z[front]
    inside = (cols >= 0) & (cols < camera.width) & (rows >= 0) & (rows < camera.height)
    rows, cols, z = rows[inside], cols[inside], z[inside]
    order = np.lexsort((z, rows * camera.width + cols))
    flat = (rows * camera.width + cols)[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    pick = order[first]
    return np.stack([rows[pick], cols[pick]], axis=1), 1.0 / z[pick]


@dataclass
class Dataset:
    """Views, initial points and depth priors of one scene directory"""

    root: Path
    cameras: List[Camera]
    images: List[np.ndarray]
    points: np.ndarray
    colors: np.ndarray
    priors: Dict[int, DepthPrior] = field(default_factory=dict)

    def __repr__(self):
        return f"<Dataset [{self.root}] {len(self.cameras)} views, {len(self.points)} points>"

    @classmethod
    def load(cls, root: PathLike, with_priors: bool = True) -> "Dataset":
        """Loads a dataset directory and aligns its depth priors.

        Raises:
            utils.MissingArtifactError: a required file is missing
            utils.DataError: files are inconsistent
        """

        root = Path(root)
        cameras = load_cameras(root / "cameras.json")
        images = []
        for camera in cameras:
            path = root / "images" / f"{camera.view_id:04d}.png"
            if not path.exists():
                raise utils.MissingArtifactError(path, "gen")
            image = read_png(path)
            if image.shape[:2] != (camera.height, camera.width):
                raise utils.DataError(
                    f"{path} is {image.shape[1]}x{image.shape[0]}, camera says {camera.width}x{camera.height}"
                )
            images.append(image)
        points, colors = read_points_ply(root / "points3d.ply")
        if colors is None:
            colors = np.full_like(points, 0.5)
        dataset = cls(root, cameras, images, points, colors)
        if with_priors and (root / "depth_priors" / "sidecar.txt").exists():
            dataset.priors = dataset.load_priors()
        return dataset

    def load_priors(self) -> Dict[int, DepthPrior]:
        folder = self.root / "depth_priors"
        entries = read_sidecar(folder / "sidecar.txt")
        priors = {}
        for camera in self.cameras:
            entry = entries.get(camera.view_id)
            path = folder / f"{camera.view_id:04d}.pfm"
            if entry is None or not path.exists():
                continue
            raw = read_pfm(path).astype(np.float64)
            if raw.shape != (camera.height, camera.width):
                raise utils.DataError(f"{path} doesn't match the size of view {camera.view_id}")
            mask = prior_mask(raw, entry.mask)
            if entry.scale is None or entry.shift is None:
                pixels, values = project_reference(self.points, camera)
                priors[camera.view_id] = align_depth_prior(raw, pixels, values, mask, camera.view_id)
            else:
                priors[camera.view_id] = DepthPrior(
                    np.where(mask, raw, 0.0), mask, entry.scale, entry.shift, camera.view_id
                )
        logger.info("Loaded %d depth priors from %s", len(priors), folder)
        return priors

    @property
    def test_indices(self) -> List[int]:
        return [i for i in range(len(self.cameras)) if i % TEST_EVERY == 0 and len(self.cameras) > 1]

    @property
    def train_indices(self) -> List[int]:
        test = set(self.test_indices)
        return [i for i in range(len(self.cameras)) if i not in test]

    def subsample_train(self, keep_fraction: float) -> List[int]:
        """Evenly spaced subset of the training views, used for sparse-view runs"""
        train = self.train_indices
        count = max(1, int(round(keep_fraction * len(train))))
        picks = np.unique(np.linspace(0, len(train) - 1, count).round().astype(int))
        return [train[i] for i in picks]
