import dataclasses
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np
import torch

from . import utils
from .common import SH_COEFFS, inverse_sigmoid, look_at_rotation, quat_to_rotmat, sh_to_rgb


SH_DIM = SH_COEFFS * 3


@dataclass(frozen=True)
class Surfel:
    """One 2D oriented Gaussian disk.

    Attributes:
        center (np.ndarray): (3,) position in scene units
        rotation (np.ndarray): (4,) unit quaternion (w, x, y, z); its first two matrix columns are the tangents
        scales (np.ndarray): (2,) positive extents along the two tangents
        opacity (float): post-sigmoid opacity in [0, 1]
        sh (np.ndarray): (27,) degree-2 SH, coefficient-major (9 coefficients x 3 channels)
    """

    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64).reshape(2))
        object.__setattr__(self, "sh", np.asarray(self.sh, dtype=np.float64).reshape(-1))
        utils.require(bool(np.all(self.scales > 0)), f"surfel scales must be positive, got {self.scales}")
        utils.require(
            abs(np.linalg.norm(self.rotation) - 1.0) <= 1e-6,
            f"surfel rotation must be a unit quaternion, got norm {np.linalg.norm(self.rotation)}",
        )
        utils.require(0.0 <= self.opacity <= 1.0, f"surfel opacity must be in [0, 1], got {self.opacity}")
        utils.require(self.sh.size == SH_DIM, f"surfel sh must hold {SH_DIM} values, got {self.sh.size}")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(torch.from_numpy(self.rotation)[None])[0].numpy()

    @property
    def tangent_u(self) -> np.ndarray:
        return self.rotation_matrix[:, 0]

    @property
    def tangent_v(self) -> np.ndarray:
        return self.rotation_matrix[:, 1]

    def swapped(self) -> "Surfel":
        """Returns the same surfel with its two scales exchanged"""
        return dataclasses.replace(self, scales=self.scales[::-1].copy())


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with an OpenCV frame (x right, y down, z forward).

    Attributes:
        fx, fy, cx, cy (float): intrinsics in pixels; pixel (col, row) centers sit at integer coordinates
        rotation (np.ndarray): (3, 3) world-to-camera rotation
        translation (np.ndarray): (3,) world-to-camera translation
        width, height (int): image size in pixels
        view_id (int): unique view index
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    view_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        utils.require(self.fx > 0 and self.fy > 0, f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        ortho = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        utils.require(ortho <= 1e-6, f"camera rotation is not orthonormal (error {ortho:.3g})")
        utils.require(np.linalg.det(self.rotation) > 0, "camera rotation must be proper (det = +1)")

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        width: int,
        height: int,
        fov_x: float = 60.0,
        view_id: int = 0,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Camera":
        """Creates a camera at `eye` looking at `target` with a horizontal field of view in degrees"""
        eye = np.asarray(eye, dtype=np.float64)
        rotation = look_at_rotation(eye, np.asarray(target, dtype=np.float64), np.asarray(up, dtype=np.float64))
        fx = 0.5 * width / np.tan(np.radians(fov_x) / 2)
        return cls(
            fx=fx,
            fy=fx,
            cx=(width - 1) / 2,
            cy=(height - 1) / 2,
            rotation=rotation,
            translation=-rotation @ eye,
            width=width,
            height=height,
            view_id=view_id,
        )

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space"""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Projects world points; returns (N, 2) pixel coordinates and (N,) camera-space depths"""
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1)
        return uv, z

    def pixel_rays(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """(H*W, 3) camera-space ray directions with unit z, row-major"""
        rows, cols = torch.meshgrid(
            torch.arange(self.height, dtype=dtype), torch.arange(self.width, dtype=dtype), indexing="ij"
        )
        return torch.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, torch.ones_like(cols)], dim=-1
        ).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            view_id=int(d["view_id"]),
        )


@dataclass(frozen=True)
class SceneModel:
    """Ordered set of surfels stored as parameter tensors.

    Opacities are kept as logits and scales as logs; the activated values are exposed through properties.
    Operations never modify the tensors in place; they return new models.
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    iteration: int = 0

    PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __repr__(self):
        return f"<SceneModel [{len(self)} surfels, iteration {self.iteration}]>"

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def rotations(self) -> torch.Tensor:
        return quat_to_rotmat(self.quats)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAMS}

    def replace(self, **changes) -> "SceneModel":
        return dataclasses.replace(self, **changes)

    def with_iteration(self, iteration: int) -> "SceneModel":
        utils.require(iteration >= self.iteration, "the iteration counter never decreases")
        return self.replace(iteration=iteration)

    def map(self, fn) -> "SceneModel":
        return self.replace(**{name: fn(t) for name, t in self.params().items()})

    def detach(self) -> "SceneModel":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype: torch.dtype) -> "SceneModel":
        return self.map(lambda t: t.detach().to(dtype))

    def select(self, index: Union[torch.Tensor, np.ndarray, List[int]]) -> "SceneModel":
        """Returns the surfels at the given integer indices or boolean mask, in that order"""
        index = torch.as_tensor(np.asarray(index))
        return self.map(lambda t: t[index])

    @classmethod
    def concat(cls, models: Sequence["SceneModel"]) -> "SceneModel":
        utils.require(len(models) > 0, "cannot concatenate an empty list of models")
        first = models[0]
        return first.replace(
            **{name: torch.cat([getattr(m, name) for m in models], dim=0) for name in cls.PARAMS},
            iteration=max(m.iteration for m in models),
        )

    def surfel(self, i: int) -> Surfel:
        q = self.quats[i].detach().double()
        return Surfel(
            center=self.means[i].detach().double().numpy(),
            rotation=(q / torch.linalg.norm(q)).numpy(),
            scales=self.scales[i].detach().double().numpy(),
            opacity=float(self.opacities[i]),
            sh=self.sh[i].detach().double().reshape(-1).numpy(),
        )

    def __iter__(self) -> Iterator[Surfel]:
        for i in range(len(self)):
            yield self.surfel(i)

    @classmethod
    def from_surfels(
        cls,
        surfels: Sequence[Surfel],
        background: Tuple[float, float, float] = (0.0, 0.0, 0.0),
        dtype: torch.dtype = torch.float64,
    ) -> "SceneModel":
        eps = 1e-12
        opacity = np.clip([s.opacity for s in surfels], eps, 1 - eps)
        return cls(
            means=torch.tensor(np.array([s.center for s in surfels]).reshape(-1, 3), dtype=dtype),
            quats=torch.tensor(np.array([s.rotation for s in surfels]).reshape(-1, 4), dtype=dtype),
            log_scales=torch.tensor(np.log(np.array([s.scales for s in surfels]).reshape(-1, 2)), dtype=dtype),
            opacity_logits=torch.tensor(inverse_sigmoid(opacity), dtype=dtype).reshape(-1),
            sh=torch.tensor(np.array([s.sh for s in surfels]).reshape(-1, SH_COEFFS, 3), dtype=dtype),
            background=tuple(float(c) for c in background),
        )

    @classmethod
    def empty(cls, dtype: torch.dtype = torch.float64, background=(0.0, 0.0, 0.0)) -> "SceneModel":
        return cls(
            means=torch.zeros((0, 3), dtype=dtype),
            quats=torch.zeros((0, 4), dtype=dtype),
            log_scales=torch.zeros((0, 2), dtype=dtype),
            opacity_logits=torch.zeros((0,), dtype=dtype),
            sh=torch.zeros((0, SH_COEFFS, 3), dtype=dtype),
            background=tuple(background),
        )

    def validate(self) -> None:
        """Checks the stored invariants

        Raises:
            utils.ContractError: a quaternion is zero or a parameter is not finite
        """

        for name, t in self.params().items():
            utils.require(bool(torch.isfinite(t).all()), f"model parameter '{name}' holds non-finite values")
        utils.require(bool((torch.linalg.norm(self.quats, dim=-1) > 0).all()), "model holds a zero quaternion")


def eval_sh(sh: Sequence[float], view_dir: Sequence[float]) -> np.ndarray:
    """Evaluates degree-2 SH color for one direction.

    Args:
        sh (Sequence[float]): 27 coefficients, coefficient-major
        view_dir (Sequence[float]): unit direction from the camera towards the surfel

    Raises:
        utils.ContractError: the direction isn't unit length or sh has the wrong size

    Returns:
        np.ndarray: rgb, offset by 0.5 and clamped at zero
    """

    sh = np.asarray(sh, dtype=np.float64).reshape(-1)
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    utils.require(sh.size == SH_DIM, f"sh must hold {SH_DIM} values, got {sh.size}")
    utils.require(abs(np.linalg.norm(view_dir) - 1.0) <= 1e-6, "view_dir must have unit norm")
    coeffs = torch.from_numpy(sh.reshape(1, SH_COEFFS, 3))
    return sh_to_rgb(coeffs, torch.from_numpy(view_dir)[None])[0].numpy()


def surfel_normal(s: Surfel, camera: Camera) -> np.ndarray:
    """Returns t_u x t_v, flipped so it faces the camera"""
    rot = s.rotation_matrix
    normal = np.cross(rot[:, 0], rot[:, 1])
    if np.dot(normal, s.center - camera.center) > 0:
        normal = -normal
    return normal


def elongation_rate(s: Union[Surfel, Sequence[float]]) -> float:
    """min(s_u, s_v) / max(s_u, s_v)

    Raises:
        utils.ContractError: a scale isn't positive
    """

    scales = np.asarray(s.scales if isinstance(s, Surfel) else s, dtype=np.float64)
    utils.require(bool(np.all(scales > 0)), f"scales must be positive, got {scales}")
    return float(scales.min() / scales.max())


def elongation_rates(model: SceneModel) -> torch.Tensor:
    scales = model.scales.detach()
    return scales.min(dim=1).values / scales.max(dim=1).values
