"""Shared geometry and activation helpers used across the package."""

from typing import Union

import numpy as np
import torch


Array = Union[np.ndarray, torch.Tensor]

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_COEFFS = 9


def sh_basis(dirs: torch.Tensor) -> torch.Tensor:
    """Real degree-2 spherical-harmonics basis evaluated at unit directions.

    Args:
        dirs (torch.Tensor): (..., 3) unit vectors

    Returns:
        torch.Tensor: (..., 9) basis values in the splatting coefficient order
    """

    x, y, z = dirs.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    return torch.stack(
        [
            torch.full_like(x, SH_C0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ],
        dim=-1,
    )


def sh_to_rgb(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """(N, 9, 3) coefficients and (N, 3) unit directions to (N, 3) colors, offset by 0.5 and clamped at zero"""
    raw = torch.einsum("nk,nkc->nc", sh_basis(dirs), sh)
    return torch.clamp_min(raw + 0.5, 0.0)


def rgb_to_sh_dc(rgb: Array) -> Array:
    return (rgb - 0.5) / SH_C0


def quat_to_rotmat(quats: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z), normalized on the fly, to (N, 3, 3) rotation matrices"""
    q = quats / torch.linalg.norm(quats, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
        ],
        dim=-2,
    )


def quat_from_z_to(dirs: np.ndarray) -> np.ndarray:
    """Quaternions rotating +z onto each of the (N, 3) unit directions"""
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    z = np.array([0.0, 0.0, 1.0])
    quats = np.concatenate([(1.0 + dirs @ z)[:, None], np.cross(z, dirs)], axis=1)
    flipped = quats[:, 0] < 1e-9
    quats[flipped] = (0.0, 1.0, 0.0, 0.0)
    return quats / np.linalg.norm(quats, axis=1, keepdims=True)


def inverse_sigmoid(x: Array) -> Array:
    if isinstance(x, torch.Tensor):
        return torch.log(x / (1 - x))
    return np.log(x / (1 - x))


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """World-to-camera rotation for an OpenCV camera (x right, y down, z forward) at eye looking at target"""
    forward = normalize(np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64))
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = normalize(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])
