"""Contribution-ranked SH quantization and the binary checkpoint format.

Checkpoint layout (little-endian):

    magic     b"SCV2"
    version   u32
    kind      u32     0 = float32 model, 1 = quantized model
    count     u64
    iteration u64
    background 3 x f32
    ...       kind-specific sections
    crc32     u32     over every preceding byte
"""

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus

from . import utils
from .common import SH_COEFFS, sh_to_rgb
from .dataset import write_points_ply
from .surfels import SH_DIM, SceneModel
from .threadable import parallel_map, threadable


logger = logging.getLogger(__name__)

MAGIC = b"SCV2"
VERSION = 1
KIND_FLOAT = 0
KIND_QUANTIZED = 1
_HEADER = struct.Struct("<4sIIQQ3f")
_QUANT_HEADER = struct.Struct("<QIfQ")
_ASSIGN_CHUNK = 2048

PathLike = Union[str, Path]


@dataclass(frozen=True)
class CompressConfig:
    """Quantization settings.

    Attributes:
        ratio (float): fraction of lowest-contribution surfels whose SH is quantized
        codebook_size (int): number of codebook entries before clamping to the tail size
        kmeans_iters (int): Lloyd iterations after k-means++ seeding
    """

    ratio: float = 0.4
    codebook_size: int = 8192
    kmeans_iters: int = 25

    def validate(self, section: str = "compress") -> None:
        """Checks value ranges

        Raises:
            utils.ConfigError: a value is out of range
        """

        if not 0 <= self.ratio < 1:
            raise utils.ConfigError(f"{section}.ratio", f"must be in [0, 1), got {self.ratio}")
        if self.codebook_size < 1:
            raise utils.ConfigError(f"{section}.codebook_size", f"must be >= 1, got {self.codebook_size}")
        if self.kmeans_iters < 0:
            raise utils.ConfigError(f"{section}.kmeans_iters", f"must be >= 0, got {self.kmeans_iters}")


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    """Half-precision surfels whose tail SH vectors are replaced by codebook indices.

    Geometry and opacity of every surfel are stored as float16; head surfels keep their SH in float16 and tail
    surfels store an index into `codebook`. `tail` marks the tail surfels in model order.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    tail: np.ndarray
    head_sh: np.ndarray
    indices: np.ndarray
    codebook: np.ndarray
    ratio: float = 0.0
    seed: int = 0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    iteration: int = 0
    clamped: bool = False
    # byte offset of `indices` in the file it was loaded from
    index_offset: int = 0

    def __len__(self) -> int:
        return len(self.tail)

    def __repr__(self):
        return f"<QuantizedModel [{len(self)} surfels, {self.n_tail} quantized, K={self.codebook_size}]>"

    @property
    def n_tail(self) -> int:
        return int(self.tail.sum())

    @property
    def codebook_size(self) -> int:
        return len(self.codebook)

    def validate(self) -> None:
        """Checks the stored invariants

        Raises:
            utils.ContractError: array sizes disagree
        """

        n = len(self)
        for name, width in (("means", 3), ("quats", 4), ("log_scales", 2)):
            utils.require(getattr(self, name).shape == (n, width), f"{name} must be ({n}, {width})")
        utils.require(self.opacity_logits.shape == (n,), f"opacity_logits must be ({n},)")
        utils.require(self.head_sh.shape == (n - self.n_tail, SH_DIM), "head SH count doesn't match the tail mask")
        utils.require(self.indices.shape == (self.n_tail,), "index count doesn't match the tail mask")
        utils.require(self.codebook.ndim == 2 and self.codebook.shape[1] == SH_DIM, "codebook must be (K, 27)")


class Codebook(NamedTuple):
    centroids: np.ndarray
    indices: np.ndarray
    inertia: list


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid and squared distance for every point, chunked over the worker pool"""
    sq_centroids = (centroids * centroids).sum(axis=1)

    def chunk(start):
        block = points[start : start + _ASSIGN_CHUNK]
        d2 = (block * block).sum(axis=1)[:, None] - 2.0 * block @ centroids.T + sq_centroids[None, :]
        index = np.argmin(d2, axis=1)
        exact = ((block - centroids[index]) ** 2).sum(axis=1)
        return index, exact

    parts = parallel_map(chunk, range(0, len(points), _ASSIGN_CHUNK))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def learn_codebook(points: np.ndarray, k: int, seed: int = 0, iterations: int = 25) -> Codebook:
    """Seeded k-means++ followed by a fixed number of Lloyd iterations.

    Empty clusters keep their previous centroid. Centroids no point uses are dropped and the rest are sorted
    lexicographically after rounding to float16, with indices remapped accordingly.

    Raises:
        utils.ContractError: k is out of range or the objective increased
    """

    points = np.asarray(points, dtype=np.float64)
    utils.require(1 <= k <= len(points), f"codebook size {k} outside [1, {len(points)}]")
    centroids, _ = kmeans_plusplus(points, k, random_state=seed)
    centroids = centroids.astype(np.float64)
    index, d2 = _assign(points, centroids)
    inertia = [float(d2.sum())]
    for _ in range(iterations):
        counts = np.bincount(index, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, index, points)
        used = counts > 0
        centroids[used] = sums[used] / counts[used, None]
        index, d2 = _assign(points, centroids)
        inertia.append(float(d2.sum()))
        utils.require(
            inertia[-1] <= inertia[-2] * (1.0 + 1e-12) + 1e-12,
            f"k-means objective increased from {inertia[-2]} to {inertia[-1]}",
        )

    used = np.unique(index)
    rounded = centroids[used].astype(np.float16)
    order = np.lexsort(rounded.T[::-1])
    remap = np.empty(k, dtype=np.int64)
    remap[used[order]] = np.arange(len(used))
    return Codebook(rounded[order], remap[index].astype(np.uint32), inertia)


def quantize(
    model: SceneModel, contributions: np.ndarray, ratio: float = 0.4, k: int = 8192, seed: int = 0, iterations: int = 25
) -> QuantizedModel:
    """Quantizes the SH of the lowest-contribution `ratio` of surfels and casts everything else to float16.

    Args:
        model (SceneModel): model to compress
        contributions (np.ndarray): (N,) contributions over all training views
        ratio (float): tail fraction in [0, 1)
        k (int): codebook size, clamped to the tail size
        seed (int): k-means++ seed
        iterations (int): Lloyd iterations

    Raises:
        utils.ContractError: the sizes differ or ratio or k is out of range

    Returns:
        QuantizedModel: compressed model
    """

    contributions = np.asarray(contributions, dtype=np.float64)
    utils.require(len(contributions) == len(model), f"got {len(contributions)} contributions for {len(model)} surfels")
    utils.require(0.0 <= ratio < 1.0, f"ratio must be in [0, 1), got {ratio}")
    utils.require(k >= 1, f"codebook size must be >= 1, got {k}")

    n = len(model)
    tail = np.zeros(n, dtype=bool)
    tail[utils.lowest_fraction(contributions, ratio)] = True
    sh = model.sh.detach().double().reshape(n, SH_DIM).numpy()

    clamped = False
    codebook = np.zeros((0, SH_DIM), dtype=np.float16)
    indices = np.zeros(0, dtype=np.uint32)
    n_tail = int(tail.sum())
    if n_tail:
        if k > n_tail:
            logger.warning("Codebook size %d exceeds the %d quantized surfels; clamping", k, n_tail)
            k, clamped = n_tail, True
        learned = learn_codebook(sh[tail], k, seed, iterations)
        codebook, indices = learned.centroids, learned.indices
        logger.info(
            "Quantized %d of %d surfels with %d codewords (inertia %.4g -> %.4g)",
            n_tail,
            n,
            len(codebook),
            learned.inertia[0],
            learned.inertia[-1],
        )

    def half(t):
        return t.detach().double().numpy().astype(np.float16)

    return QuantizedModel(
        means=half(model.means),
        quats=half(model.quats),
        log_scales=half(model.log_scales),
        opacity_logits=half(model.opacity_logits),
        tail=tail,
        head_sh=sh[~tail].astype(np.float16),
        indices=indices,
        codebook=codebook,
        ratio=float(ratio),
        seed=int(seed),
        background=tuple(float(c) for c in model.background),
        iteration=model.iteration,
        clamped=clamped,
    )


def dequantize(q: QuantizedModel, dtype: torch.dtype = torch.float32) -> SceneModel:
    """Rebuilds a model in the original surfel order, looking tail SH up in the codebook

    Raises:
        utils.DecodeError: an index points past the codebook
    """

    q.validate()
    bad = np.nonzero(q.indices >= q.codebook_size)[0]
    if len(bad):
        i = int(bad[0])
        raise utils.DecodeError(
            f"codebook index {int(q.indices[i])} of quantized surfel {i} exceeds K={q.codebook_size}",
            q.index_offset + 4 * i,
        )
    n = len(q)
    sh = np.empty((n, SH_DIM), dtype=np.float32)
    sh[~q.tail] = q.head_sh.astype(np.float32)
    sh[q.tail] = q.codebook[q.indices.astype(np.int64)].astype(np.float32)

    def full(a):
        return torch.from_numpy(a.astype(np.float32)).to(dtype)

    return SceneModel(
        means=full(q.means),
        quats=full(q.quats),
        log_scales=full(q.log_scales),
        opacity_logits=full(q.opacity_logits),
        sh=full(sh).reshape(n, SH_COEFFS, 3),
        background=q.background,
        iteration=q.iteration,
    )


def _float_sections(model: SceneModel) -> bytes:
    return b"".join(
        getattr(model, name).detach().to(torch.float32).numpy().astype("<f4").tobytes() for name in SceneModel.PARAMS
    )


def _quantized_sections(q: QuantizedModel) -> bytes:
    parts = [
        _QUANT_HEADER.pack(q.n_tail, q.codebook_size, q.ratio, q.seed),
        struct.pack("<B", int(q.clamped)),
        np.packbits(q.tail, bitorder="little").tobytes(),
    ]
    for name in ("means", "quats", "log_scales", "opacity_logits"):
        parts.append(getattr(q, name).astype("<f2").tobytes())
    parts.append(q.head_sh.astype("<f2").tobytes())
    parts.append(q.indices.astype("<u4").tobytes())
    parts.append(q.codebook.astype("<f2").tobytes())
    return b"".join(parts)


def encode(model: Union[SceneModel, QuantizedModel]) -> bytes:
    """Serializes a float32 model or a quantized model into checkpoint bytes"""
    kind = KIND_QUANTIZED if isinstance(model, QuantizedModel) else KIND_FLOAT
    header = _HEADER.pack(MAGIC, VERSION, kind, len(model), model.iteration, *model.background)
    body = _quantized_sections(model) if kind == KIND_QUANTIZED else _float_sections(model)
    payload = header + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise utils.CheckpointError(f"checkpoint truncated at byte {self.offset} (needed {size} more bytes)")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def array(self, dtype: str, count: int, shape: tuple) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).reshape(shape).copy()


def decode(data: bytes) -> Union[SceneModel, QuantizedModel]:
    """Parses checkpoint bytes.

    Raises:
        utils.CheckpointError: bad magic, CRC or version, or the data is truncated
    """

    if len(data) < _HEADER.size + 4:
        raise utils.CheckpointError(f"checkpoint of {len(data)} bytes is too short")
    if data[:4] != MAGIC:
        raise utils.CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise utils.CheckpointError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    _, version, kind, count, iteration, *background = _HEADER.unpack_from(data)
    if version != VERSION:
        raise utils.CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    body = data[:-4]
    reader = _Reader(body, _HEADER.size)
    background = tuple(float(c) for c in background)
    if kind == KIND_FLOAT:
        arrays = {
            name: torch.from_numpy(reader.array("<f4", count * width, shape).astype(np.float32))
            for name, width, shape in (
                ("means", 3, (count, 3)),
                ("quats", 4, (count, 4)),
                ("log_scales", 2, (count, 2)),
                ("opacity_logits", 1, (count,)),
                ("sh", SH_DIM, (count, SH_COEFFS, 3)),
            )
        }
        result = SceneModel(**arrays, background=background, iteration=iteration)
    elif kind == KIND_QUANTIZED:
        n_tail, k, ratio, seed = _QUANT_HEADER.unpack(reader.take(_QUANT_HEADER.size))
        (clamped,) = struct.unpack("<B", reader.take(1))
        packed = reader.array("u1", math.ceil(count / 8), (-1,))
        tail = np.unpackbits(packed, count=count, bitorder="little").astype(bool)
        if int(tail.sum()) != n_tail:
            raise utils.CheckpointError(f"tail mask marks {int(tail.sum())} surfels, header says {n_tail}")
        geometry = {
            name: reader.array("<f2", count * width, shape)
            for name, width, shape in (
                ("means", 3, (count, 3)),
                ("quats", 4, (count, 4)),
                ("log_scales", 2, (count, 2)),
                ("opacity_logits", 1, (count,)),
            )
        }
        head_sh = reader.array("<f2", (count - n_tail) * SH_DIM, (count - n_tail, SH_DIM))
        index_offset = reader.offset
        indices = reader.array("<u4", n_tail, (n_tail,))
        codebook = reader.array("<f2", k * SH_DIM, (k, SH_DIM))
        result = QuantizedModel(
            **{name: a.astype(np.float16) for name, a in geometry.items()},
            tail=tail,
            head_sh=head_sh.astype(np.float16),
            indices=indices.astype(np.uint32),
            codebook=codebook.astype(np.float16),
            ratio=float(ratio),
            seed=int(seed),
            background=background,
            iteration=iteration,
            clamped=bool(clamped),
            index_offset=index_offset,
        )
    else:
        raise utils.CheckpointError(f"unknown checkpoint kind {kind}")
    if reader.offset != len(body):
        raise utils.CheckpointError(f"{len(body) - reader.offset} trailing bytes after the last section")
    return result


def save_checkpoint(model: Union[SceneModel, QuantizedModel], path: PathLike) -> int:
    """Writes a checkpoint and returns its size in bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(model)
    path.write_bytes(data)
    logger.debug("Wrote %s (%d bytes)", path, len(data))
    return len(data)


def load_checkpoint(path: PathLike) -> Union[SceneModel, QuantizedModel]:
    """Reads a checkpoint of either kind

    Raises:
        utils.MissingArtifactError: the file doesn't exist
        utils.CheckpointError: the file is corrupt
    """

    path = Path(path)
    if not path.exists():
        raise utils.MissingArtifactError(path)
    return decode(path.read_bytes())


def load_model(path: PathLike, dtype: torch.dtype = torch.float32) -> SceneModel:
    """Reads a checkpoint as a renderable model, dequantizing when needed"""
    loaded = load_checkpoint(path)
    if isinstance(loaded, QuantizedModel):
        return dequantize(loaded, dtype)
    return loaded.to(dtype)


@threadable
def export_surfels_ply(path: PathLike, model: SceneModel) -> None:
    """Writes surfel centers, normals and view-independent colors as a PLY point cloud"""
    normals = model.rotations.detach()[:, :, 2]
    colors = sh_to_rgb(model.sh.detach(), torch.zeros_like(model.means.detach())).clamp(0.0, 1.0)
    write_points_ply(
        path,
        model.means.detach().double().numpy(),
        colors.double().numpy(),
        normals.double().numpy(),
    )
