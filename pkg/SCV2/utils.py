import hashlib
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np


class SCV2Error(Exception):
    """Base exception for SCV2."""

    exit_code = 1

    def __init__(self, message: Optional[str] = None, errors: Optional[List[str]] = None):
        super().__init__(message)
        self.errors = errors or []


class ContractError(SCV2Error):
    """Exception that's raised when an operation is called outside of its documented pre-conditions."""

    exit_code = 3


class ConfigError(SCV2Error):
    """Exception that's raised when a run configuration value is missing or out of range."""

    exit_code = 2

    def __init__(self, field: str, message: str, errors: Optional[List[str]] = None):
        super().__init__(f"{field}: {message}", errors)
        self.field = field


class DataError(SCV2Error):
    """Exception that's raised when a dataset or an input file can't be used."""

    exit_code = 3


class MissingArtifactError(DataError):
    """Exception that's raised when a stage runs before the stage producing its inputs."""

    def __init__(self, path: Union[str, Path], stage: Optional[str] = None):
        hint = f" Run the '{stage}' stage first." if stage else ""
        super().__init__(f"Missing artifact {path}.{hint}")
        self.path = Path(path)
        self.stage = stage


class CheckpointError(SCV2Error):
    """Exception that's raised when a checkpoint has a bad magic, version or checksum."""

    exit_code = 3


class DecodeError(CheckpointError):
    """Exception that's raised when a quantized model holds an invalid codebook index."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class DivergenceError(SCV2Error):
    """Exception that's raised when the optimization produces non-finite values."""

    exit_code = 4


class SurfelBudgetError(DivergenceError):
    """Exception that's raised when the surfel count exceeds the configured hard cap."""

    def __init__(self, count: int, cap: int, where: str = ""):
        where = f" in {where}" if where else ""
        super().__init__(
            f"Surfel count {count} exceeded the hard cap of {cap}{where}. "
            "Densification is running away; check the elongation filter settings.",
        )
        self.count = count
        self.cap = cap


def require(condition: bool, message: str) -> None:
    """Raises a ContractError with the given message when the condition is false"""
    if not condition:
        raise ContractError(message)


def nearest_rank_threshold(values: np.ndarray, ratio: float) -> float:
    """Returns the nearest-rank quantile of `values` at `ratio`.

    A ratio of 0 maps to 0.0, so only non-positive entries fall at or below it.

    Args:
        values (np.ndarray): 1-D array of non-negative scores
        ratio (float): quantile in [0, 1)

    Returns:
        float: threshold value
    """

    require(0.0 <= ratio < 1.0, f"ratio must be in [0, 1), got {ratio}")
    if len(values) == 0:
        return 0.0
    rank = math.ceil(ratio * len(values))
    if rank == 0:
        return 0.0
    return float(np.sort(values, kind="stable")[rank - 1])


def lowest_fraction(values: np.ndarray, ratio: float) -> np.ndarray:
    """Returns the indices of the ceil(ratio*N) lowest values, ties broken by index"""
    count = math.ceil(ratio * len(values))
    order = np.argsort(values, kind="stable")
    return np.sort(order[:count])


def file_digest(path: Union[str, Path]) -> str:
    """Returns the sha256 hex digest of a file"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def digest_of(paths: Sequence[Union[str, Path]]) -> str:
    """Returns a single digest over the contents of several files (directories are walked in sorted order)"""
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for file in files:
            digest.update(str(file.relative_to(path.parent)).encode())
            digest.update(file_digest(file).encode())
    return digest.hexdigest()
