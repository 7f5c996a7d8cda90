"""Shared domain types and reversible preprocessing transforms.

Interarrival times are carried in milliseconds and packet sizes in bytes
throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

PAYLOAD_QUANTUM = 32


class DataError(ValueError):
    """Input data violates a contract (bad file, bad value, too few samples)."""


class NumericalError(ArithmeticError):
    """Training or estimation produced a non-finite value."""


class ProductionState(IntEnum):
    RUNNING = 1
    REENTRY = 2
    STOPPED = 3
    ABORTED = 4
    ENDED = 5

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, name: str | int) -> "ProductionState":
        """Accept an integer code, ``"3"``, ``"Stopped"`` or ``"STOPPED"``."""
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        text = str(name).strip()
        if text.isdigit():
            return cls(int(text))
        try:
            return cls[text.upper()]
        except KeyError:
            raise DataError(f"unknown production state {name!r}") from None

    def one_hot(self) -> np.ndarray:
        vec = np.zeros(len(ProductionState))
        vec[self.value - 1] = 1.0
        return vec


STATES = tuple(ProductionState)
N_STATES = len(STATES)


@dataclass(frozen=True)
class LogRecord:
    """One machine log row; ``processed_time`` is milliseconds since the Unix epoch."""

    processed_time: float
    data_id: str
    data_value: str
    data_payload: int

    def __post_init__(self):
        if self.data_payload < 0:
            raise DataError(f"negative payload {self.data_payload}")


@dataclass(frozen=True)
class TrafficSample:
    interarrival_ms: float
    size_bytes: int
    state: ProductionState

    def __post_init__(self):
        if not self.interarrival_ms > 0:
            raise DataError(f"interarrival must be positive, got {self.interarrival_ms}")
        if self.size_bytes < 0 or self.size_bytes % PAYLOAD_QUANTUM:
            raise DataError(f"size {self.size_bytes} is not a non-negative multiple of {PAYLOAD_QUANTUM}")


def quantize_payload(raw_bytes: int) -> int:
    """Round a payload up to the next multiple of 32 bytes (0 stays 0)."""
    if raw_bytes < 0:
        raise DataError(f"payload must be non-negative, got {raw_bytes}")
    return -(-int(raw_bytes) // PAYLOAD_QUANTUM) * PAYLOAD_QUANTUM


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-dimension bounds of natural-log values used for min-max scaling."""

    min_log: tuple[float, ...]
    max_log: tuple[float, ...]

    def __post_init__(self):
        if len(self.min_log) != len(self.max_log) or len(self.min_log) not in (1, 2):
            raise DataError("normalization needs 1 or 2 dimensions with matching bounds")
        for dim, (lo, hi) in enumerate(zip(self.min_log, self.max_log)):
            if not hi > lo:
                raise DataError(f"degenerate dimension {dim}: max_log {hi} <= min_log {lo}")

    @property
    def dim(self) -> int:
        return len(self.min_log)

    def to_dict(self) -> dict:
        return {"min_log": list(self.min_log), "max_log": list(self.max_log)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationSpec":
        return cls(tuple(float(v) for v in data["min_log"]), tuple(float(v) for v in data["max_log"]))


def _as_2d(x, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim in (None, 1) else arr.reshape(1, -1)
    return arr


def fit_normalization(samples: Sequence) -> NormalizationSpec:
    """Fit log-space min-max bounds on 1-dim or 2-dim positive samples.

    Parameters
    ----------
    samples : sequence of floats, or sequence of pairs
        Strictly positive values. Pairs are treated per dimension.
    """
    arr = _as_2d(samples)
    if arr.shape[0] < 2:
        raise DataError(f"need at least 2 samples to fit normalization, got {arr.shape[0]}")
    if arr.shape[1] not in (1, 2):
        raise DataError(f"samples must be 1- or 2-dimensional, got {arr.shape[1]} dims")
    if not np.all(arr > 0):
        raise DataError("normalization requires strictly positive values")
    logs = np.log(arr)
    lo, hi = logs.min(axis=0), logs.max(axis=0)
    for dim in range(arr.shape[1]):
        if lo[dim] == hi[dim]:
            raise DataError(f"degenerate dimension {dim}: all values equal {arr[0, dim]!r}")
    return NormalizationSpec(tuple(map(float, lo)), tuple(map(float, hi)))


def normalize(spec: NormalizationSpec, x) -> np.ndarray:
    """Map positive values to [0, 1]; values outside the fitted range clamp."""
    arr = _as_2d(x, spec.dim)
    if arr.shape[-1] != spec.dim:
        raise DataError(f"expected {spec.dim}-dim values, got {arr.shape[-1]}")
    if not np.all(arr > 0):
        raise DataError("normalize requires strictly positive values")
    lo, hi = np.asarray(spec.min_log), np.asarray(spec.max_log)
    return np.clip((np.log(arr) - lo) / (hi - lo), 0.0, 1.0)


def denormalize(spec: NormalizationSpec, u) -> np.ndarray:
    arr = _as_2d(u, spec.dim)
    if arr.shape[-1] != spec.dim:
        raise DataError(f"expected {spec.dim}-dim values, got {arr.shape[-1]}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise DataError("denormalize requires values in [0, 1]")
    lo, hi = np.asarray(spec.min_log), np.asarray(spec.max_log)
    return np.exp(lo + arr * (hi - lo))

