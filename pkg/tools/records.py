#!/usr/bin/env python3
"""Domain records shared by ingestion, synthesis, and training.

Scenes are kept as H x W x C float32 arrays. Everything else is a small frozen
dataclass keyed by (station_id, date).
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np


PATCH_SIZE = 334
IMAGE_TYPES = ("RGB", "TOAR")
CHANNELS = {"RGB": 3, "TOAR": 4}
BAND_ORDER = {"RGB": ("R", "G", "B"), "TOAR": ("B", "G", "R", "NIR")}

MET_VARIABLES = ("t2m", "rh", "sp", "wind_u", "wind_v", "blh")
TARGETS = ("pm10", "op_aa", "op_dtt")
OUTLIER_THRESHOLDS = {"pm10": 50.0, "op_aa": 6.0, "op_dtt": 5.0}
TARGET_UNITS = {
    "pm10": "µg/m³",
    "op_aa": "nmol/min/m³",
    "op_dtt": "nmol/min/m³",
}

SPLITS = ("train", "val", "test")


class RecordError(ValueError):
    """Raised when a record violates its field invariants."""


def parse_date(value: Any) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value).strip()[:10])
    except ValueError as exc:
        raise RecordError(f"date must use YYYY-MM-DD, got {value!r}") from exc


@dataclass(frozen=True, eq=False)
class ScenePatch:
    station_id: str
    date: dt.date
    bands: np.ndarray
    image_type: str
    instrument: str = "PS2"
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.image_type not in CHANNELS:
            raise RecordError(f"unknown image_type {self.image_type!r}")
        if self.bands.ndim != 3:
            raise RecordError(f"scene bands must be H x W x C, got shape {self.bands.shape}")
        height, width, channels = self.bands.shape
        if height != PATCH_SIZE or width != PATCH_SIZE:
            raise RecordError(f"scene must be {PATCH_SIZE}x{PATCH_SIZE}, got {height}x{width}")
        if channels != CHANNELS[self.image_type]:
            raise RecordError(
                f"{self.image_type} scene needs {CHANNELS[self.image_type]} channels, got {channels}"
            )
        if not np.isfinite(self.bands).all():
            raise RecordError(f"scene {self.station_id} {self.date} has non-finite band values")
        if self.image_type == "TOAR" and not self.normalized and (self.bands < 0).any():
            raise RecordError(f"TOAR scene {self.station_id} {self.date} has negative reflectance")

    @property
    def channels(self) -> int:
        return self.bands.shape[2]

    def with_bands(self, bands: np.ndarray, normalized: bool) -> "ScenePatch":
        return replace(self, bands=bands, normalized=normalized)


@dataclass(frozen=True)
class SceneMeta:
    station_id: str
    date: dt.date
    instrument: str
    cover: float
    cloud_cover: float
    green_q05: Optional[float]
    green_q50: Optional[float]
    green_q95: Optional[float]

    def quantiles_present(self, *names: str) -> bool:
        """True when the named green quantiles (all three by default) are finite."""
        names = names or ("q05", "q50", "q95")
        values = [getattr(self, f"green_{name}") for name in names]
        return all(value is not None and math.isfinite(value) for value in values)


@dataclass(frozen=True)
class SceneRef:
    """Where one station-day scene lives on disk, plus its filter metadata."""

    path: Path
    image_type: str
    meta: SceneMeta
    acquired: Optional[dt.datetime] = None


@dataclass(frozen=True)
class MetVector:
    t2m: float
    rh: float
    sp: float
    wind_u: float
    wind_v: float
    blh: float

    def __post_init__(self) -> None:
        for name in MET_VARIABLES:
            value = getattr(self, name)
            if value is None or not math.isfinite(float(value)):
                raise RecordError(f"met variable {name} must be finite, got {value!r}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in MET_VARIABLES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "MetVector":
        values = [float(value) for value in values]
        if len(values) != len(MET_VARIABLES):
            raise RecordError(f"met vector needs {len(MET_VARIABLES)} components, got {len(values)}")
        return cls(**dict(zip(MET_VARIABLES, values)))


@dataclass(frozen=True)
class AQObservation:
    station_id: str
    date: dt.date
    pm10: Optional[float] = None
    op_aa: Optional[float] = None
    op_dtt: Optional[float] = None

    def __post_init__(self) -> None:
        for name in TARGETS:
            value = getattr(self, name)
            if value is None:
                continue
            if not math.isfinite(value) or value < 0:
                raise RecordError(f"{name} must be a finite value >= 0, got {value!r}")

    def value(self, target: str) -> Optional[float]:
        if target not in TARGETS:
            raise RecordError(f"unknown target {target!r}")
        return getattr(self, target)


@dataclass(frozen=True)
class StationDayRecord:
    station_id: str
    date: dt.date
    met: MetVector
    scene: Optional[SceneRef] = None
    aq: Optional[AQObservation] = None

    @property
    def key(self) -> tuple[str, dt.date]:
        return (self.station_id, self.date)

    def target(self, name: str) -> Optional[float]:
        return None if self.aq is None else self.aq.value(name)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[dt.date, str] = field(default_factory=dict)

    def split_of(self, date: dt.date) -> Optional[str]:
        return self.assignment.get(date)

    def dates(self, split: str) -> list[dt.date]:
        return sorted(date for date, name in self.assignment.items() if name == split)

    def counts(self) -> dict[str, int]:
        return {split: len(self.dates(split)) for split in SPLITS}


@dataclass(frozen=True)
class NormStats:
    image_type: str
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.std):
            raise RecordError("NormStats mean and std must have the same length")
        if any(not value > 0 for value in self.std):
            raise RecordError(f"NormStats std must be > 0, got {self.std}")

    @property
    def channels(self) -> int:
        return len(self.mean)

    def to_dict(self) -> dict[str, Any]:
        return {"image_type": self.image_type, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NormStats":
        return cls(
            image_type=data["image_type"],
            mean=tuple(float(v) for v in data["mean"]),
            std=tuple(float(v) for v in data["std"]),
        )
