#!/usr/bin/env python3
"""Ingest scene, meteorology and air-quality tables into a split corpus.

The corpus joins the three sources on (station_id, date), drops cloudy
scenes and outlier measures, assigns every usable date to one split, and
serves normalised training samples. Records are always held in
(station_id, date) order so input file order never changes a result.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from cloud_filter import FilterConfig, apply_cloud_filter
from met_grid import IncompleteMetError, aggregate_met
from rasters import read_scene
from records import (
    CHANNELS,
    MET_VARIABLES,
    OUTLIER_THRESHOLDS,
    SPLITS,
    TARGETS,
    AQObservation,
    MetVector,
    NormStats,
    RecordError,
    SceneMeta,
    ScenePatch,
    SceneRef,
    SplitAssignment,
    StationDayRecord,
    parse_date,
)
from validators import (
    AQ_COLUMNS,
    SCENE_COLUMNS,
    as_number,
    validate_aq_row,
    validate_met_row,
    validate_rows,
    validate_scene_row,
    validate_table_columns,
)


logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.6, 0.2, 0.2)


class DatasetError(ValueError):
    """Raised when corpus inputs are missing, inconsistent, or degenerate."""


# ---------------------------------------------------------------------------
# Per-record filters


def apply_outlier_filter(aq: AQObservation,
                         thresholds: dict[str, float] = OUTLIER_THRESHOLDS) -> AQObservation:
    """Drop each measure that strictly exceeds its threshold; keep the rest."""
    dropped = {
        name: None
        for name in TARGETS
        if aq.value(name) is not None and aq.value(name) > thresholds[name]
    }
    return replace(aq, **dropped) if dropped else aq


def select_daily_scenes(refs: Iterable[SceneRef]) -> list[SceneRef]:
    """One scene per (station, date, image_type): lowest cloud cover, then latest acquisition."""
    best: dict[tuple[str, dt.date, str], tuple[tuple, SceneRef]] = {}
    for order, ref in enumerate(refs):
        acquired = ref.acquired.timestamp() if ref.acquired is not None else float("-inf")
        rank = (-ref.meta.cloud_cover, acquired, order)
        key = (ref.meta.station_id, ref.meta.date, ref.image_type)
        if key not in best or rank > best[key][0]:
            best[key] = (rank, ref)
    return [best[key][1] for key in sorted(best)]


# ---------------------------------------------------------------------------
# Splits and normalisation


def assign_splits(dates: Iterable[dt.date], ratios: tuple[float, float, float] = DEFAULT_RATIOS,
                  seed: int = 0) -> SplitAssignment:
    """Shuffle dates by seed; val and test get floor(ratio * N), train the remainder."""
    if len(ratios) != 3 or any(ratio < 0 for ratio in ratios):
        raise DatasetError(f"split ratios must be three non-negative numbers, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DatasetError(f"split ratios must sum to 1, got {sum(ratios)}")
    ordered = sorted(set(dates))
    if not ordered:
        raise DatasetError("cannot assign splits to an empty date set")

    n = len(ordered)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test

    permutation = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for position, index in enumerate(permutation):
        if position < n_train:
            split = "train"
        elif position < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[ordered[index]] = split
    return SplitAssignment(assignment)


def compute_norm_stats(train_scenes: Iterable[ScenePatch], image_type: str) -> NormStats:
    """Per-channel population mean/std pooled over every pixel of the train scenes."""
    channels = CHANNELS[image_type]
    total = np.zeros(channels, dtype=np.float64)
    total_sq = np.zeros(channels, dtype=np.float64)
    count = 0
    scenes = 0
    for scene in train_scenes:
        if scene.image_type != image_type or scene.channels != channels:
            raise DatasetError(
                f"scene {scene.station_id} {scene.date} is {scene.image_type}, expected {image_type}"
            )
        pixels = scene.bands.reshape(-1, channels).astype(np.float64)
        total += pixels.sum(axis=0)
        total_sq += np.square(pixels).sum(axis=0)
        count += pixels.shape[0]
        scenes += 1

    if scenes < 2:
        raise DatasetError(f"need at least 2 train scenes for {image_type} stats, got {scenes}")
    mean = total / count
    variance = np.maximum(total_sq / count - np.square(mean), 0.0)
    std = np.sqrt(variance)
    if (std <= 1e-7 * np.maximum(1.0, np.abs(mean))).any():
        raise DatasetError(f"{image_type} train scenes have a zero-variance channel: std={std.tolist()}")
    return NormStats(image_type=image_type, mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def _check_channels(scene: ScenePatch, stats: NormStats) -> None:
    if scene.channels != stats.channels:
        raise DatasetError(f"scene has {scene.channels} channels but stats have {stats.channels}")


def normalize(scene: ScenePatch, stats: NormStats) -> ScenePatch:
    _check_channels(scene, stats)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    bands = ((scene.bands.astype(np.float64) - mean) / std).astype(np.float32)
    return scene.with_bands(bands, normalized=True)


def denormalize(scene: ScenePatch, stats: NormStats) -> ScenePatch:
    _check_channels(scene, stats)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    bands = (scene.bands.astype(np.float64) * std + mean).astype(np.float32)
    return scene.with_bands(bands, normalized=False)


@dataclass(frozen=True)
class MetStandardizer:
    """Train-split mean/std of the six met variables."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "MetStandardizer":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != len(MET_VARIABLES) or matrix.shape[0] < 2:
            raise DatasetError(f"met standardisation needs an N x 6 matrix with N >= 2, got {matrix.shape}")
        std = matrix.std(axis=0)
        # constant columns pass through centred
        std = np.where(std > 0, std, 1.0)
        return cls(mean=tuple(matrix.mean(axis=0).tolist()), std=tuple(std.tolist()))

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def to_dict(self) -> dict[str, Any]:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetStandardizer":
        return cls(mean=tuple(data["mean"]), std=tuple(data["std"]))


# ---------------------------------------------------------------------------
# Table loaders


def _read_csv(path: Path, required: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"station_id": str})
    except FileNotFoundError as exc:
        raise DatasetError(f"Table does not exist: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DatasetError(f"Table {path} is not valid CSV: {exc}") from exc
    columns = validate_table_columns(path, frame, required)
    if not columns["valid"]:
        raise DatasetError(columns["errors"][0])
    return frame


def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    return frame.astype(object).where(frame.notna(), None).to_dict("records")


def load_scene_manifest(path: Path) -> list[SceneRef]:
    """Scene references from the manifest; raster paths resolve against the manifest's folder."""
    path = Path(path)
    frame = _read_csv(path, SCENE_COLUMNS)
    refs = []
    skipped = 0
    for row_num, row in enumerate(_records(frame), start=2):
        validation = validate_scene_row(row)
        if not validation["valid"]:
            skipped += 1
            logger.warning(f"{path.name} row {row_num} skipped: {'; '.join(validation['errors'])}")
            continue
        date = parse_date(row["date"])
        meta = SceneMeta(
            station_id=str(row["station_id"]),
            date=date,
            instrument=str(row.get("instrument") or ""),
            cover=float(row["cover"]),
            cloud_cover=float(row["cloud_cover"]),
            green_q05=as_number(row.get("green_q05")),
            green_q50=as_number(row.get("green_q50")),
            green_q95=as_number(row.get("green_q95")),
        )
        acquired = row.get("acquired")
        scene_path = Path(str(row["path"]))
        refs.append(SceneRef(
            path=scene_path if scene_path.is_absolute() else path.parent / scene_path,
            image_type=str(row["image_type"]),
            meta=meta,
            acquired=pd.Timestamp(acquired).to_pydatetime() if acquired else None,
        ))
    logger.info(f"Loaded {len(refs)} scene rows from {path} ({skipped} skipped)")
    return refs


def _met_frame(path: Path) -> pd.DataFrame:
    frame = _read_csv(path, ["station_id"] + list(MET_VARIABLES))
    if "time" in frame.columns:
        times = pd.to_datetime(frame["time"], utc=True)
        return frame.assign(date=times.dt.strftime("%Y-%m-%d"))
    if "date" not in frame.columns:
        raise DatasetError(f"{path} needs a date or time column")
    return frame


def load_met_table(path: Path, rh_scale: str = "percent") -> dict[tuple[str, dt.date], MetVector]:
    """Daily met by (station, date). Hourly tables (a `time` column) are averaged per UTC day."""
    path = Path(path)
    frame = _met_frame(path)

    rows = _records(frame)
    valid_rows = []
    for row_num, row in enumerate(rows, start=2):
        validation = validate_met_row(row, rh_scale=rh_scale)
        if validation["valid"]:
            valid_rows.append(row)
        else:
            logger.warning(f"{path.name} row {row_num} skipped: {'; '.join(validation['errors'])}")

    table: dict[tuple[str, dt.date], MetVector] = {}
    grouped: dict[tuple[str, dt.date], list[dict[str, Any]]] = {}
    for row in valid_rows:
        grouped.setdefault((str(row["station_id"]), parse_date(row["date"])), []).append(row)

    hourly = "time" in frame.columns
    for key in sorted(grouped):
        group = grouped[key]
        if hourly:
            try:
                table[key] = aggregate_met(group)
            except IncompleteMetError as exc:
                logger.warning(f"Met for {key[0]} {key[1]} flagged unusable: {exc}")
            continue
        if len(group) > 1:
            raise DatasetError(f"{path} has {len(group)} daily met rows for {key[0]} {key[1]}")
        table[key] = MetVector(**{name: float(group[0][name]) for name in MET_VARIABLES})
    return table


def load_aq_table(path: Path) -> dict[tuple[str, dt.date], AQObservation]:
    path = Path(path)
    frame = _read_csv(path, AQ_COLUMNS)
    table: dict[tuple[str, dt.date], AQObservation] = {}
    dropped = {name: 0 for name in TARGETS}
    for row_num, row in enumerate(_records(frame), start=2):
        validation = validate_aq_row(row)
        if not validation["valid"]:
            logger.warning(f"{path.name} row {row_num} skipped: {'; '.join(validation['errors'])}")
            continue
        key = (str(row["station_id"]), parse_date(row["date"]))
        if key in table:
            raise DatasetError(f"{path} has duplicate rows for {key[0]} {key[1]}")
        raw = AQObservation(
            station_id=key[0],
            date=key[1],
            **{name: as_number(row.get(name)) for name in TARGETS},
        )
        kept = apply_outlier_filter(raw)
        for name in TARGETS:
            if raw.value(name) is not None and kept.value(name) is None:
                dropped[name] += 1
        table[key] = kept
    logger.info(f"Loaded {len(table)} AQ rows from {path}; outliers dropped: {dropped}")
    return table


def validate_tables(scene_manifest: Path, met_path: Path, aq_path: Path,
                    rh_scale: str = "percent") -> dict[str, dict[str, Any]]:
    """Row-level validation summary of each input table, keyed by table name."""
    return {
        "Scene manifest": validate_rows(
            _records(_read_csv(Path(scene_manifest), SCENE_COLUMNS)), validate_scene_row
        ),
        "Meteorology": validate_rows(
            _records(_met_frame(Path(met_path))), validate_met_row, rh_scale=rh_scale
        ),
        "Air quality": validate_rows(_records(_read_csv(Path(aq_path), AQ_COLUMNS)), validate_aq_row),
    }


# ---------------------------------------------------------------------------
# Corpus


class LazyScenes(Sequence):
    """Scenes read from disk on access, optionally normalised."""

    def __init__(self, refs: Sequence[SceneRef], stats: Optional[NormStats] = None):
        self.refs = list(refs)
        self.stats = stats

    def __len__(self) -> int:
        return len(self.refs)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        scene = read_scene(self.refs[index].path)
        return normalize(scene, self.stats) if self.stats is not None else scene


@dataclass
class Corpus:
    image_type: str
    records: list[StationDayRecord]
    clear_refs: list[SceneRef]
    splits: SplitAssignment
    met_standardizer: MetStandardizer
    summary: dict[str, Any] = field(default_factory=dict)
    _norm_stats: Optional[NormStats] = None

    def split_records(self, split: str, target: Optional[str] = None) -> list[StationDayRecord]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [
            record for record in self.records
            if self.splits.split_of(record.date) == split
            and (target is None or record.target(target) is not None)
        ]

    def scene_refs(self, selection: str = "train") -> list[SceneRef]:
        """Clear scenes of this image type: the train split, or every split for `all`."""
        if selection not in ("train", "all"):
            raise DatasetError(f"scene selection must be train or all, got {selection!r}")
        refs = [ref for ref in self.clear_refs if ref.image_type == self.image_type]
        if selection == "train":
            refs = [ref for ref in refs if self.splits.split_of(ref.meta.date) == "train"]
        return refs

    def norm_stats(self) -> NormStats:
        if self._norm_stats is None:
            refs = self.scene_refs("train")
            logger.info(f"Computing {self.image_type} normalisation stats over {len(refs)} train scenes")
            self._norm_stats = compute_norm_stats(LazyScenes(refs), self.image_type)
        return self._norm_stats

    def set_norm_stats(self, stats: NormStats) -> None:
        if stats.image_type != self.image_type:
            raise DatasetError(f"stats are for {stats.image_type}, corpus is {self.image_type}")
        self._norm_stats = stats

    def met_matrix(self, records: Sequence[StationDayRecord]) -> np.ndarray:
        return np.vstack([record.met.as_array() for record in records]) if records else np.zeros((0, 6))

    def target_vector(self, records: Sequence[StationDayRecord], target: str) -> np.ndarray:
        return np.array([record.target(target) for record in records], dtype=np.float64)


def build_corpus(scene_manifest: Path, met_path: Path, aq_path: Path, image_type: str,
                 filter_config: FilterConfig, seed: int,
                 ratios: tuple[float, float, float] = DEFAULT_RATIOS,
                 rh_scale: str = "percent") -> Corpus:
    if image_type not in CHANNELS:
        raise DatasetError(f"unknown image_type {image_type!r}")

    refs = load_scene_manifest(scene_manifest)
    met = load_met_table(met_path, rh_scale=rh_scale)
    aq = load_aq_table(aq_path)

    clear = [ref for ref in refs if apply_cloud_filter(ref.meta, filter_config)]
    daily = select_daily_scenes(clear)
    usable = [ref for ref in daily if (ref.meta.station_id, ref.meta.date) in met]
    if not usable:
        raise DatasetError("no clear scene has matching meteorology")

    # Splits cover every usable date of any image type so RGB and TOAR runs share them
    splits = assign_splits({ref.meta.date for ref in usable}, ratios=ratios, seed=seed)

    records = []
    for ref in usable:
        if ref.image_type != image_type:
            continue
        key = (ref.meta.station_id, ref.meta.date)
        try:
            records.append(StationDayRecord(
                station_id=key[0], date=key[1], met=met[key], scene=ref, aq=aq.get(key),
            ))
        except RecordError as exc:
            logger.warning(f"Skipping {key[0]} {key[1]}: {exc}")
    records.sort(key=lambda record: record.key)
    if not records:
        raise DatasetError(f"no usable {image_type} station-days")

    train = [record for record in records if splits.split_of(record.date) == "train"]
    standardizer = MetStandardizer.fit(np.vstack([record.met.as_array() for record in train]))

    summary = {
        "scene_rows": len(refs),
        "clear_scenes": len(clear),
        "daily_scenes": len(daily),
        "usable_station_days": len(records),
        "split_dates": splits.counts(),
        "labelled": {name: sum(record.target(name) is not None for record in records) for name in TARGETS},
    }
    logger.info(f"Corpus {image_type}: {summary}")
    return Corpus(
        image_type=image_type,
        records=records,
        clear_refs=usable,
        splits=splits,
        met_standardizer=standardizer,
        summary=summary,
    )


class SampleDataset(Dataset):
    """Training samples as tensors: (image?, side-features?, target).

    image is C x H x W and normalised; side-features are the fused
    non-image inputs (standardised met or leaf encoding).
    """

    def __init__(self, targets: np.ndarray, scenes: Optional[LazyScenes] = None,
                 side: Optional[np.ndarray] = None):
        self.targets = torch.as_tensor(np.asarray(targets, dtype=np.float32))
        self.scenes = scenes
        self.side = None if side is None else torch.as_tensor(np.asarray(side, dtype=np.float32))
        if scenes is None and side is None:
            raise DatasetError("a sample dataset needs images, side features, or both")
        if scenes is not None and len(scenes) != len(self.targets):
            raise DatasetError("scene and target counts differ")
        if self.side is not None and self.side.shape[0] != len(self.targets):
            raise DatasetError("side-feature and target counts differ")

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, index: int):
        items = []
        if self.scenes is not None:
            scene = self.scenes[index]
            items.append(torch.from_numpy(np.ascontiguousarray(np.moveaxis(scene.bands, 2, 0))))
        if self.side is not None:
            items.append(self.side[index])
        items.append(self.targets[index])
        return tuple(items)
