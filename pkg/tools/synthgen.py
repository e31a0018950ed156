#!/usr/bin/env python3
"""Generate synthetic station-day corpora with known ground truth.

Each station-day gets a latent season s (1 in mid-January, 0 in mid-July)
and a latent haze h that mixes season, inverse boundary-layer height, and
an image-only factor. Haze compresses image contrast toward a bright level
in every band; season darkens only NIR. Targets are linear in h and
100/blh plus zero-mean noise, so both images and meteorology carry signal.

The writer emits the same manifest, CSV and raster formats that real data
uses, so the full pipeline runs unchanged on the output.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from rasters import scene_filename, write_scene
from records import (
    BAND_ORDER,
    MET_VARIABLES,
    PATCH_SIZE,
    TARGETS,
    AQObservation,
    MetVector,
    ScenePatch,
    StationDayRecord,
)


logger = logging.getLogger(__name__)

WHITE_LEVEL = 0.35
NIR_SEASON_DIMMING = 0.6
HAZE_MIX = 0.5

# Target = haze_strength * haze_coef * h + inv_blh_coef * (100 / blh) + noise
TARGET_COEFFICIENTS = {
    "pm10": {"haze": 30.0, "inv_blh": 60.0},
    "op_aa": {"haze": 3.0, "inv_blh": 6.0},
    "op_dtt": {"haze": 2.5, "inv_blh": 4.0},
}

# Reflectance range of each TOAR band in the base textures
BAND_RANGES = {"B": (0.04, 0.10), "G": (0.05, 0.13), "R": (0.04, 0.15), "NIR": (0.15, 0.40)}


class SynthError(ValueError):
    """Raised when a synthetic-corpus configuration is invalid."""


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic corpus settings.

    noise_sd scales zero-mean Gaussian target noise by the signal's standard
    deviation. Noisy targets are clipped at 0, so with noise_sd > 0 the
    low-signal days carry a small positive noise bias; `<target>_signal` in
    truth.csv is the unclipped, noiseless value. The default noise_sd of 0
    never clips.
    """

    n_stations: int = 3
    n_days: int = 365
    haze_strength: float = 1.0
    season_amplitude: float = 1.0
    noise_sd: float = 0.0
    seed: int = 0
    start_date: str = "2017-01-01"
    pixel_noise_sd: float = 0.005
    image_types: tuple[str, ...] = ("RGB", "TOAR")

    def __post_init__(self) -> None:
        if self.n_stations < 1:
            raise SynthError("n_stations must be >= 1")
        if self.n_days < 1:
            raise SynthError("n_days must be >= 1")
        if self.noise_sd < 0 or self.pixel_noise_sd < 0:
            raise SynthError("noise levels must be >= 0")
        for image_type in self.image_types:
            if image_type not in BAND_ORDER:
                raise SynthError(f"unknown image type {image_type!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise SynthError(f"unknown synthetic config keys: {', '.join(unknown)}")
        values = dict(data)
        if "image_types" in values:
            values["image_types"] = tuple(values["image_types"])
        return cls(**values)


@dataclass
class SynthTruth:
    """Latents and noiseless targets per station-day, plus the generating coefficients."""

    frame: pd.DataFrame
    coefficients: dict[str, dict[str, float]] = field(default_factory=dict)


def station_ids(n_stations: int) -> list[str]:
    return [f"S{index + 1}" for index in range(n_stations)]


def season_of(day_index: np.ndarray) -> np.ndarray:
    """1 in mid-January, 0 in mid-July, for day offsets from 1 January."""
    return (1.0 + np.cos(2.0 * np.pi * (np.asarray(day_index) - 14) / 365.25)) / 2.0


def make_base_texture(rng: np.random.Generator, size: int = PATCH_SIZE) -> np.ndarray:
    """Blobs plus stripes, scaled into a per-band reflectance range (B, G, R, NIR)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    bands = []
    for band in BAND_ORDER["TOAR"]:
        field_ = np.zeros((size, size))
        for _ in range(6):
            cy, cx = rng.uniform(0, 1, 2)
            sigma = rng.uniform(0.05, 0.2)
            field_ += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(0.05, 0.25)
        field_ += 0.3 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
        field_ = (field_ - field_.min()) / (field_.max() - field_.min())
        low, high = BAND_RANGES[band]
        bands.append(low + (high - low) * field_)
    return np.stack(bands, axis=2).astype(np.float32)


def generate_scene(base_texture: np.ndarray, h: float, s: float, rng: np.random.Generator,
                   image_type: str = "TOAR", station_id: str = "S1",
                   date: dt.date = dt.date(2017, 1, 1), pixel_noise_sd: float = 0.0) -> ScenePatch:
    """Haze mixes every band toward WHITE_LEVEL; season dims NIR (TOAR only)."""
    if not (0.0 <= h <= 1.0 and 0.0 <= s <= 1.0):
        raise SynthError(f"latents must lie in [0, 1], got h={h}, s={s}")
    texture = np.asarray(base_texture, dtype=np.float64)
    if image_type == "RGB" and texture.shape[2] == 4:
        texture = texture[:, :, [2, 1, 0]]
    elif texture.shape[2] != len(BAND_ORDER[image_type]):
        raise SynthError(f"texture has {texture.shape[2]} bands, {image_type} needs {len(BAND_ORDER[image_type])}")

    bands = (1.0 - HAZE_MIX * h) * texture + HAZE_MIX * h * WHITE_LEVEL
    if image_type == "TOAR":
        bands[:, :, 3] *= 1.0 - NIR_SEASON_DIMMING * s
    if pixel_noise_sd > 0:
        bands = np.clip(bands + rng.normal(0.0, pixel_noise_sd, size=bands.shape), 0.0, None)
    return ScenePatch(
        station_id=station_id,
        date=date,
        bands=bands.astype(np.float32),
        image_type=image_type,
        instrument="PS2",
    )


def generate_corpus(config: SynthConfig) -> tuple[list[StationDayRecord], SynthTruth]:
    rng = np.random.default_rng(config.seed)
    stations = station_ids(config.n_stations)
    start = dt.date.fromisoformat(config.start_date)
    n = config.n_stations * config.n_days
    amplitude = config.season_amplitude

    station_col = np.repeat(stations, config.n_days)
    day_index = np.tile(np.arange(config.n_days), config.n_stations)
    dates = [start + dt.timedelta(days=int(day)) for day in day_index]

    s = season_of(day_index)
    t2m = 12.0 + 10.0 * amplitude * (1.0 - 2.0 * s) + rng.normal(0.0, 1.5, n)
    rh = np.clip(70.0 + 10.0 * amplitude * (2.0 * s - 1.0) + rng.normal(0.0, 5.0, n), 5.0, 100.0)
    sp = 98000.0 + rng.normal(0.0, 400.0, n)
    wind_u = rng.normal(0.0, 2.0, n)
    wind_v = rng.normal(0.0, 2.0, n)
    blh = np.maximum(900.0 + 500.0 * amplitude * (1.0 - 2.0 * s) + rng.normal(0.0, 150.0, n), 100.0)
    inv_blh = 100.0 / blh
    image_only = rng.uniform(0.0, 1.0, n)
    h = np.clip(0.4 * image_only + 0.3 * amplitude * s + 1.2 * inv_blh, 0.0, 1.0)

    truth = pd.DataFrame({
        "station_id": station_col,
        "date": [date.isoformat() for date in dates],
        "h": h,
        "s": s,
        "image_only": image_only,
        "inv_blh": inv_blh,
    })
    coefficients = {}
    targets = {}
    for name in TARGETS:
        haze_coef = config.haze_strength * TARGET_COEFFICIENTS[name]["haze"]
        blh_coef = TARGET_COEFFICIENTS[name]["inv_blh"]
        signal = haze_coef * h + blh_coef * inv_blh
        noise_scale = config.noise_sd * float(signal.std()) if n > 1 else 0.0
        noisy = signal + rng.normal(0.0, 1.0, n) * noise_scale
        targets[name] = np.clip(noisy, 0.0, None)
        truth[f"{name}_signal"] = signal
        truth[name] = targets[name]
        coefficients[name] = {"haze": haze_coef, "inv_blh": blh_coef, "noise_scale": noise_scale}

    records = []
    for i in range(n):
        met = MetVector.from_array([t2m[i], rh[i], sp[i], wind_u[i], wind_v[i], blh[i]])
        aq = AQObservation(str(station_col[i]), dates[i], **{name: float(targets[name][i]) for name in TARGETS})
        records.append(StationDayRecord(station_id=str(station_col[i]), date=dates[i], met=met, aq=aq))
    return records, SynthTruth(frame=truth, coefficients=coefficients)


@dataclass(frozen=True)
class CorpusPaths:
    root: Path
    scene_manifest: Path
    met: Path
    aq: Path
    truth: Path


def _green_quantiles(scene: ScenePatch) -> tuple[float, float, float]:
    green = scene.bands[:, :, BAND_ORDER[scene.image_type].index("G")]
    q05, q50, q95 = np.quantile(green, [0.05, 0.5, 0.95])
    return float(q05), float(q50), float(q95)


def write_corpus(config: SynthConfig, out_dir: Path, workers: int = 1) -> CorpusPaths:
    """Render every scene and write manifest, met, AQ, and truth tables under out_dir."""
    out_dir = Path(out_dir)
    scene_dir = out_dir / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    records, truth = generate_corpus(config)

    stations = station_ids(config.n_stations)
    textures = {
        station: make_base_texture(np.random.default_rng([config.seed, index, 7919]))
        for index, station in enumerate(stations)
    }
    truth_rows = truth.frame.to_dict("records")

    def render(index: int) -> list[dict[str, Any]]:
        record = records[index]
        row = truth_rows[index]
        station_index = stations.index(record.station_id)
        day_index = (record.date - dt.date.fromisoformat(config.start_date)).days
        rng = np.random.default_rng([config.seed, station_index, day_index])
        toar = generate_scene(textures[record.station_id], row["h"], row["s"], rng, "TOAR",
                              record.station_id, record.date, config.pixel_noise_sd)
        # Filter quantiles always come from the TOAR green band
        q05, q50, q95 = _green_quantiles(toar)
        rows = []
        for image_type in config.image_types:
            if image_type == "TOAR":
                scene = toar
            else:
                scene = ScenePatch(record.station_id, record.date,
                                   np.ascontiguousarray(toar.bands[:, :, [2, 1, 0]]), "RGB", "PS2")
            name = scene_filename(record.station_id, record.date, image_type)
            write_scene(scene_dir / name, scene)
            rows.append({
                "station_id": record.station_id,
                "date": record.date.isoformat(),
                "image_type": image_type,
                "instrument": "PS2",
                "cover": 1.0,
                "cloud_cover": 0.0,
                "green_q05": q05,
                "green_q50": q50,
                "green_q95": q95,
                "path": f"scenes/{name}",
                "acquired": f"{record.date.isoformat()}T10:30:00Z",
            })
        return rows

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        manifest_rows = [row for rows in pool.map(render, range(len(records))) for row in rows]

    paths = CorpusPaths(
        root=out_dir,
        scene_manifest=out_dir / "scenes.csv",
        met=out_dir / "met.csv",
        aq=out_dir / "aq.csv",
        truth=out_dir / "truth.csv",
    )
    pd.DataFrame(manifest_rows).to_csv(paths.scene_manifest, index=False)
    pd.DataFrame([
        {"station_id": r.station_id, "date": r.date.isoformat(), **{k: getattr(r.met, k) for k in MET_VARIABLES}}
        for r in records
    ]).to_csv(paths.met, index=False)
    pd.DataFrame([
        {"station_id": r.station_id, "date": r.date.isoformat(), **{k: r.aq.value(k) for k in TARGETS}}
        for r in records
    ]).to_csv(paths.aq, index=False)
    truth.frame.to_csv(paths.truth, index=False)
    (out_dir / "synth.json").write_text(
        json.dumps({"config": asdict(config), "coefficients": truth.coefficients}, indent=2) + "\n",
        encoding="utf-8",
    )
    logger.info(f"Wrote synthetic corpus: {len(records)} station-days, {len(manifest_rows)} scenes to {out_dir}")
    return paths


def load_synth_config(path: Optional[Path]) -> SynthConfig:
    if path is None:
        return SynthConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SynthError(f"Synthetic config does not exist: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SynthError(f"Synthetic config is invalid JSON: {exc}") from exc
    return SynthConfig.from_dict(data)
