#!/usr/bin/env python3
"""Read and write station-day scenes as lossless multi-band GeoTIFFs.

Band order and scene identity travel in the file's own tag header, so a
raster can be checked without consulting the manifest.
"""

from __future__ import annotations

import datetime as dt
import sys
from pathlib import Path

import numpy as np

try:
    import rasterio
    from rasterio.errors import RasterioIOError
    from rasterio.transform import from_origin
except ImportError:
    print("ERROR: rasterio is required. Install with: pip install -r requirements.txt", file=sys.stderr)
    raise

from records import BAND_ORDER, CHANNELS, RecordError, ScenePatch, parse_date


class RasterError(ValueError):
    """Raised when a scene raster cannot be read or does not match its header."""


def write_scene(path: Path, scene: ScenePatch) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width, channels = scene.bands.shape
    profile = {
        "driver": "GTiff",
        "height": height,
        "width": width,
        "count": channels,
        "dtype": "float32",
        "compress": "deflate",
        "predictor": 3,
        "transform": from_origin(0.0, float(height), 1.0, 1.0),
    }
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with rasterio.open(temp_path, "w", **profile) as dst:
        dst.write(np.moveaxis(scene.bands.astype(np.float32), 2, 0))
        for index, band in enumerate(BAND_ORDER[scene.image_type], start=1):
            dst.set_band_description(index, band)
        dst.update_tags(
            station_id=scene.station_id,
            date=scene.date.isoformat(),
            image_type=scene.image_type,
            instrument=scene.instrument,
            band_order=",".join(BAND_ORDER[scene.image_type]),
        )
    temp_path.replace(path)
    return path


def read_scene(path: Path) -> ScenePatch:
    path = Path(path)
    try:
        with rasterio.open(path) as src:
            tags = src.tags()
            bands = src.read().astype(np.float32)
    except RasterioIOError as exc:
        raise RasterError(f"Cannot read scene raster {path}: {exc}") from exc

    image_type = tags.get("image_type")
    if image_type not in CHANNELS:
        raise RasterError(f"{path} has no valid image_type tag")
    declared = tuple(tags.get("band_order", "").split(","))
    if declared != BAND_ORDER[image_type]:
        raise RasterError(f"{path} declares band order {declared}, expected {BAND_ORDER[image_type]}")

    try:
        return ScenePatch(
            station_id=tags.get("station_id", ""),
            date=parse_date(tags.get("date", "")),
            bands=np.moveaxis(bands, 0, 2),
            image_type=image_type,
            instrument=tags.get("instrument", ""),
        )
    except RecordError as exc:
        raise RasterError(f"{path}: {exc}") from exc


def scene_filename(station_id: str, date: dt.date, image_type: str) -> str:
    return f"{station_id}_{date.isoformat()}_{image_type}.tif"
