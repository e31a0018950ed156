#!/usr/bin/env python3
"""Turn hourly gridded reanalysis into daily station meteorology.

Each hour is bilinearly interpolated from the enclosing grid cell to the
station location, then the 24 hourly values of a UTC day are averaged.
"""

from __future__ import annotations

import logging
from dataclasses import asdict
from typing import Any, Mapping, Sequence, Union

import numpy as np
import pandas as pd

from records import MET_VARIABLES, MetVector


logger = logging.getLogger(__name__)

HOURS_PER_DAY = 24


class MetGridError(ValueError):
    """Raised when gridded meteorology cannot be interpolated or aggregated."""


class IncompleteMetError(MetGridError):
    """Raised when a station-day does not hold exactly the required hourly values."""


HourlyRecord = Union[MetVector, Mapping[str, Any]]


def _hour_values(record: HourlyRecord) -> np.ndarray:
    if isinstance(record, MetVector):
        return record.as_array()
    try:
        return np.array([float(record[name]) for name in MET_VARIABLES], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MetGridError(f"hourly record is missing met variables: {exc}") from exc


def aggregate_met(hourly: Sequence[HourlyRecord], required_hours: int = HOURS_PER_DAY) -> MetVector:
    """Component-wise mean of one station-day's hourly records.

    The day must hold exactly `required_hours` finite hours. Records that
    carry a `time` must not repeat one.
    """
    times = [record.get("time") for record in hourly
             if isinstance(record, Mapping) and record.get("time") is not None]
    if times:
        stamps = pd.to_datetime(pd.Series(times), utc=True)
        if stamps.duplicated().any():
            repeated = sorted({str(stamp) for stamp in stamps[stamps.duplicated()]})
            raise IncompleteMetError(f"duplicate hourly timestamps: {repeated}")
    rows = [_hour_values(record) for record in hourly]
    rows = [row for row in rows if np.isfinite(row).all()]
    if len(rows) != required_hours:
        raise IncompleteMetError(f"{len(rows)} usable hourly values, expected exactly {required_hours}")
    return MetVector.from_array(np.mean(np.vstack(rows), axis=0))


def bilinear_interpolate(values: Any, lons: Sequence[float], lats: Sequence[float],
                         lon: float, lat: float) -> Any:
    """Interpolate a 2x2 neighbourhood to (lon, lat).

    values[..., i, j] holds the corner at (lons[j], lats[i]); leading axes
    (for example hours) are interpolated together.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-2:] != (2, 2):
        raise MetGridError(f"bilinear interpolation needs a 2x2 neighbourhood, got {values.shape}")
    x0, x1 = float(lons[0]), float(lons[1])
    y0, y1 = float(lats[0]), float(lats[1])
    if x0 == x1 or y0 == y1:
        raise MetGridError("grid cell has zero width or height")
    if not (min(x0, x1) <= lon <= max(x0, x1) and min(y0, y1) <= lat <= max(y0, y1)):
        raise MetGridError(f"point ({lon}, {lat}) is outside the cell {lons} x {lats}")

    tx = (lon - x0) / (x1 - x0)
    ty = (lat - y0) / (y1 - y0)
    result = (
        (1 - tx) * (1 - ty) * values[..., 0, 0]
        + tx * (1 - ty) * values[..., 0, 1]
        + (1 - tx) * ty * values[..., 1, 0]
        + tx * ty * values[..., 1, 1]
    )
    return float(result) if np.ndim(result) == 0 else result


def _enclosing(axis: np.ndarray, value: float, label: str) -> int:
    if value < axis[0] or value > axis[-1]:
        raise MetGridError(f"station {label} {value} is outside the grid [{axis[0]}, {axis[-1]}]")
    index = int(np.searchsorted(axis, value, side="right")) - 1
    return min(max(index, 0), len(axis) - 2)


def met_from_grid(grid: pd.DataFrame, stations: pd.DataFrame,
                  required_hours: int = HOURS_PER_DAY) -> pd.DataFrame:
    """Daily station meteorology from an hourly lon/lat grid.

    grid columns: time, lon, lat and the six met variables.
    stations columns: station_id, lon, lat.
    """
    missing = [column for column in ("time", "lon", "lat", *MET_VARIABLES) if column not in grid.columns]
    if missing:
        raise MetGridError(f"met grid is missing columns: {missing}")

    times = pd.to_datetime(grid["time"], utc=True).dt.tz_localize(None)
    hours = np.unique(times.to_numpy())
    lon_axis = np.sort(grid["lon"].unique())
    lat_axis = np.sort(grid["lat"].unique())
    if len(lon_axis) < 2 or len(lat_axis) < 2:
        raise MetGridError("met grid needs at least two longitudes and two latitudes")

    t_idx = np.searchsorted(hours, times.to_numpy())
    lo_idx = np.searchsorted(lon_axis, grid["lon"].to_numpy())
    la_idx = np.searchsorted(lat_axis, grid["lat"].to_numpy())
    cubes = {}
    for name in MET_VARIABLES:
        cube = np.full((len(hours), len(lat_axis), len(lon_axis)), np.nan)
        cube[t_idx, la_idx, lo_idx] = grid[name].to_numpy(dtype=np.float64)
        cubes[name] = cube

    days = pd.DatetimeIndex(hours).date
    rows = []
    unusable = 0
    for station in stations.itertuples(index=False):
        i = _enclosing(lat_axis, float(station.lat), "latitude")
        j = _enclosing(lon_axis, float(station.lon), "longitude")
        hourly = pd.DataFrame({
            name: bilinear_interpolate(
                cubes[name][:, i:i + 2, j:j + 2],
                lon_axis[j:j + 2],
                lat_axis[i:i + 2],
                float(station.lon),
                float(station.lat),
            )
            for name in MET_VARIABLES
        })
        hourly["date"] = days
        for day, group in hourly.groupby("date", sort=True):
            try:
                daily = aggregate_met(group[list(MET_VARIABLES)].to_dict("records"), required_hours)
            except IncompleteMetError as exc:
                unusable += 1
                logger.warning(f"Skipping met for {station.station_id} {day}: {exc}")
                continue
            rows.append({"station_id": station.station_id, "date": day.isoformat(), **asdict(daily)})

    if unusable:
        logger.info(f"{unusable} station-days flagged unusable for incomplete meteorology")
    return pd.DataFrame(rows, columns=["station_id", "date", *MET_VARIABLES])
