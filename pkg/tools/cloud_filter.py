#!/usr/bin/env python3
"""Load the clear-scene filter document and classify scene metadata.

A scene is kept when any of three branches holds: fully covered and cloud
free with a dark green band (minus a few hand-excluded dates), fully covered
and partly cloudy on an allow-listed date with bounded green quantiles, or
mostly covered with a dark green band. Date lists live in
data/cloud-filter.json, not here.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from config import DEFAULT_FILTER_CONFIG
from records import SceneMeta


logger = logging.getLogger(__name__)


class CloudFilterError(ValueError):
    """Raised when the filter document is missing or malformed."""


@dataclass(frozen=True)
class FilterConfig:
    clear_cover: float
    clear_cloud_cover: float
    clear_q05_below: float
    excluded_dates: frozenset[dt.date]
    excluded_except_station: str
    excluded_except_dates: frozenset[dt.date]
    excluded_date_instrument: frozenset[tuple[dt.date, str]]
    excluded_date_instrument_station: frozenset[tuple[dt.date, str, str]]
    partly_cover: float
    partly_q05_below: float
    partly_q50_below: float
    partly_q95_below: float
    partly_allowed_dates: frozenset[dt.date]
    partial_cover_above: float
    partial_cover_below: float
    partial_q95_below: float
    version: str = ""


def _dates(values: list[str], label: str) -> frozenset[dt.date]:
    try:
        return frozenset(dt.date.fromisoformat(value) for value in values)
    except (TypeError, ValueError) as exc:
        raise CloudFilterError(f"{label} must be a list of YYYY-MM-DD dates") from exc


def _section(document: dict[str, Any], name: str, keys: tuple[str, ...]) -> dict[str, Any]:
    section = document.get(name)
    if not isinstance(section, dict):
        raise CloudFilterError(f"Cloud filter is missing section {name}")
    missing = sorted(set(keys) - set(section))
    if missing:
        raise CloudFilterError(f"Cloud filter section {name} is missing keys: {', '.join(missing)}")
    return section


def load_filter_config(path: Path = DEFAULT_FILTER_CONFIG) -> FilterConfig:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CloudFilterError(f"Cloud filter file does not exist: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CloudFilterError(f"Cloud filter file is invalid JSON: {exc}") from exc

    if "schema_version" not in document:
        raise CloudFilterError("Cloud filter is missing schema_version")

    clear = _section(
        document,
        "clear",
        (
            "cover",
            "cloud_cover",
            "green_q05_below",
            "excluded_dates",
            "excluded_dates_except_station",
            "excluded_date_instrument",
            "excluded_date_instrument_station",
        ),
    )
    partly = _section(
        document,
        "partly_cloudy",
        ("cover", "green_q05_below", "green_q50_below", "green_q95_below", "allowed_dates"),
    )
    partial = _section(document, "partial_cover", ("cover_above", "cover_below", "green_q95_below"))

    except_station = clear["excluded_dates_except_station"]
    try:
        by_instrument = frozenset(
            (dt.date.fromisoformat(item["date"]), item["instrument"])
            for item in clear["excluded_date_instrument"]
        )
        by_instrument_station = frozenset(
            (dt.date.fromisoformat(item["date"]), item["instrument"], item["station"])
            for item in clear["excluded_date_instrument_station"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CloudFilterError(f"Cloud filter instrument exclusions are malformed: {exc}") from exc

    return FilterConfig(
        clear_cover=float(clear["cover"]),
        clear_cloud_cover=float(clear["cloud_cover"]),
        clear_q05_below=float(clear["green_q05_below"]),
        excluded_dates=_dates(clear["excluded_dates"], "clear.excluded_dates"),
        excluded_except_station=str(except_station.get("station", "")),
        excluded_except_dates=_dates(except_station.get("dates", []), "clear.excluded_dates_except_station"),
        excluded_date_instrument=by_instrument,
        excluded_date_instrument_station=by_instrument_station,
        partly_cover=float(partly["cover"]),
        partly_q05_below=float(partly["green_q05_below"]),
        partly_q50_below=float(partly["green_q50_below"]),
        partly_q95_below=float(partly["green_q95_below"]),
        partly_allowed_dates=_dates(partly["allowed_dates"], "partly_cloudy.allowed_dates"),
        partial_cover_above=float(partial["cover_above"]),
        partial_cover_below=float(partial["cover_below"]),
        partial_q95_below=float(partial["green_q95_below"]),
        version=str(document.get("filter_version", "")),
    )


@lru_cache(maxsize=1)
def default_filter_config() -> FilterConfig:
    return load_filter_config(DEFAULT_FILTER_CONFIG)


def _hand_excluded(meta: SceneMeta, rules: FilterConfig) -> bool:
    if meta.date in rules.excluded_dates:
        return True
    if meta.date in rules.excluded_except_dates and meta.station_id != rules.excluded_except_station:
        return True
    if (meta.date, meta.instrument) in rules.excluded_date_instrument:
        return True
    return (meta.date, meta.instrument, meta.station_id) in rules.excluded_date_instrument_station


def is_clear_branch(meta: SceneMeta, rules: FilterConfig) -> bool:
    return (
        meta.cover == rules.clear_cover
        and meta.cloud_cover == rules.clear_cloud_cover
        and meta.quantiles_present("q05")
        and meta.green_q05 < rules.clear_q05_below
        and not _hand_excluded(meta, rules)
    )


def is_partly_cloudy_branch(meta: SceneMeta, rules: FilterConfig) -> bool:
    return (
        meta.cover == rules.partly_cover
        and 0.0 < meta.cloud_cover < 1.0
        and meta.quantiles_present("q05", "q50", "q95")
        and meta.green_q05 < rules.partly_q05_below
        and meta.green_q50 < rules.partly_q50_below
        and meta.green_q95 < rules.partly_q95_below
        and meta.date in rules.partly_allowed_dates
    )


def is_partial_cover_branch(meta: SceneMeta, rules: FilterConfig) -> bool:
    return (
        rules.partial_cover_above < meta.cover < rules.partial_cover_below
        and meta.quantiles_present("q95")
        and meta.green_q95 < rules.partial_q95_below
    )


def apply_cloud_filter(meta: SceneMeta, rules: Optional[FilterConfig] = None) -> bool:
    """True when the scene is clear enough to use.

    Each branch only needs the quantiles it compares; a scene missing one of
    them fails that branch and, if nothing else accepts it, is rejected with a
    warning.
    """
    if rules is None:
        rules = default_filter_config()
    accepted = (
        is_clear_branch(meta, rules)
        or is_partly_cloudy_branch(meta, rules)
        or is_partial_cover_branch(meta, rules)
    )
    if not accepted and not meta.quantiles_present():
        logger.warning(f"Rejecting scene {meta.station_id} {meta.date}: green band quantiles are missing")
    return accepted
