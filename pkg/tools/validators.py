"""
Input validation utilities for opsat
Validates manifest rows, met/AQ rows, and experiment configurations
"""

import math
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd

from records import CHANNELS, MET_VARIABLES, TARGETS

DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")

SCENE_COLUMNS = [
    'station_id', 'date', 'image_type', 'instrument', 'cover', 'cloud_cover',
    'green_q05', 'green_q50', 'green_q95', 'path',
]
MET_COLUMNS = ['station_id', 'date'] + list(MET_VARIABLES)
AQ_COLUMNS = ['station_id', 'date']

FAMILIES = ['baseline', 'random', 'transfer', 'finetune', 'simsiam', 'simsiam_bj', 'simsiam_dl']
FEATURE_SETS = ['M', 'I', 'I+M', 'I+H']
EXTERNAL_FAMILIES = ['simsiam_bj', 'simsiam_dl']
HIGH_DIM_FAMILIES = ['transfer', 'finetune']


def _new_result() -> Dict[str, Any]:
    return {
        'valid': True,
        'errors': [],
        'warnings': []
    }


def _fail(result: Dict[str, Any], message: str) -> None:
    result['valid'] = False
    result['errors'].append(message)


def validate_date(value: Any) -> bool:
    """Validate an ISO-8601 calendar date string

    Args:
        value: Date text, e.g. '2019-04-22'

    Returns:
        True if valid, False otherwise
    """
    if not value or not isinstance(value, str):
        return False
    if not DATE_RE.match(value.strip()[:10]):
        return False
    try:
        pd.Timestamp(value.strip()[:10])
        return True
    except ValueError:
        return False


def as_number(value: Any) -> Optional[float]:
    """Parse a CSV cell into a finite float, or None when blank/invalid"""
    if value is None:
        return None
    if isinstance(value, str) and not value.strip():
        return None
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    if math.isnan(number) or math.isinf(number):
        return None
    return number


def validate_fraction(value: Any) -> bool:
    number = as_number(value)
    return number is not None and 0.0 <= number <= 1.0


def validate_scene_row(row: Dict[str, Any]) -> Dict[str, Any]:
    """Validate a scene manifest row

    Args:
        row: Dictionary representing one manifest row

    Returns:
        Validation result with errors if any
    """
    result = _new_result()

    if not row.get('station_id'):
        _fail(result, "Missing station_id")
    if not validate_date(str(row.get('date', ''))):
        _fail(result, f"Invalid date: {row.get('date')}")
    if row.get('image_type') not in CHANNELS:
        _fail(result, f"Invalid image_type: {row.get('image_type')}")
    if not row.get('path'):
        _fail(result, "Missing path")

    for column in ('cover', 'cloud_cover'):
        if not validate_fraction(row.get(column)):
            _fail(result, f"{column} must be a fraction in [0, 1]: {row.get(column)}")

    quantiles = [as_number(row.get(name)) for name in ('green_q05', 'green_q50', 'green_q95')]
    if any(value is None for value in quantiles):
        # Kept so the cloud filter can reject it with a diagnostic
        result['warnings'].append("Green band quantiles are missing")
    elif not quantiles[0] <= quantiles[1] <= quantiles[2]:
        _fail(result, f"Green band quantiles are not ordered: {quantiles}")

    if not row.get('instrument'):
        result['warnings'].append("Missing instrument tag")

    return result


def validate_met_row(row: Dict[str, Any], rh_scale: str = 'percent') -> Dict[str, Any]:
    """Validate a daily meteorology row

    Args:
        row: Dictionary representing one met row
        rh_scale: 'percent' for [0, 100] or 'fraction' for [0, 1]

    Returns:
        Validation result with errors if any
    """
    result = _new_result()

    if not row.get('station_id'):
        _fail(result, "Missing station_id")
    if not validate_date(str(row.get('date', ''))):
        _fail(result, f"Invalid date: {row.get('date')}")

    for name in MET_VARIABLES:
        if as_number(row.get(name)) is None:
            _fail(result, f"Met variable {name} must be finite: {row.get(name)}")

    rh = as_number(row.get('rh'))
    upper = 100.0 if rh_scale == 'percent' else 1.0
    if rh is not None and not 0.0 <= rh <= upper:
        _fail(result, f"rh outside [0, {upper:g}]: {rh}")

    blh = as_number(row.get('blh'))
    if blh is not None and blh <= 0:
        result['warnings'].append(f"Non-positive boundary layer height: {blh}")

    return result


def validate_aq_row(row: Dict[str, Any]) -> Dict[str, Any]:
    """Validate an air-quality observation row

    Args:
        row: Dictionary representing one AQ row

    Returns:
        Validation result with errors if any
    """
    result = _new_result()

    if not row.get('station_id'):
        _fail(result, "Missing station_id")
    if not validate_date(str(row.get('date', ''))):
        _fail(result, f"Invalid date: {row.get('date')}")

    present = 0
    for name in TARGETS:
        raw = row.get(name)
        if raw is None or (isinstance(raw, str) and not raw.strip()):
            continue
        if isinstance(raw, float) and math.isnan(raw):
            continue
        value = as_number(raw)
        if value is None or value < 0:
            _fail(result, f"{name} must be a finite value >= 0: {raw}")
        else:
            present += 1

    if present == 0:
        result['warnings'].append("Row has no air-quality measures")

    return result


def validate_rows(rows: Iterable[Dict[str, Any]], validator, **kwargs) -> Dict[str, Any]:
    """Validate every row of a table and summarise

    Args:
        rows: Row dictionaries
        validator: One of the validate_*_row functions

    Returns:
        Validation summary
    """
    result = {
        'valid': True,
        'total_rows': 0,
        'valid_rows': 0,
        'invalid_rows': 0,
        'errors': [],
        'warnings': [],
        'row_errors': []
    }

    for row_num, row in enumerate(rows, start=2):  # Start at 2 (header is row 1)
        result['total_rows'] += 1
        row_validation = validator(row, **kwargs)
        if row_validation['valid']:
            result['valid_rows'] += 1
        else:
            result['invalid_rows'] += 1
            result['row_errors'].append({
                'row': row_num,
                'errors': row_validation['errors']
            })
        if row_validation['warnings']:
            result['warnings'].extend([
                f"Row {row_num}: {warning}"
                for warning in row_validation['warnings']
            ])

    if result['total_rows'] == 0:
        result['valid'] = False
        result['errors'].append("Table is empty")
    elif result['invalid_rows'] > 0:
        result['valid'] = False
        result['errors'].append(f"{result['invalid_rows']} invalid rows found")

    return result


def validate_table_columns(path: Path, frame: pd.DataFrame, required: List[str]) -> Dict[str, Any]:
    """Check that a CSV carries its required columns"""
    result = _new_result()
    missing = [column for column in required if column not in frame.columns]
    if missing:
        _fail(result, f"{path} is missing required columns: {missing}")
    return result


def validate_experiment_fields(target: str, family: str, features: str, image_type: str,
                               external_weights: Optional[str] = None) -> Dict[str, Any]:
    """Validate the model/feature/target combination of one experiment

    Returns:
        Validation result
    """
    result = _new_result()

    if target not in TARGETS:
        _fail(result, f"Invalid target: {target}")
    if family not in FAMILIES:
        _fail(result, f"Invalid family: {family}")
    if features not in FEATURE_SETS:
        _fail(result, f"Invalid features: {features}")
    if image_type not in CHANNELS:
        _fail(result, f"Invalid image_type: {image_type}")
    if not result['valid']:
        return result

    if family == 'baseline' and features != 'M':
        _fail(result, "Baseline family uses meteorology only (features=M)")
    if family != 'baseline' and features == 'M':
        _fail(result, f"Family {family} needs image features (I, I+M or I+H)")
    if features == 'I+H' and family not in HIGH_DIM_FAMILIES:
        _fail(result, f"I+H features apply to {HIGH_DIM_FAMILIES} only, got {family}")
    if family in EXTERNAL_FAMILIES and not external_weights:
        _fail(result, f"Family {family} requires external_weights")
    if family == 'random' and image_type == 'TOAR':
        result['warnings'].append("Random features on TOAR images were not part of the reference matrix")

    return result


def validate_experiment_config(data: Dict[str, Any]) -> Dict[str, Any]:
    """Validate an experiment config document before it is loaded

    Args:
        data: Parsed JSON config

    Returns:
        Validation result
    """
    result = _new_result()

    for key in ('target', 'family', 'features', 'scene_manifest', 'met_table', 'aq_table'):
        if not data.get(key):
            _fail(result, f"Missing required field: {key}")
    if not result['valid']:
        return result

    fields = validate_experiment_fields(
        data['target'], data['family'], data['features'],
        data.get('image_type', 'RGB'), data.get('external_weights'),
    )
    result['errors'].extend(fields['errors'])
    result['warnings'].extend(fields['warnings'])
    result['valid'] = fields['valid']

    ratios = data.get('split_ratios')
    if ratios is not None:
        if len(ratios) != 3 or any(as_number(r) is None or as_number(r) < 0 for r in ratios):
            _fail(result, f"split_ratios must be three non-negative numbers, got {ratios}")
        elif not math.isclose(sum(float(r) for r in ratios), 1.0, abs_tol=1e-9):
            _fail(result, f"split_ratios must sum to 1, got {ratios}")

    if data.get('rh_scale', 'percent') not in ('percent', 'fraction'):
        _fail(result, f"Invalid rh_scale: {data['rh_scale']}")
    if data.get('simsiam_corpus') == 'all':
        result['warnings'].append("SimSiam corpus 'all' pre-trains on validation and test images")

    return result
