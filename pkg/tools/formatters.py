"""
Output formatting utilities for opsat
Formats metrics, validation summaries, and run results for console and CSV output
"""

import json
import math
from datetime import date, datetime
from pathlib import Path
from typing import Dict, List, Any, Optional

import numpy as np

SIGNIFICANT_DIGITS = 4


def format_sig(value: Any, digits: int = SIGNIFICANT_DIGITS) -> str:
    """Format a number to a fixed count of significant digits

    Args:
        value: Number to format
        digits: Significant digits to keep

    Returns:
        Formatted number, or 'nan' for missing values
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(number):
        return "nan"
    if math.isinf(number):
        return "inf" if number > 0 else "-inf"
    return f"{number:.{digits}g}"


def round_sig(value: Any, digits: int = SIGNIFICANT_DIGITS) -> float:
    """Round a number to significant digits, keeping it numeric for CSV output"""
    text = format_sig(value, digits)
    try:
        return float(text)
    except ValueError:
        return float("nan")


def format_percent(fraction: Any, decimals: int = 0) -> str:
    """Format a fraction such as NMAE as a percentage

    Args:
        fraction: Value where 1.0 means 100%
        decimals: Decimal places to show

    Returns:
        Formatted percentage string
    """
    try:
        number = float(fraction)
    except (TypeError, ValueError):
        return str(fraction)
    if math.isnan(number):
        return "nan"
    return f"{number * 100:.{decimals}f}%"


def format_metrics_report(report: Dict[str, Any]) -> str:
    """Format one MetricsReport (as a dict) for console display

    Args:
        report: Dictionary with r2, rmse, nmae, n and tags

    Returns:
        Formatted single-line report
    """
    tags = " ".join(str(report[key]) for key in ('model', 'target', 'split') if report.get(key))
    return (
        f"{tags}: R²={format_sig(report['r2'], 2)} "
        f"RMSE={format_sig(report['rmse'], 2)} "
        f"NMAE={format_percent(report['nmae'])} (n={report['n']})"
    )


def format_validation_result(validation: Dict[str, Any], title: str = "Validation Report") -> str:
    """Format a table validation summary

    Args:
        validation: Validation result from validators.validate_rows

    Returns:
        Formatted validation report
    """
    lines = []
    lines.append(f"{title}:")
    lines.append("=" * 40)

    if validation['valid']:
        lines.append("✅ Table is valid")
    else:
        lines.append("❌ Table has errors")

    lines.append(f"Total Rows: {validation.get('total_rows', 0)}")
    lines.append(f"Valid Rows: {validation.get('valid_rows', 0)}")
    lines.append(f"Invalid Rows: {validation.get('invalid_rows', 0)}")

    if validation.get('errors'):
        lines.append("\nGeneral Errors:")
        for error in validation['errors']:
            lines.append(f"  • {error}")

    if validation.get('row_errors'):
        lines.append("\nRow Errors:")
        for row_error in validation['row_errors'][:10]:  # Limit to first 10
            lines.append(f"  Row {row_error['row']}:")
            for error in row_error['errors']:
                lines.append(f"    • {error}")

        if len(validation['row_errors']) > 10:
            lines.append(f"  ... and {len(validation['row_errors']) - 10} more rows with errors")

    if validation.get('warnings'):
        lines.append("\nWarnings:")
        for warning in validation['warnings'][:10]:
            lines.append(f"  ⚠️  {warning}")

        if len(validation['warnings']) > 10:
            lines.append(f"  ... and {len(validation['warnings']) - 10} more warnings")

    return "\n".join(lines)


def format_json_report(data: Dict[str, Any], indent: int = 2) -> str:
    """Format data as pretty JSON

    Args:
        data: Data to format
        indent: JSON indentation

    Returns:
        Pretty formatted JSON string
    """
    def default_serializer(obj):
        if isinstance(obj, (datetime, date)):
            return obj.isoformat()
        elif isinstance(obj, Path):
            return str(obj)
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        raise TypeError(f"Object of type {type(obj)} is not JSON serializable")

    return json.dumps(data, indent=indent, default=default_serializer, sort_keys=True)


def format_table(data: List[Dict[str, Any]], headers: Optional[List[str]] = None) -> str:
    """Format data as ASCII table

    Args:
        data: List of dictionaries to format
        headers: Optional list of headers to use

    Returns:
        Formatted ASCII table
    """
    if not data:
        return "No data to display"

    if headers is None:
        headers = list(data[0].keys())

    def cell(value: Any) -> str:
        return format_sig(value) if isinstance(value, float) else str(value)

    col_widths = {}
    for header in headers:
        col_widths[header] = len(header)
        for row in data:
            col_widths[header] = max(col_widths[header], len(cell(row.get(header, ''))))

    lines = []
    lines.append("| " + " | ".join(h.ljust(col_widths[h]) for h in headers) + " |")
    lines.append("|-" + "-|-".join("-" * col_widths[h] for h in headers) + "-|")
    for row in data:
        lines.append("| " + " | ".join(cell(row.get(h, '')).ljust(col_widths[h]) for h in headers) + " |")

    return "\n".join(lines)


def format_duration(seconds: float) -> str:
    """Format duration in human readable format

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted duration string
    """
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        return f"{seconds / 60:.1f}m"
    else:
        return f"{seconds / 3600:.1f}h"
