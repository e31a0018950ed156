#!/usr/bin/env python3
"""Tests for console and CSV formatting helpers."""

from __future__ import annotations

import datetime as dt
import json
import unittest
from pathlib import Path

import numpy as np

from formatters import (
    format_duration,
    format_json_report,
    format_metrics_report,
    format_percent,
    format_sig,
    format_table,
    format_validation_result,
    round_sig,
)


class NumberFormatTests(unittest.TestCase):
    def test_significant_digits(self) -> None:
        self.assertEqual(format_sig(0.123456), "0.1235")
        self.assertEqual(format_sig(12345.6), "1.235e+04")
        self.assertEqual(format_sig(float("nan")), "nan")
        self.assertEqual(format_sig(float("-inf")), "-inf")
        self.assertEqual(format_sig("n/a"), "n/a")

    def test_round_sig_stays_numeric(self) -> None:
        self.assertEqual(round_sig(0.987654), 0.9877)
        self.assertEqual(round_sig(-3.14159, 2), -3.1)
        self.assertTrue(np.isnan(round_sig(float("nan"))))

    def test_percent(self) -> None:
        self.assertEqual(format_percent(0.284), "28%")
        self.assertEqual(format_percent(0.2846, 1), "28.5%")
        self.assertEqual(format_percent(float("nan")), "nan")

    def test_duration(self) -> None:
        self.assertEqual(format_duration(12.34), "12.3s")
        self.assertEqual(format_duration(90), "1.5m")
        self.assertEqual(format_duration(5400), "1.5h")


class ReportFormatTests(unittest.TestCase):
    def test_metrics_line(self) -> None:
        line = format_metrics_report({"r2": 0.6312, "rmse": 0.4421, "nmae": 0.21, "n": 120,
                                      "model": "Transfer I+M", "target": "op_aa", "split": "test"})
        self.assertEqual(line, "Transfer I+M op_aa test: R²=0.63 RMSE=0.44 NMAE=21% (n=120)")

    def test_json_report_handles_domain_types(self) -> None:
        text = format_json_report({"date": dt.date(2019, 1, 2), "path": Path("a/b"),
                                   "count": np.int64(3), "mean": np.float32(0.5), "std": np.array([1.0, 2.0])})
        self.assertEqual(json.loads(text), {"date": "2019-01-02", "path": "a/b", "count": 3,
                                            "mean": 0.5, "std": [1.0, 2.0]})

    def test_table(self) -> None:
        table = format_table([{"model": "Baseline", "r2": 0.412345}, {"model": "SimSiam", "r2": 0.5}])
        lines = table.splitlines()
        self.assertEqual(len(lines), 4)
        self.assertIn("0.4123", lines[2])
        self.assertEqual(format_table([]), "No data to display")

    def test_validation_summary(self) -> None:
        text = format_validation_result({
            "valid": False, "total_rows": 3, "valid_rows": 2, "invalid_rows": 1,
            "errors": ["1 invalid rows found"],
            "row_errors": [{"row": 3, "errors": ["Invalid date: 2019-13-01"]}],
            "warnings": ["Row 2: Missing instrument tag"],
        }, title="scenes.csv")
        self.assertIn("❌ Table has errors", text)
        self.assertIn("Row 3:", text)
        self.assertIn("Missing instrument tag", text)


if __name__ == "__main__":
    unittest.main()
