#!/usr/bin/env python3
"""Tests for metrics, bootstrap intervals, and station-level skill."""

from __future__ import annotations

import math
import unittest

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from evaluation import (
    MetricError,
    MetricsReport,
    bootstrap_ci,
    compute_metrics,
    exhaustive_values,
    nmae,
    r2_score,
    rmse,
    spearman,
    station_correlations,
    station_mean_skill,
    target_correlations,
)


def loop_metrics(y, yhat):
    n = len(y)
    mean = sum(y) / n
    ss_res = sum((a - b) ** 2 for a, b in zip(y, yhat))
    ss_tot = sum((a - mean) ** 2 for a in y)
    return 1 - ss_res / ss_tot, math.sqrt(ss_res / n), sum(abs(a - b) for a, b in zip(y, yhat)) / (n * mean)


class MetricTests(unittest.TestCase):
    def test_against_direct_sums(self) -> None:
        rng = np.random.default_rng(0)
        for trial in range(25):
            n = int(rng.integers(2, 60))
            y = rng.gamma(2.0, 3.0, n) + 0.1
            yhat = y + rng.normal(0.0, 2.0, n)
            expected = loop_metrics(y.tolist(), yhat.tolist())
            with self.subTest(trial=trial):
                self.assertAlmostEqual(r2_score(y, yhat), expected[0], delta=1e-10)
                self.assertAlmostEqual(rmse(y, yhat), expected[1], delta=1e-10)
                self.assertAlmostEqual(nmae(y, yhat), expected[2], delta=1e-10)

    def test_worked_example(self) -> None:
        report = compute_metrics([1, 2, 3], [2, 2, 2], split="test", target="op_aa")
        self.assertAlmostEqual(report.r2, 0.0)
        self.assertAlmostEqual(report.rmse, math.sqrt(2 / 3))
        self.assertAlmostEqual(report.nmae, 1 / 3)
        self.assertEqual(report.n, 3)
        self.assertEqual(report.to_dict()["split"], "test")

    def test_perfect_estimates(self) -> None:
        report = compute_metrics([1.0, 4.0, 2.0], [1.0, 4.0, 2.0])
        self.assertEqual((report.r2, report.rmse, report.nmae), (1.0, 0.0, 0.0))

    def test_undefined_cases(self) -> None:
        with self.assertRaises(MetricError):
            r2_score([2, 2, 2], [1, 2, 3])
        with self.assertRaises(MetricError):
            nmae([1, -1], [0, 0])
        with self.assertRaises(MetricError):
            rmse([1, 2], [1])
        with self.assertRaises(MetricError):
            rmse([], [])
        with self.assertRaises(MetricError):
            rmse([1, float("nan")], [1, 2])

    def test_report_invariants(self) -> None:
        with self.assertRaises(MetricError):
            MetricsReport(r2=0.5, rmse=-1.0, nmae=0.1, n=3)
        with self.assertRaises(MetricError):
            MetricsReport(r2=1.5, rmse=1.0, nmae=0.1, n=3)
        with self.assertRaises(MetricError):
            MetricsReport(r2=0.5, rmse=1.0, nmae=0.1, n=0)


class SpearmanTests(unittest.TestCase):
    def test_monotone(self) -> None:
        x = np.array([0.3, 1.2, 5.0, 2.2, 9.1])
        self.assertAlmostEqual(spearman(x, np.exp(x)), 1.0)
        self.assertAlmostEqual(spearman(x, -x ** 3), -1.0)

    def test_ties_match_scipy(self) -> None:
        rng = np.random.default_rng(3)
        a = rng.integers(0, 5, 40).astype(float)
        b = a + rng.integers(0, 3, 40)
        self.assertAlmostEqual(spearman(a, b), spearmanr(a, b)[0], places=12)

    def test_degenerate(self) -> None:
        with self.assertRaises(MetricError):
            spearman([1, 1, 1], [1, 2, 3])
        with self.assertRaises(MetricError):
            spearman([1], [1])


class BootstrapTests(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(1)
        self.y = rng.gamma(2.0, 2.0, 40) + 0.5
        self.yhat = self.y + rng.normal(0.0, 1.0, 40)

    def test_seeded_and_ordered(self) -> None:
        first = bootstrap_ci(self.y, self.yhat, "rmse", B=300, seed=4)
        second = bootstrap_ci(self.y, self.yhat, "rmse", B=300, seed=4)
        self.assertEqual(first, second)
        self.assertLessEqual(first.lower, first.upper)
        self.assertLess(first.lower, first.point)
        self.assertGreater(first.upper, first.point)
        self.assertEqual((first.resamples, first.unit), (300, "observation"))

    def test_exhaustive_small_sample(self) -> None:
        y = np.array([1.0, 2.0, 3.0])
        yhat = np.array([2.0, 2.0, 2.5])
        manual = []
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    idx = [i, j, k]
                    manual.append(rmse(y[idx], yhat[idx]))
        result = bootstrap_ci(y, yhat, "rmse", exhaustive=True)
        self.assertEqual(result.resamples, 27)
        self.assertEqual(result.unit, "exhaustive")
        self.assertAlmostEqual(result.lower, float(np.percentile(manual, 2.5)))
        self.assertAlmostEqual(result.upper, float(np.percentile(manual, 97.5)))

    def test_exhaustive_skips_undefined_resamples(self) -> None:
        values = exhaustive_values(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 2.0]), r2_score)
        # the three constant resamples have no R2
        self.assertEqual(len(values), 24)
        with self.assertRaises(MetricError):
            exhaustive_values(np.ones(8), np.ones(8), rmse)

    def test_day_groups(self) -> None:
        groups = np.repeat(np.arange(20), 2)
        result = bootstrap_ci(self.y, self.yhat, "nmae", B=200, seed=0, groups=groups)
        self.assertEqual(result.unit, "group")
        with self.assertRaises(MetricError):
            bootstrap_ci(self.y, self.yhat, "nmae", groups=groups[:-1])

    def test_coverage(self) -> None:
        rng = np.random.default_rng(11)
        covered = 0
        trials = 150
        for trial in range(trials):
            y = rng.uniform(5.0, 15.0, 50)
            yhat = y + rng.normal(0.0, 1.0, 50)
            interval = bootstrap_ci(y, yhat, "rmse", B=400, seed=trial)
            covered += interval.lower <= 1.0 <= interval.upper
        self.assertGreater(covered / trials, 0.85)
        self.assertLessEqual(covered / trials, 1.0)

    def test_redraw_limit(self) -> None:
        calls = {"n": 0}

        def fragile(y, yhat):
            calls["n"] += 1
            if calls["n"] > 1:
                raise MetricError("undefined")
            return 0.0

        with self.assertRaises(MetricError):
            bootstrap_ci(self.y, self.yhat, fragile, B=5)
        self.assertEqual(calls["n"], 1 + 51)

    def test_bad_arguments(self) -> None:
        with self.assertRaises(MetricError):
            bootstrap_ci(self.y, self.yhat, "mape")
        with self.assertRaises(MetricError):
            bootstrap_ci(self.y, self.yhat, "rmse", B=0)


class StationSkillTests(unittest.TestCase):
    def test_half_error_example(self) -> None:
        frame = pd.DataFrame({
            "station_id": ["A", "A", "B", "B"],
            "observed": [1.0, 3.0, 2.0, 2.0],
            "estimated": [1.0, 1.0, 3.0, 3.0],
        })
        skill, means = station_mean_skill(frame)
        self.assertAlmostEqual(skill, 0.5)
        self.assertEqual(means["station_id"].tolist(), ["A", "B"])

    def test_station_without_records(self) -> None:
        frame = pd.DataFrame({
            "station_id": ["A", "B"],
            "observed": [1.0, np.nan],
            "estimated": [1.0, 2.0],
        })
        with self.assertRaises(MetricError):
            station_mean_skill(frame)
        with self.assertRaises(MetricError):
            station_mean_skill(frame.drop(columns=["estimated"]))


class CorrelationTableTests(unittest.TestCase):
    def setUp(self) -> None:
        dates = pd.date_range("2018-01-01", periods=10).strftime("%Y-%m-%d")
        base = np.arange(10, dtype=float)
        rows = []
        for station, values in (("A", base), ("B", base * 2 + 1), ("C", base[::-1])):
            for date, value in zip(dates, values):
                rows.append({"station_id": station, "date": date, "pm10": value,
                             "op_aa": value / 10, "op_dtt": 10 - value})
        self.aq = pd.DataFrame(rows)

    def test_station_pairs(self) -> None:
        table = station_correlations(self.aq, "pm10")
        self.assertEqual(len(table), 3)
        rho = {(r.station_a, r.station_b): r.spearman for r in table.itertuples(index=False)}
        self.assertAlmostEqual(rho[("A", "B")], 1.0)
        self.assertAlmostEqual(rho[("A", "C")], -1.0)

    def test_too_few_shared_dates(self) -> None:
        table = station_correlations(self.aq.head(12), "pm10")
        self.assertTrue(table["spearman"].isna().all())

    def test_target_pairs(self) -> None:
        table = target_correlations(self.aq)
        self.assertEqual(len(table), 3)
        rho = {(r.target_a, r.target_b): r.spearman for r in table.itertuples(index=False)}
        self.assertAlmostEqual(rho[("pm10", "op_aa")], 1.0)
        self.assertAlmostEqual(rho[("pm10", "op_dtt")], -1.0)

    def test_unknown_target(self) -> None:
        with self.assertRaises(MetricError):
            station_correlations(self.aq, "no2")


if __name__ == "__main__":
    unittest.main()
