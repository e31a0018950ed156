#!/usr/bin/env python3
"""Tests for experiment configs, matrices, run directories, and the results table."""

from __future__ import annotations

import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd

import runner
from config import config as settings
from runner import (
    TABLE2_ROWS,
    ExperimentConfig,
    ExperimentError,
    MatrixConfig,
    config_hash,
    derive_seeds,
    emit_report,
    find_runs,
    load_run,
    run_experiment,
    wide_table,
    write_corpus_report,
)
from synthgen import SynthConfig, write_corpus
from cloud_filter import default_filter_config
from dataset import build_corpus, load_met_table


DATA = {"scene_manifest": "/data/scenes.csv", "met_table": "/data/met.csv", "aq_table": "/data/aq.csv"}


def experiment(**overrides) -> ExperimentConfig:
    values = dict(DATA, target="op_aa", family="transfer", features="I+M")
    values.update(overrides)
    return ExperimentConfig.from_dict(values)


class ExperimentConfigTests(unittest.TestCase):
    def test_run_name(self) -> None:
        self.assertEqual(experiment().run_name, "transfer-IM-op_aa-RGB-s0")
        self.assertEqual(experiment(family="baseline", features="M", seed=3).run_name,
                         "baseline-M-op_aa-RGB-s3")

    def test_rejects_bad_documents(self) -> None:
        cases = [
            dict(learning_rte=1e-3),
            dict(family="baseline", features="I+M"),
            dict(family="simsiam_bj", features="I"),
            dict(bootstrap_unit="station"),
            dict(simsiam_corpus="test"),
        ]
        for overrides in cases:
            with self.subTest(overrides=overrides):
                with self.assertRaises(ExperimentError) as caught:
                    experiment(**overrides)
                self.assertEqual(caught.exception.stage, "config")

    def test_paths_resolve_against_config_folder(self) -> None:
        with mock.patch.object(settings, "DATA_ROOT", None):
            loaded = ExperimentConfig.from_dict(
                {"target": "pm10", "family": "baseline", "features": "M", "scene_manifest": "scenes.csv",
                 "met_table": "met.csv", "aq_table": "/abs/aq.csv"},
                base_dir=Path("/configs"),
            )
        self.assertEqual(loaded.scene_manifest, "/configs/scenes.csv")
        self.assertEqual(loaded.aq_table, "/abs/aq.csv")

    def test_snapshot_round_trip(self) -> None:
        original = experiment(seed=4, split_ratios=[0.5, 0.25, 0.25])
        self.assertEqual(original.split_ratios, (0.5, 0.25, 0.25))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps({"config_hash": config_hash(original), "config": original.to_dict()}))
            reloaded = ExperimentConfig.from_file(path)
        self.assertEqual(reloaded, original)
        self.assertEqual(config_hash(reloaded), config_hash(original))

    def test_missing_or_broken_file(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ExperimentError):
                ExperimentConfig.from_file(Path(tmp) / "absent.json")
            broken = Path(tmp) / "broken.json"
            broken.write_text("{not json")
            with self.assertRaises(ExperimentError):
                ExperimentConfig.from_file(broken)

    def test_hash_tracks_every_field(self) -> None:
        base = experiment()
        self.assertEqual(config_hash(base), config_hash(experiment()))
        self.assertEqual(len(config_hash(base)), 64)
        self.assertNotEqual(config_hash(base), config_hash(experiment(seed=1)))
        self.assertNotEqual(config_hash(base), config_hash(experiment(dropout=0.3)))


class SeedTests(unittest.TestCase):
    def test_children_are_stable_and_distinct(self) -> None:
        first = derive_seeds(0)
        self.assertEqual(first, derive_seeds(0))
        self.assertNotEqual(first, derive_seeds(1))
        values = [first.split, first.init, first.shuffle, first.bootstrap, first.pretrain, first.forest]
        self.assertEqual(len(set(values)), 6)


class MatrixTests(unittest.TestCase):
    def matrix(self, **extra) -> MatrixConfig:
        data = {"base": dict(DATA, max_epochs=5)}
        data.update(extra)
        return MatrixConfig.from_dict(data)

    def test_full_table_with_external_weights(self) -> None:
        matrix = self.matrix(external_weights={"simsiam_bj": "/w/bj.safetensors",
                                               "simsiam_dl": "/w/dl.pth"},
                             weights_formats={"simsiam_dl": "sequential_backbone"})
        runs = matrix.experiments()
        self.assertEqual(len(runs), 45)
        dl = [run for run in runs if run.family == "simsiam_dl"]
        self.assertTrue(all(run.weights_format == "sequential_backbone" for run in dl))
        self.assertTrue(all(run.external_weights == "/w/dl.pth" for run in dl))
        self.assertTrue(all(run.max_epochs == 5 for run in runs))

    def test_missing_weights_skip_or_fail(self) -> None:
        self.assertEqual(len(self.matrix().experiments()), 33)
        with self.assertRaises(ExperimentError):
            self.matrix(skip_missing_weights=False).experiments()

    def test_named_row_sets(self) -> None:
        toar = self.matrix(rows="toar", image_types=["TOAR"], seeds=[0, 1], targets=["pm10"])
        runs = toar.experiments()
        self.assertEqual(len(runs), 12)
        self.assertEqual({run.image_type for run in runs}, {"TOAR"})
        with self.assertRaises(ExperimentError):
            self.matrix(rows="table9")

    def test_rejects_unknown_keys(self) -> None:
        with self.assertRaises(ExperimentError):
            self.matrix(epochs=3)
        with self.assertRaises(ExperimentError):
            MatrixConfig.from_dict({"rows": "table2"})

    def test_bundled_matrices_parse(self) -> None:
        data_dir = Path(__file__).resolve().parents[1] / "data"
        for name in ("matrix-table2.json", "matrix-toar.json"):
            with self.subTest(name=name):
                matrix = MatrixConfig.from_file(data_dir / name)
                self.assertTrue(matrix.rows)


def long_frame(seeds=(0,)) -> pd.DataFrame:
    rows = []
    for seed in seeds:
        for order, (family, features) in enumerate(TABLE2_ROWS):
            for target in ("pm10", "op_aa", "op_dtt"):
                for split in ("train", "val", "test"):
                    rows.append({
                        "model": runner.FAMILY_LABELS[family], "family": family, "features": features,
                        "image_type": "RGB", "seed": seed, "target": target, "split": split,
                        "r2": 0.1 + order / 100 + seed / 1000 + 0.0123456, "rmse": 1.0 + order,
                        "nmae": 0.25, "n": 10, "config_hash": "x",
                    })
    return pd.DataFrame(rows)


class WideTableTests(unittest.TestCase):
    def test_one_row_per_model_in_table_order(self) -> None:
        wide = wide_table(long_frame())
        self.assertEqual(len(wide), 15)
        self.assertEqual(list(wide.columns[:4]), ["model", "features", "image_type", "seed"])
        self.assertEqual(list(wide.columns[4:7]), ["op_aa_r2", "op_aa_rmse", "op_aa_nmae"])
        self.assertEqual(list(wide.columns[-3:]), ["pm10_r2", "pm10_rmse", "pm10_nmae"])
        expected = [(runner.FAMILY_LABELS[family], features) for family, features in TABLE2_ROWS]
        self.assertEqual(list(zip(wide["model"], wide["features"])), expected)
        self.assertEqual(wide.loc[0, "op_aa_r2"], 0.1123)
        self.assertEqual(wide.loc[14, "pm10_rmse"], 15.0)

    def test_seed_mean_rows(self) -> None:
        wide = wide_table(long_frame(seeds=(0, 1)), seed_mean=True)
        self.assertEqual(len(wide), 45)
        means = wide[wide["seed"] == "seed-mean"]
        self.assertEqual(len(means), 15)
        np.testing.assert_allclose(means["op_aa_r2"].iloc[0], 0.1128, atol=1e-4)

    def test_missing_target_stays_blank(self) -> None:
        long = long_frame()
        wide = wide_table(long[long["target"] != "op_dtt"])
        self.assertTrue(wide["op_dtt_r2"].isna().all())


class MetGridTableTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        rows = []
        for hour in range(24):
            for lon in (6.0, 6.5):
                for lat in (45.0, 45.5):
                    rows.append({"time": f"2018-03-01T{hour:02d}:00:00Z", "lon": lon, "lat": lat,
                                 "t2m": lon, "rh": 50.0, "sp": 98000.0, "wind_u": 0.0, "wind_v": lat,
                                 "blh": 600.0})
        self.grid = self.root / "grid.csv"
        pd.DataFrame(rows).to_csv(self.grid, index=False)
        self.stations = self.root / "stations.csv"

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_writes_loadable_daily_table(self) -> None:
        pd.DataFrame([{"station_id": "S1", "lon": 6.25, "lat": 45.25}]).to_csv(self.stations, index=False)
        out = runner.met_table_from_grid(self.grid, self.stations, self.root / "out" / "met.csv")
        table = load_met_table(out)
        self.assertEqual(len(table), 1)
        self.assertAlmostEqual(next(iter(table.values())).t2m, 6.25)

    def test_station_table_needs_coordinates(self) -> None:
        pd.DataFrame([{"station_id": "S1", "lon": 6.25}]).to_csv(self.stations, index=False)
        with self.assertRaises(ExperimentError) as caught:
            runner.met_table_from_grid(self.grid, self.stations, self.root / "met.csv")
        self.assertEqual(caught.exception.stage, "prepare")

    def test_station_outside_grid(self) -> None:
        pd.DataFrame([{"station_id": "S1", "lon": 9.0, "lat": 45.25}]).to_csv(self.stations, index=False)
        with self.assertRaisesRegex(ExperimentError, "outside the grid"):
            runner.met_table_from_grid(self.grid, self.stations, self.root / "met.csv")


class BaselineRunTests(unittest.TestCase):
    """A meteorology-only run end to end; no scene pixels are read."""

    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        cls.paths = write_corpus(SynthConfig(n_stations=2, n_days=30, seed=5, noise_sd=0.1,
                                             image_types=("RGB",)), root / "corpus")
        # normalisation stats read the rasters, so the corpus report comes first
        corpus = build_corpus(cls.paths.scene_manifest, cls.paths.met, cls.paths.aq, "RGB",
                              default_filter_config(), seed=derive_seeds(0).split)
        cls.report_paths = write_corpus_report(corpus, root / "prepare")
        for raster in (root / "corpus" / "scenes").glob("*.tif"):
            raster.unlink()
        cls.experiment = ExperimentConfig(
            target="op_aa", family="baseline", features="M",
            scene_manifest=str(cls.paths.scene_manifest), met_table=str(cls.paths.met),
            aq_table=str(cls.paths.aq), max_epochs=20, bootstrap_resamples=50,
        )
        cls.out = root / "runs"
        cls.artifacts = run_experiment(cls.experiment, cls.out)

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def test_run_directory(self) -> None:
        digest = config_hash(self.experiment)
        self.assertEqual(self.artifacts.run_dir.name, f"baseline-M-op_aa-RGB-s0-{digest[:12]}")
        self.assertEqual(find_runs(self.out), [self.artifacts.run_dir])
        names = {path.name for path in self.artifacts.run_dir.iterdir()}
        for name in ("config.json", "model.safetensors", "metrics.csv", "bootstrap.csv", "history.csv",
                     "predictions.csv", "summary.json", "scatter.png", "loss.png"):
            self.assertIn(name, names)
        self.assertFalse(any(path.name.endswith(".partial") for path in self.out.iterdir()))

    def test_artifacts_carry_the_hash(self) -> None:
        metrics = pd.read_csv(self.artifacts.run_dir / "metrics.csv")
        self.assertEqual(metrics["split"].tolist(), ["train", "val", "test"])
        self.assertEqual(set(metrics["config_hash"]), {self.artifacts.config_hash})
        predictions = pd.read_csv(self.artifacts.run_dir / "predictions.csv")
        self.assertEqual(len(predictions), int(metrics["n"].sum()))
        self.assertIn(f"config_hash={self.artifacts.config_hash}".encode(),
                      (self.artifacts.run_dir / "loss.png").read_bytes())

    def test_baseline_trains_every_epoch(self) -> None:
        history = self.artifacts.history
        self.assertEqual(history.stopped_epoch, 20)
        self.assertEqual(len(history.train_loss), 20)
        self.assertTrue(1 <= history.best_epoch <= 20)

    def test_load_run_matches(self) -> None:
        loaded = load_run(self.artifacts.run_dir)
        self.assertEqual(loaded.config, self.experiment)
        self.assertEqual(loaded.config_hash, self.artifacts.config_hash)
        for saved, fresh in zip(loaded.metrics, self.artifacts.metrics):
            self.assertAlmostEqual(saved.rmse, fresh.rmse, places=9)
        self.assertEqual(loaded.history.best_epoch, self.artifacts.history.best_epoch)
        self.assertEqual(len(loaded.bootstrap), len(self.artifacts.bootstrap))

    def test_rerun_is_reproducible(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            again = run_experiment(self.experiment, Path(tmp))
        for first, second in zip(self.artifacts.metrics, again.metrics):
            self.assertAlmostEqual(first.r2, second.r2, places=6)

    def test_report(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_report([self.artifacts], Path(tmp))
            table = pd.read_csv(paths.table)
            self.assertEqual(len(table), 1)
            self.assertEqual(table.loc[0, "model"], "Baseline")
            self.assertTrue(table["pm10_r2"].isna().all())
            self.assertTrue(paths.bootstrap.is_file())
        with self.assertRaises(ExperimentError):
            emit_report([], Path("unused"))

    def test_failed_run_leaves_nothing(self) -> None:
        broken = ExperimentConfig(
            target="op_aa", family="baseline", features="M",
            scene_manifest=str(self.paths.scene_manifest), met_table=str(self.paths.root / "absent.csv"),
            aq_table=str(self.paths.aq),
        )
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ExperimentError) as caught:
                run_experiment(broken, Path(tmp))
            self.assertEqual(caught.exception.stage, "prepare")
            self.assertEqual(list(Path(tmp).iterdir()), [])

    def test_corpus_report(self) -> None:
        paths = self.report_paths
        splits = pd.read_csv(paths["splits"])
        self.assertEqual(len(splits), 30)
        self.assertEqual(splits["split"].value_counts().to_dict(), {"train": 18, "val": 6, "test": 6})
        self.assertEqual(len(pd.read_csv(paths["target_correlations"])), 3)
        self.assertEqual(json.loads(paths["norm_stats"].read_text())["norm_stats"]["image_type"], "RGB")
        self.assertTrue(paths["station_correlations"].is_file())


@unittest.skipUnless(settings.RUN_SLOW_TESTS, "set OPSAT_RUN_SLOW=1 to run backbone end-to-end tests")
class RandomBackboneRunTests(unittest.TestCase):
    def test_frozen_features_run(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            paths = write_corpus(SynthConfig(n_stations=2, n_days=10, seed=1, image_types=("RGB",)),
                                 root / "corpus")
            run = run_experiment(ExperimentConfig(
                target="pm10", family="random", features="I+M",
                scene_manifest=str(paths.scene_manifest), met_table=str(paths.met), aq_table=str(paths.aq),
                max_epochs=2, bootstrap_resamples=20,
            ), root / "runs")
            self.assertEqual([report.split for report in run.metrics], ["train", "val", "test"])
            self.assertTrue(run.checkpoint.is_file())


@unittest.skipUnless(settings.RUN_SLOW_TESTS, "set OPSAT_RUN_SLOW=1 to run the synthetic acceptance check")
class SyntheticAcceptanceTests(unittest.TestCase):
    """Fused image and met features beat met alone on a corpus with a known haze signal."""

    def test_transfer_beats_threshold_on_every_seed(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            paths = write_corpus(SynthConfig(n_stations=3, n_days=400, noise_sd=1 / 3, seed=0,
                                             image_types=("RGB",)), root / "corpus", workers=4)
            common = dict(target="op_aa", scene_manifest=str(paths.scene_manifest),
                          met_table=str(paths.met), aq_table=str(paths.aq))
            for seed in (0, 1, 2):
                with self.subTest(seed=seed):
                    baseline = run_experiment(ExperimentConfig(family="baseline", features="M", seed=seed,
                                                               **common), root / "runs")
                    transfer = run_experiment(ExperimentConfig(family="transfer", features="I+M", seed=seed,
                                                               **common), root / "runs")
                    self.assertGreaterEqual(baseline.metrics[2].r2, 0.3)
                    self.assertGreaterEqual(transfer.metrics[2].r2, 0.5)


if __name__ == "__main__":
    unittest.main()
