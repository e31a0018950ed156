#!/usr/bin/env python3
"""Experiment orchestration: one config -> one run directory of artifacts.

A run walks fixed stages (prepare, pretrain, backbone, features, train,
evaluate, emit). Any failure is re-raised as an ExperimentError tagged with
its stage and the half-written run directory is removed. Every artifact
carries the hash of the resolved config that produced it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch.utils.data import TensorDataset

from backbone import BackboneSpec, backbone_tensors, build_backbone, extract_features_batch
from cloud_filter import load_filter_config
from config import config as settings
from contrastive import SimSiamSpec, train_simsiam
from dataset import Corpus, LazyScenes, SampleDataset, build_corpus
from evaluation import (
    BootstrapCI,
    MetricError,
    MetricsReport,
    bootstrap_ci,
    compute_metrics,
    station_correlations,
    station_mean_skill,
    target_correlations,
)
from formatters import format_duration, round_sig
from head import FusedModel, HeadSpec, TrainConfig, TrainHistory, build_head, predict_dataset, train_supervised
from met_grid import MetGridError, met_from_grid
from metembed import ForestSpec, MetForest, embed, fit_embedding
from plots import build_loss_figure, build_scatter_figure, save_figure
from records import CHANNELS, SPLITS, TARGETS, NormStats, StationDayRecord
from validators import EXTERNAL_FAMILIES, validate_experiment_config, validate_experiment_fields
from weights_archive import decode_metadata, load_archive, save_archive


logger = logging.getLogger(__name__)

# family -> (backbone init mode, freeze policy); baseline has no backbone
FAMILY_BACKBONES = {
    "random": ("random", "all_frozen"),
    "transfer": ("imagenet", "all_frozen"),
    "finetune": ("imagenet", "tune_block4_avgpool"),
    "simsiam": ("simsiam_local", "all_frozen"),
    "simsiam_bj": ("external_file", "tune_block4_avgpool"),
    "simsiam_dl": ("external_file", "tune_block4_avgpool"),
}
FAMILY_LABELS = {
    "baseline": "Baseline",
    "random": "Random",
    "transfer": "Transfer",
    "finetune": "Fine-tuning",
    "simsiam": "SimSiam",
    "simsiam_bj": "SimSiam BJ",
    "simsiam_dl": "SimSiam DL",
}

# Model/feature rows of the main results table, in order
TABLE2_ROWS = (
    ("baseline", "M"),
    ("random", "I+M"),
    ("transfer", "I+M"),
    ("finetune", "I+M"),
    ("transfer", "I+H"),
    ("finetune", "I+H"),
    ("simsiam", "I+M"),
    ("simsiam_bj", "I+M"),
    ("simsiam_dl", "I+M"),
    ("random", "I"),
    ("transfer", "I"),
    ("finetune", "I"),
    ("simsiam", "I"),
    ("simsiam_bj", "I"),
    ("simsiam_dl", "I"),
)
# Four-channel supplementary rows
TOAR_ROWS = (
    ("transfer", "I+M"),
    ("finetune", "I+M"),
    ("simsiam", "I+M"),
    ("transfer", "I"),
    ("finetune", "I"),
    ("simsiam", "I"),
)
ROW_SETS = {"table2": TABLE2_ROWS, "toar": TOAR_ROWS}
REPORT_TARGET_ORDER = ("op_aa", "op_dtt", "pm10")
METRIC_NAMES = ("r2", "rmse", "nmae")
MATRIX_KEYS = ("base", "rows", "targets", "seeds", "image_types", "external_weights", "weights_formats",
               "skip_missing_weights")
PATH_FIELDS = ("scene_manifest", "met_table", "aq_table", "external_weights", "pretrained_backbone", "filter_config")


class ExperimentError(ValueError):
    """Raised when a run fails; `stage` names the stage that failed."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    target: str
    family: str
    features: str
    scene_manifest: str
    met_table: str
    aq_table: str
    image_type: str = "RGB"
    seed: int = 0
    external_weights: Optional[str] = None
    weights_format: str = "backbone"
    pretrained_backbone: Optional[str] = None
    filter_config: Optional[str] = None
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    rh_scale: str = "percent"
    standardize_met: bool = True
    hidden_dim: int = 512
    dropout: float = 0.2
    batch_size: int = 32
    learning_rate: float = 5e-4
    max_epochs: int = 150
    early_stop_patience: int = 25
    simsiam_epochs: int = 100
    simsiam_corpus: str = "train"
    forest_trees: int = 256
    forest_depth: int = 3
    bootstrap_resamples: int = 1000
    bootstrap_unit: str = "observation"

    def __post_init__(self) -> None:
        validation = validate_experiment_fields(
            self.target, self.family, self.features, self.image_type, self.external_weights
        )
        if not validation["valid"]:
            raise ExperimentError("config", "; ".join(validation["errors"]))
        for warning in validation["warnings"]:
            logger.warning(warning)
        if self.bootstrap_unit not in ("observation", "day"):
            raise ExperimentError("config", f"bootstrap_unit must be observation or day, got {self.bootstrap_unit!r}")
        if self.simsiam_corpus not in ("train", "all"):
            raise ExperimentError("config", f"simsiam_corpus must be train or all, got {self.simsiam_corpus!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Optional[Path] = None) -> "ExperimentConfig":
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ExperimentError("config", f"unknown config keys: {', '.join(unknown)}")
        validation = validate_experiment_config(data)
        if not validation["valid"]:
            raise ExperimentError("config", "; ".join(validation["errors"]))
        values = dict(data)
        for name in PATH_FIELDS:
            if values.get(name):
                values[name] = str(settings.resolve_data_path(values[name], base_dir))
        if "split_ratios" in values:
            values["split_ratios"] = tuple(float(v) for v in values["split_ratios"])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ExperimentError("config", str(exc)) from exc

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ExperimentError("config", f"Config file does not exist: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ExperimentError("config", f"Config file is invalid JSON: {exc}") from exc
        # snapshots wrap the config next to its hash
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["split_ratios"] = list(self.split_ratios)
        return data

    @property
    def model_label(self) -> str:
        return FAMILY_LABELS[self.family]

    @property
    def run_name(self) -> str:
        features = self.features.replace("+", "")
        return f"{self.family}-{features}-{self.target}-{self.image_type}-s{self.seed}"


def config_hash(experiment: ExperimentConfig) -> str:
    canonical = json.dumps(experiment.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Seeds:
    split: int
    init: int
    shuffle: int
    bootstrap: int
    pretrain: int
    forest: int


def derive_seeds(root: int) -> Seeds:
    """Independent child seeds so ablations can vary one source of randomness."""
    children = np.random.SeedSequence(root).spawn(6)
    values = [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]
    return Seeds(*values)


@dataclass
class RunArtifacts:
    run_dir: Path
    config: ExperimentConfig
    config_hash: str
    checkpoint: Path
    metrics: list[MetricsReport] = field(default_factory=list)
    bootstrap: list[BootstrapCI] = field(default_factory=list)
    plots: list[Path] = field(default_factory=list)
    config_snapshot: Optional[Path] = None
    history: Optional[TrainHistory] = None
    station_skill: Optional[float] = None


@contextmanager
def _stage(name: str) -> Iterator[None]:
    started = time.monotonic()
    logger.info(f"Stage {name} started")
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        logger.error(f"Stage {name} failed: {exc}")
        raise ExperimentError(name, str(exc)) from exc
    logger.info(f"Stage {name} finished in {format_duration(time.monotonic() - started)}")


def prepare_corpus(experiment: ExperimentConfig, seeds: Seeds) -> Corpus:
    rules = load_filter_config(Path(experiment.filter_config or settings.FILTER_CONFIG))
    return build_corpus(
        Path(experiment.scene_manifest),
        Path(experiment.met_table),
        Path(experiment.aq_table),
        image_type=experiment.image_type,
        filter_config=rules,
        seed=seeds.split,
        ratios=experiment.split_ratios,
        rh_scale=experiment.rh_scale,
    )


def met_table_from_grid(grid_path: Path, stations_path: Path, out_path: Path) -> Path:
    """Interpolate hourly gridded reanalysis to the stations and write a daily met table.

    stations_path is a CSV of station_id, lon, lat.
    """
    try:
        grid = pd.read_csv(grid_path)
        stations = pd.read_csv(stations_path, dtype={"station_id": str})
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ExperimentError("prepare", f"cannot read gridded meteorology: {exc}") from exc
    missing = [column for column in ("station_id", "lon", "lat") if column not in stations.columns]
    if missing:
        raise ExperimentError("prepare", f"{stations_path} is missing required columns: {missing}")
    try:
        daily = met_from_grid(grid, stations)
    except MetGridError as exc:
        raise ExperimentError("prepare", str(exc)) from exc
    if daily.empty:
        raise ExperimentError("prepare", f"no complete station-day in {grid_path}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    daily.to_csv(out_path, index=False)
    logger.info(f"Wrote {len(daily)} station-days of gridded meteorology to {out_path}")
    return out_path


def simsiam_spec(experiment: ExperimentConfig) -> SimSiamSpec:
    return SimSiamSpec(epochs=experiment.simsiam_epochs, corpus=experiment.simsiam_corpus)


def pretrain_backbone(experiment: ExperimentConfig, corpus: Corpus, seeds: Seeds, out_path: Path) -> Path:
    """SimSiam pre-training from random weights; saves the backbone alone."""
    spec = simsiam_spec(experiment)
    if spec.corpus == "all":
        logger.warning("SimSiam corpus 'all' includes validation and test images")
    scenes = LazyScenes(corpus.scene_refs(spec.corpus), corpus.norm_stats())
    initial = build_backbone(
        BackboneSpec("random", CHANNELS[experiment.image_type], "all_trainable"), seeds.pretrain
    )
    trained, history = train_simsiam(initial, scenes, spec, seeds.pretrain)
    return save_archive(out_path, backbone_tensors(trained), {
        "simsiam_spec": spec.to_dict(),
        "seed": seeds.pretrain,
        "image_type": experiment.image_type,
        "norm_stats": corpus.norm_stats().to_dict(),
        "history": history.to_dict(),
    })


def pretrained_path(experiment: ExperimentConfig, out_dir: Path) -> Path:
    sources = "|".join(str(part) for part in (experiment.scene_manifest, experiment.met_table,
                                               experiment.aq_table, experiment.filter_config,
                                               experiment.split_ratios))
    data_tag = hashlib.sha256(sources.encode("utf-8")).hexdigest()[:8]
    return Path(out_dir) / "pretrained" / (
        f"simsiam-{experiment.image_type}-s{experiment.seed}-{experiment.simsiam_corpus}"
        f"-e{experiment.simsiam_epochs}-{data_tag}.safetensors"
    )


def ensure_pretrained(experiment: ExperimentConfig, corpus: Corpus, seeds: Seeds,
                      out_dir: Path) -> ExperimentConfig:
    """Point a simsiam experiment at its pre-trained backbone, training it unless already on disk."""
    path = pretrained_path(experiment, out_dir)
    if path.is_file():
        logger.info(f"Reusing pre-trained backbone {path}")
    else:
        with _stage("pretrain"):
            pretrain_backbone(experiment, corpus, seeds, path)
    return replace(experiment, pretrained_backbone=str(path))


def backbone_spec(experiment: ExperimentConfig) -> BackboneSpec:
    init_mode, policy = FAMILY_BACKBONES[experiment.family]
    path = None
    weights_format = "backbone"
    if init_mode == "external_file":
        path = experiment.external_weights
        weights_format = experiment.weights_format
    elif init_mode == "simsiam_local":
        path = experiment.pretrained_backbone
    return BackboneSpec(
        init_mode=init_mode,
        in_channels=CHANNELS[experiment.image_type],
        freeze_policy=policy,
        external_weights_path=path,
        weights_format=weights_format,
    )


def _side_features(experiment: ExperimentConfig, corpus: Corpus, records: Sequence[StationDayRecord],
                   forest: Optional[MetForest]) -> Optional[np.ndarray]:
    if experiment.features == "I":
        return None
    met = corpus.met_matrix(records)
    if experiment.features == "I+H":
        return embed(forest, met)
    if experiment.standardize_met:
        met = corpus.met_standardizer.transform(met)
    return met.astype(np.float32)


@dataclass
class _Prepared:
    corpus: Corpus
    records: dict[str, list[StationDayRecord]]
    forest: Optional[MetForest] = None
    norm_stats: Optional[NormStats] = None


def run_experiment(experiment: ExperimentConfig, out_dir: Optional[Path] = None,
                   corpus: Optional[Corpus] = None,
                   feature_cache: Optional[dict] = None) -> RunArtifacts:
    """Run one configuration end to end and return its artifacts."""
    out_dir = Path(out_dir or settings.OUT_DIR)
    seeds = derive_seeds(experiment.seed)
    if experiment.family == "simsiam" and not experiment.pretrained_backbone:
        if corpus is None:
            with _stage("prepare"):
                corpus = prepare_corpus(experiment, seeds)
        experiment = ensure_pretrained(experiment, corpus, seeds, out_dir)
    digest = config_hash(experiment)
    run_dir = out_dir / f"{experiment.run_name}-{digest[:12]}"
    work_dir = run_dir.with_name(run_dir.name + ".partial")
    if work_dir.exists():
        shutil.rmtree(work_dir)
    work_dir.mkdir(parents=True)
    logger.info(f"Run {experiment.run_name} ({digest[:12]}) -> {run_dir}")

    try:
        artifacts = _run_stages(experiment, digest, seeds, work_dir, corpus, feature_cache)
    except BaseException:
        shutil.rmtree(work_dir, ignore_errors=True)
        raise

    if run_dir.exists():
        shutil.rmtree(run_dir)
    work_dir.rename(run_dir)
    return _relocate(artifacts, work_dir, run_dir)


def _relocate(artifacts: RunArtifacts, old: Path, new: Path) -> RunArtifacts:
    def move(path: Optional[Path]) -> Optional[Path]:
        return None if path is None else new / path.relative_to(old)
    artifacts.run_dir = new
    artifacts.checkpoint = move(artifacts.checkpoint)
    artifacts.config_snapshot = move(artifacts.config_snapshot)
    artifacts.plots = [move(path) for path in artifacts.plots]
    return artifacts


def _run_stages(experiment: ExperimentConfig, digest: str, seeds: Seeds, work_dir: Path,
                corpus: Optional[Corpus], feature_cache: Optional[dict]) -> RunArtifacts:
    with _stage("prepare"):
        corpus = corpus or prepare_corpus(experiment, seeds)
        records = {split: corpus.split_records(split, experiment.target) for split in SPLITS}
        for split, rows in records.items():
            if not rows:
                raise ValueError(f"no labelled {experiment.target} station-days in the {split} split")
        prepared = _Prepared(corpus=corpus, records=records)
        if experiment.features == "I+H":
            prepared.forest = fit_embedding(
                corpus.met_matrix(corpus.split_records("train")),
                ForestSpec(experiment.forest_trees, experiment.forest_depth, seeds.forest),
            )
        if experiment.family != "baseline":
            prepared.norm_stats = corpus.norm_stats()

    backbone = None
    if experiment.family != "baseline":
        with _stage("backbone"):
            backbone = build_backbone(backbone_spec(experiment), seeds.init,
                                      manifest_path=Path(settings.WEIGHTS_MANIFEST))

    with _stage("features"):
        datasets, input_dim, model_kind = _build_datasets(experiment, prepared, backbone, seeds, feature_cache)

    with _stage("train"):
        head = build_head(HeadSpec(input_dim, experiment.hidden_dim, experiment.dropout), seeds.init)
        model = FusedModel(backbone, head) if model_kind == "fused" else head
        train_config = TrainConfig(
            batch_size=experiment.batch_size,
            learning_rate=experiment.learning_rate,
            max_epochs=experiment.max_epochs,
            early_stop_patience=None if experiment.family == "baseline" else experiment.early_stop_patience,
            seed=seeds.shuffle,
        )
        model, history = train_supervised(model, datasets["train"], datasets["val"], train_config)

    with _stage("evaluate"):
        predictions, metrics, intervals, skill = _evaluate(experiment, prepared, model, datasets, seeds)

    with _stage("emit"):
        return _emit(experiment, digest, work_dir, prepared, model, model_kind, history,
                     predictions, metrics, intervals, skill)


def _build_datasets(experiment: ExperimentConfig, prepared: _Prepared, backbone, seeds: Seeds,
                    feature_cache: Optional[dict]):
    corpus = prepared.corpus
    datasets = {}
    if experiment.family == "baseline":
        for split, rows in prepared.records.items():
            met = corpus.met_matrix(rows)
            if experiment.standardize_met:
                met = corpus.met_standardizer.transform(met)
            datasets[split] = TensorDataset(
                torch.as_tensor(met, dtype=torch.float32),
                torch.as_tensor(corpus.target_vector(rows, experiment.target), dtype=torch.float32),
            )
        return datasets, datasets["train"].tensors[0].shape[1], "head"

    side_dim = 0
    frozen = backbone.freeze_policy == "all_frozen"
    # features depend on the weights and on the train-split normalisation
    cache_key = (experiment.family, experiment.image_type, seeds.init, experiment.pretrained_backbone,
                 experiment.scene_manifest, experiment.filter_config, experiment.split_ratios)
    cache = feature_cache.setdefault(cache_key, {}) if (frozen and feature_cache is not None) else {}

    for split, rows in prepared.records.items():
        side = _side_features(experiment, corpus, rows, prepared.forest)
        side_dim = 0 if side is None else side.shape[1]
        targets = corpus.target_vector(rows, experiment.target)
        if frozen:
            pending = [row for row in rows if row.key not in cache]
            if pending:
                scenes = LazyScenes([row.scene for row in pending], prepared.norm_stats)
                for row, vector in zip(pending, extract_features_batch(backbone, scenes)):
                    cache[row.key] = vector
            image = np.vstack([cache[row.key] for row in rows]).astype(np.float32)
            fused = image if side is None else np.hstack([image, side]).astype(np.float32)
            datasets[split] = TensorDataset(torch.as_tensor(fused), torch.as_tensor(targets, dtype=torch.float32))
        else:
            scenes = LazyScenes([row.scene for row in rows], prepared.norm_stats)
            datasets[split] = SampleDataset(targets, scenes=scenes, side=side)
    kind = "head" if frozen else "fused"
    return datasets, 2048 + side_dim, kind


def _evaluate(experiment: ExperimentConfig, prepared: _Prepared, model, datasets, seeds: Seeds):
    frames = []
    metrics = []
    label = f"{experiment.model_label} {experiment.features}"
    for split in SPLITS:
        rows = prepared.records[split]
        estimated = predict_dataset(model, datasets[split])
        observed = prepared.corpus.target_vector(rows, experiment.target)
        metrics.append(compute_metrics(observed, estimated, split=split, target=experiment.target, model=label))
        frames.append(pd.DataFrame({
            "station_id": [row.station_id for row in rows],
            "date": [row.date.isoformat() for row in rows],
            "split": split,
            "observed": observed,
            "estimated": estimated,
        }))
    predictions = pd.concat(frames, ignore_index=True)

    test = predictions[predictions["split"] == "test"]
    groups = test["date"].to_numpy() if experiment.bootstrap_unit == "day" else None
    intervals = []
    for name in ("r2", "rmse", "nmae"):
        try:
            intervals.append(bootstrap_ci(test["observed"], test["estimated"], name,
                                          B=experiment.bootstrap_resamples, seed=seeds.bootstrap, groups=groups))
        except MetricError as exc:
            logger.warning(f"No bootstrap interval for {name}: {exc}")
    try:
        skill, _ = station_mean_skill(test)
    except MetricError as exc:
        logger.warning(f"No station-mean skill: {exc}")
        skill = None
    return predictions, metrics, intervals, skill


def _emit(experiment: ExperimentConfig, digest: str, work_dir: Path, prepared: _Prepared, model, model_kind: str,
          history: TrainHistory, predictions: pd.DataFrame, metrics: list[MetricsReport],
          intervals: list[BootstrapCI], skill: Optional[float]) -> RunArtifacts:
    snapshot = work_dir / "config.json"
    snapshot.write_text(json.dumps({"config_hash": digest, "config": experiment.to_dict()}, indent=2) + "\n",
                        encoding="utf-8")

    metadata: dict[str, Any] = {
        "config_hash": digest,
        "config": experiment.to_dict(),
        "met_standardizer": prepared.corpus.met_standardizer.to_dict(),
        "history": history.to_dict(),
    }
    if prepared.norm_stats is not None:
        metadata["norm_stats"] = prepared.norm_stats.to_dict()
    if prepared.forest is not None:
        prepared.forest.save(work_dir / "met-forest.json")
        metadata["forest_file"] = "met-forest.json"

    # random and transfer backbones are rebuilt from the config; others are stored
    if model_kind == "fused":
        tensors = dict(model.state_dict())
    else:
        tensors = {f"head.{name}": tensor for name, tensor in model.state_dict().items()}
        if experiment.family == "simsiam":
            backbone_state, _ = load_archive(Path(experiment.pretrained_backbone))
            tensors.update({f"backbone.{name}": tensor for name, tensor in backbone_state.items()})
    checkpoint = save_archive(work_dir / "model.safetensors", tensors, metadata)

    def tagged(frame: pd.DataFrame) -> pd.DataFrame:
        return frame.assign(config_hash=digest)

    tagged(pd.DataFrame([report.to_dict() for report in metrics])).to_csv(work_dir / "metrics.csv", index=False)
    tagged(pd.DataFrame([interval.to_dict() for interval in intervals],
                        columns=["metric", "point", "lower", "upper", "resamples", "seed", "unit"])
           ).to_csv(work_dir / "bootstrap.csv", index=False)
    tagged(history.to_frame().assign(best_epoch=history.best_epoch)).to_csv(work_dir / "history.csv", index=False)
    tagged(predictions).to_csv(work_dir / "predictions.csv", index=False)
    (work_dir / "summary.json").write_text(json.dumps({
        "config_hash": digest,
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "station_mean_nmae": skill,
        "corpus": prepared.corpus.summary,
    }, indent=2, default=str) + "\n", encoding="utf-8")

    title = f"{experiment.model_label} {experiment.features} {experiment.target} ({experiment.image_type})"
    series = {
        split: (group["observed"].to_numpy(), group["estimated"].to_numpy())
        for split, group in predictions.groupby("split", sort=False)
    }
    plots = [
        save_figure(build_scatter_figure(series, experiment.target, title), work_dir / "scatter.png", digest),
        save_figure(build_loss_figure(history, title), work_dir / "loss.png", digest),
    ]
    for report in metrics:
        logger.info(f"{experiment.run_name} {report.split}: r2={report.r2:.3f} rmse={report.rmse:.4g} "
                    f"nmae={report.nmae:.3f} n={report.n}")

    return RunArtifacts(
        run_dir=work_dir,
        config=experiment,
        config_hash=digest,
        checkpoint=checkpoint,
        metrics=metrics,
        bootstrap=intervals,
        plots=plots,
        config_snapshot=snapshot,
        history=history,
        station_skill=skill,
    )


def load_run(run_dir: Path) -> RunArtifacts:
    """Artifacts of a finished run, read back from its directory."""
    run_dir = Path(run_dir)
    snapshot = run_dir / "config.json"
    if not snapshot.is_file():
        raise ExperimentError("emit", f"{run_dir} has no config.json")
    document = json.loads(snapshot.read_text(encoding="utf-8"))
    experiment = ExperimentConfig.from_dict(document["config"])
    metrics_frame = pd.read_csv(run_dir / "metrics.csv")
    metrics = [
        MetricsReport(r2=row.r2, rmse=row.rmse, nmae=row.nmae, n=int(row.n), split=row.split,
                      target=row.target, model=row.model)
        for row in metrics_frame.itertuples(index=False)
    ]
    _, metadata = load_archive(run_dir / "model.safetensors")
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.is_file() else {}
    return RunArtifacts(
        run_dir=run_dir,
        config=experiment,
        config_hash=document["config_hash"],
        checkpoint=run_dir / "model.safetensors",
        metrics=metrics,
        bootstrap=_read_bootstrap(run_dir),
        plots=sorted(run_dir.glob("*.png")),
        config_snapshot=snapshot,
        history=TrainHistory(**decode_metadata(metadata, "history")),
        station_skill=summary.get("station_mean_nmae"),
    )


def _read_bootstrap(run_dir: Path) -> list[BootstrapCI]:
    path = Path(run_dir) / "bootstrap.csv"
    if not path.is_file():
        return []
    frame = pd.read_csv(path)
    return [
        BootstrapCI(row.metric, float(row.point), float(row.lower), float(row.upper),
                    int(row.resamples), int(row.seed), row.unit)
        for row in frame.itertuples(index=False)
    ]


def find_runs(out_dir: Path) -> list[Path]:
    return sorted(path.parent for path in Path(out_dir).glob("*/config.json")
                  if not path.parent.name.endswith(".partial"))


# ---------------------------------------------------------------------------
# Matrix and report


@dataclass(frozen=True)
class MatrixConfig:
    """A list of model/feature rows crossed with targets, seeds, and image types.

    External weights are given per family (`external_weights` and
    `weights_formats` map family -> value) so the two externally pre-trained
    families can point at different files.
    """

    base: dict[str, Any]
    rows: tuple[tuple[str, str], ...]
    targets: tuple[str, ...] = TARGETS
    seeds: tuple[int, ...] = (0,)
    image_types: tuple[str, ...] = ("RGB",)
    external_weights: dict[str, str] = field(default_factory=dict)
    weights_formats: dict[str, str] = field(default_factory=dict)
    skip_missing_weights: bool = True

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Optional[Path] = None) -> "MatrixConfig":
        unknown = sorted(set(data) - set(MATRIX_KEYS))
        if unknown:
            raise ExperimentError("config", f"unknown matrix keys: {', '.join(unknown)}")
        if "base" not in data:
            raise ExperimentError("config", "matrix config needs a base section")
        base = dict(data["base"])
        for name in PATH_FIELDS:
            if base.get(name):
                base[name] = str(settings.resolve_data_path(base[name], base_dir))
        rows = data.get("rows", "table2")
        if isinstance(rows, str):
            if rows not in ROW_SETS:
                raise ExperimentError("config", f"unknown row set {rows!r}; known: {sorted(ROW_SETS)}")
            rows = ROW_SETS[rows]
        return cls(
            base=base,
            rows=tuple((str(family), str(features)) for family, features in rows),
            targets=tuple(data.get("targets", TARGETS)),
            seeds=tuple(int(seed) for seed in data.get("seeds", (0,))),
            image_types=tuple(data.get("image_types", ("RGB",))),
            external_weights={
                family: str(settings.resolve_data_path(value, base_dir))
                for family, value in (data.get("external_weights") or {}).items()
            },
            weights_formats=dict(data.get("weights_formats") or {}),
            skip_missing_weights=bool(data.get("skip_missing_weights", True)),
        )

    @classmethod
    def from_file(cls, path: Path) -> "MatrixConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ExperimentError("config", f"Matrix file does not exist: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ExperimentError("config", f"Matrix file is invalid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def experiments(self) -> list[ExperimentConfig]:
        configs = []
        for image_type in self.image_types:
            for seed in self.seeds:
                for family, features in self.rows:
                    weights = self.external_weights.get(family)
                    if family in EXTERNAL_FAMILIES and not weights:
                        if self.skip_missing_weights:
                            logger.warning(f"Skipping {family} {features}: no external weights configured")
                            continue
                        raise ExperimentError("config", f"family {family} has no external weights")
                    for target in self.targets:
                        values = dict(self.base, target=target, family=family, features=features,
                                      image_type=image_type, seed=seed)
                        if weights:
                            values["external_weights"] = weights
                        if family in self.weights_formats:
                            values["weights_format"] = self.weights_formats[family]
                        configs.append(ExperimentConfig.from_dict(values))
        return configs


def run_matrix(matrix: MatrixConfig, out_dir: Optional[Path] = None) -> list[RunArtifacts]:
    """Run every experiment of the matrix in order, sharing corpora, pre-training, and frozen features."""
    out_dir = Path(out_dir or settings.OUT_DIR)
    experiments = matrix.experiments()
    logger.info(f"Matrix: {len(experiments)} runs")
    corpora: dict[tuple, Corpus] = {}
    feature_cache: dict = {}
    runs = []
    for index, experiment in enumerate(experiments, start=1):
        seeds = derive_seeds(experiment.seed)
        corpus_key = (experiment.image_type, experiment.seed, experiment.scene_manifest,
                      experiment.met_table, experiment.aq_table, experiment.filter_config,
                      experiment.split_ratios, experiment.rh_scale)
        if corpus_key not in corpora:
            with _stage("prepare"):
                corpora[corpus_key] = prepare_corpus(experiment, seeds)
        corpus = corpora[corpus_key]
        if experiment.family == "simsiam" and not experiment.pretrained_backbone:
            experiment = ensure_pretrained(experiment, corpus, seeds, out_dir)
        logger.info(f"[{index}/{len(experiments)}] {experiment.run_name}")
        runs.append(run_experiment(experiment, out_dir, corpus=corpus, feature_cache=feature_cache))
    return runs


def long_metrics(runs: Sequence[RunArtifacts]) -> pd.DataFrame:
    rows = []
    for run in runs:
        for report in run.metrics:
            rows.append({
                "model": run.config.model_label,
                "family": run.config.family,
                "features": run.config.features,
                "image_type": run.config.image_type,
                "seed": run.config.seed,
                "target": report.target,
                "split": report.split,
                "r2": report.r2,
                "rmse": report.rmse,
                "nmae": report.nmae,
                "n": report.n,
                "config_hash": run.config_hash,
            })
    return pd.DataFrame(rows)


def _row_order(family: str, features: str) -> int:
    try:
        return TABLE2_ROWS.index((family, features))
    except ValueError:
        return len(TABLE2_ROWS)


def wide_table(long: pd.DataFrame, seed_mean: bool = False) -> pd.DataFrame:
    """Test-split metrics, one row per model/features, column groups per target."""
    test = long[long["split"] == "test"].copy()
    test["seed"] = test["seed"].astype(str)
    if seed_mean and test["seed"].nunique() > 1:
        means = (test.groupby(["model", "family", "features", "image_type", "target"], as_index=False)
                 [list(METRIC_NAMES)].mean())
        test = pd.concat([test, means.assign(seed="seed-mean")], ignore_index=True)

    index = ["model", "family", "features", "image_type", "seed"]
    pivot = test.pivot_table(index=index, columns="target", values=list(METRIC_NAMES), aggfunc="first")
    wide = pd.DataFrame(index=pivot.index)
    columns = []
    for target in REPORT_TARGET_ORDER:
        for metric in METRIC_NAMES:
            name = f"{target}_{metric}"
            wide[name] = pivot[(metric, target)] if (metric, target) in pivot.columns else np.nan
            columns.append(name)
    wide = wide.reset_index()
    wide["_order"] = [_row_order(f, x) for f, x in zip(wide["family"], wide["features"])]
    wide = wide.sort_values(["image_type", "seed", "_order"]).drop(columns=["_order", "family"])
    for name in columns:
        wide[name] = wide[name].map(round_sig)
    return wide.reset_index(drop=True)


@dataclass(frozen=True)
class ReportPaths:
    table: Path
    long: Path
    bootstrap: Optional[Path] = None


def emit_report(runs: Sequence[RunArtifacts], out_dir: Path, seed_mean: bool = False) -> ReportPaths:
    if not runs:
        raise ExperimentError("emit", "report needs at least one run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    long = long_metrics(runs)
    long_out = long.copy()
    for name in METRIC_NAMES:
        long_out[name] = long_out[name].map(round_sig)
    long_path = out_dir / "metrics-long.csv"
    long_out.to_csv(long_path, index=False)
    table_path = out_dir / "results-table.csv"
    wide_table(long, seed_mean=seed_mean).to_csv(table_path, index=False)

    bootstrap_rows = []
    for run in runs:
        for interval in run.bootstrap:
            bootstrap_rows.append({"model": run.config.model_label, "features": run.config.features,
                                   "target": run.config.target, "image_type": run.config.image_type,
                                   "seed": run.config.seed, **interval.to_dict(), "config_hash": run.config_hash})
    bootstrap_path = None
    if bootstrap_rows:
        bootstrap_path = out_dir / "bootstrap-table.csv"
        frame = pd.DataFrame(bootstrap_rows)
        for name in ("point", "lower", "upper"):
            frame[name] = frame[name].map(round_sig)
        frame.to_csv(bootstrap_path, index=False)
    logger.info(f"Report: {len(runs)} runs -> {table_path}")
    return ReportPaths(table=table_path, long=long_path, bootstrap=bootstrap_path)


def write_corpus_report(corpus: Corpus, out_dir: Path) -> dict[str, Path]:
    """Splits, normalisation stats, and station/target correlation tables for `prepare`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = pd.DataFrame(
        [{"date": date.isoformat(), "split": split} for date, split in sorted(corpus.splits.assignment.items())]
    )
    paths = {"splits": out_dir / "splits.csv"}
    splits.to_csv(paths["splits"], index=False)

    paths["norm_stats"] = out_dir / f"norm-stats-{corpus.image_type}.json"
    paths["norm_stats"].write_text(json.dumps({
        "norm_stats": corpus.norm_stats().to_dict(),
        "met_standardizer": corpus.met_standardizer.to_dict(),
        "summary": corpus.summary,
    }, indent=2) + "\n", encoding="utf-8")

    aq = pd.DataFrame([
        {"station_id": record.station_id, "date": record.date.isoformat(),
         **{name: record.target(name) for name in TARGETS}}
        for record in corpus.records
    ])
    aq = aq.astype({name: float for name in TARGETS})
    paths["station_correlations"] = out_dir / "station-correlations.csv"
    pd.concat([station_correlations(aq, name) for name in TARGETS], ignore_index=True).to_csv(
        paths["station_correlations"], index=False)
    paths["target_correlations"] = out_dir / "target-correlations.csv"
    target_correlations(aq).to_csv(paths["target_correlations"], index=False)
    return paths
