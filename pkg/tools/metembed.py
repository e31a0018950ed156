#!/usr/bin/env python3
"""Unsupervised extremely-randomized-forest embedding of daily meteorology.

A forest of shallow extra-trees learns to tell observed met rows from
synthetic rows whose columns were resampled independently. Each met
vector is then encoded by the leaf it reaches in every tree: a sparse
binary vector with exactly one 1 per tree.

The fitted trees are exported into plain arrays, so routing, JSON
serialisation, and reloading do not depend on scikit-learn internals.
Routing sends x to the left child when x < threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np
from sklearn.ensemble import ExtraTreesClassifier

from records import MET_VARIABLES, MetVector


logger = logging.getLogger(__name__)

LEAF = -1
SCHEMA_VERSION = 1


class EmbeddingError(ValueError):
    """Raised when a forest cannot be fitted, applied, or loaded."""


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 256
    max_depth: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1:
            raise EmbeddingError(f"n_trees and max_depth must be >= 1, got {self.n_trees}, {self.max_depth}")

    @property
    def max_dim(self) -> int:
        return self.n_trees * 2 ** self.max_depth


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left == LEAF)

    def route(self, matrix: np.ndarray) -> np.ndarray:
        """Leaf node id reached by each row."""
        nodes = np.zeros(matrix.shape[0], dtype=np.int64)
        active = self.left[nodes] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            goes_left = matrix[rows, self.feature[current]] < self.threshold[current]
            nodes[rows] = np.where(goes_left, self.left[current], self.right[current])
            active = self.left[nodes] != LEAF
        return nodes


class MetForest:
    def __init__(self, trees: list[Tree], spec: ForestSpec, n_features: int = len(MET_VARIABLES)):
        if not trees:
            raise EmbeddingError("a forest needs at least one tree")
        self.trees = trees
        self.spec = spec
        self.n_features = n_features
        self.leaf_index: list[dict[int, int]] = []
        offset = 0
        for tree in trees:
            leaves = tree.leaves
            self.leaf_index.append({int(node): offset + position for position, node in enumerate(leaves)})
            offset += len(leaves)
        self.dim = offset

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variables": list(MET_VARIABLES),
            "n_features": self.n_features,
            "dim": self.dim,
            "spec": asdict(self.spec),
            "trees": [
                {
                    "feature": tree.feature.tolist(),
                    "threshold": tree.threshold.tolist(),
                    "left": tree.left.tolist(),
                    "right": tree.right.tolist(),
                    "leaf_index": {str(node): index for node, index in leaf_map.items()},
                }
                for tree, leaf_map in zip(self.trees, self.leaf_index)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetForest":
        try:
            if data["schema_version"] != SCHEMA_VERSION:
                raise EmbeddingError(f"unsupported forest schema {data['schema_version']}")
            trees = [
                Tree(
                    feature=np.asarray(tree["feature"], dtype=np.int64),
                    threshold=np.asarray(tree["threshold"], dtype=np.float64),
                    left=np.asarray(tree["left"], dtype=np.int64),
                    right=np.asarray(tree["right"], dtype=np.int64),
                )
                for tree in data["trees"]
            ]
            forest = cls(trees, ForestSpec(**data["spec"]), int(data["n_features"]))
        except (KeyError, TypeError) as exc:
            raise EmbeddingError(f"forest document is malformed: {exc}") from exc
        if forest.dim != data.get("dim", forest.dim):
            raise EmbeddingError(f"forest document declares dim {data['dim']}, trees give {forest.dim}")
        return forest

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "MetForest":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise EmbeddingError(f"Forest file does not exist: {path}") from exc
        except json.JSONDecodeError as exc:
            raise EmbeddingError(f"Forest file is invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def synthetic_contrast(met_matrix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rows with each column resampled on its own, which breaks cross-variable dependence."""
    n = met_matrix.shape[0]
    return np.column_stack([rng.choice(met_matrix[:, j], size=n, replace=True) for j in range(met_matrix.shape[1])])


def _export_tree(estimator) -> Tree:
    tree = estimator.tree_
    left = tree.children_left.astype(np.int64)
    right = tree.children_right.astype(np.int64)
    feature = np.where(left == LEAF, 0, tree.feature).astype(np.int64)
    threshold = np.where(left == LEAF, 0.0, tree.threshold).astype(np.float64)
    return Tree(feature=feature, threshold=threshold, left=left, right=right)


def fit_embedding(met_matrix: np.ndarray, spec: ForestSpec = ForestSpec()) -> MetForest:
    """Fit extra-trees on observed vs synthetic rows (equal counts)."""
    observed = np.asarray(met_matrix, dtype=np.float64)
    if observed.ndim != 2 or observed.shape[1] != len(MET_VARIABLES):
        raise EmbeddingError(f"met matrix must be N x {len(MET_VARIABLES)}, got {observed.shape}")
    if observed.shape[0] < 2:
        raise EmbeddingError(f"need at least 2 met rows, got {observed.shape[0]}")
    if not np.isfinite(observed).all():
        raise EmbeddingError("met matrix has non-finite values")

    rng = np.random.default_rng(spec.seed)
    synthetic = synthetic_contrast(observed, rng)
    features = np.vstack([observed, synthetic])
    labels = np.concatenate([np.ones(len(observed)), np.zeros(len(synthetic))])

    classifier = ExtraTreesClassifier(
        n_estimators=spec.n_trees,
        max_depth=spec.max_depth,
        max_features=1,
        min_samples_split=2,
        bootstrap=False,
        random_state=spec.seed,
        n_jobs=1,
    )
    classifier.fit(features, labels)
    forest = MetForest([_export_tree(estimator) for estimator in classifier.estimators_], spec)
    logger.info(f"Fitted met forest: {spec.n_trees} trees, embedding dim {forest.dim} (max {spec.max_dim})")
    return forest


def _as_matrix(met: Union[MetVector, np.ndarray], n_features: int) -> tuple[np.ndarray, bool]:
    values = met.as_array() if isinstance(met, MetVector) else np.asarray(met, dtype=np.float64)
    single = values.ndim == 1
    matrix = values.reshape(1, -1) if single else values
    if matrix.ndim != 2 or matrix.shape[1] != n_features:
        raise EmbeddingError(f"met input must have {n_features} components, got shape {values.shape}")
    return matrix, single


def embed(forest: MetForest, met: Union[MetVector, np.ndarray]) -> np.ndarray:
    """Leaf encoding of one met vector (1-D result) or of each row of a matrix."""
    matrix, single = _as_matrix(met, forest.n_features)
    encoding = np.zeros((matrix.shape[0], forest.dim), dtype=np.float32)
    rows = np.arange(matrix.shape[0])
    for tree, leaf_map in zip(forest.trees, forest.leaf_index):
        nodes = tree.route(matrix)
        encoding[rows, [leaf_map[int(node)] for node in nodes]] = 1.0
    return encoding[0] if single else encoding
