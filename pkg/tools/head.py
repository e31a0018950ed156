#!/usr/bin/env python3
"""The MLP regression head and the supervised training loop.

Every model family ends in the same head: two ReLU/dropout hidden layers
and a scalar output. train_supervised fits either a head on cached
features or a backbone+head model on images, with seeded shuffling,
early stopping on validation loss, and best-epoch weight restoration.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from config import config


logger = logging.getLogger(__name__)

HIDDEN_DIM = 512
DROPOUT = 0.2
MET_DIM = 6
IMAGE_DIM = 2048

ArrayLike = Union[np.ndarray, torch.Tensor]


class HeadError(ValueError):
    """Raised when a head is built or applied with inconsistent dimensions."""


class TrainingError(HeadError):
    """Raised when supervised training cannot run on the given data."""


@dataclass(frozen=True)
class HeadSpec:
    input_dim: int
    hidden_dim: int = HIDDEN_DIM
    dropout: float = DROPOUT

    def __post_init__(self) -> None:
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise HeadError(f"head dimensions must be positive, got {self.input_dim} and {self.hidden_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise HeadError(f"dropout must lie in [0, 1), got {self.dropout}")


class Head(nn.Module):
    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.Sequential(
            nn.Linear(spec.input_dim, spec.hidden_dim),
            nn.ReLU(),
            nn.Dropout(spec.dropout),
            nn.Linear(spec.hidden_dim, spec.hidden_dim),
            nn.ReLU(),
            nn.Dropout(spec.dropout),
            nn.Linear(spec.hidden_dim, 1),
        )

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.input_dim:
            raise HeadError(f"head expects {self.spec.input_dim} features, got {x.shape[-1]}")
        return self.layers(x).squeeze(-1)


def build_head(spec: HeadSpec, seed: int) -> Head:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Head(spec)


def fuse_features(image_feats: Optional[ArrayLike] = None, met: Optional[ArrayLike] = None,
                  met_embedding: Optional[ArrayLike] = None) -> ArrayLike:
    """Concatenate along the last axis in the order [image | met-or-embedding]."""
    if met is not None and met_embedding is not None:
        raise HeadError("met and met_embedding are mutually exclusive")
    parts = [part for part in (image_feats, met if met is not None else met_embedding) if part is not None]
    if not parts:
        raise HeadError("fuse_features needs at least one input")
    if any(isinstance(part, torch.Tensor) for part in parts):
        return torch.cat([torch.as_tensor(part, dtype=torch.float32) for part in parts], dim=-1)
    return np.concatenate([np.asarray(part, dtype=np.float32) for part in parts], axis=-1)


def predict(head: nn.Module, features: ArrayLike) -> Union[float, np.ndarray]:
    """Evaluation-mode output: a float for one vector, an array for a matrix."""
    x = torch.as_tensor(np.asarray(features, dtype=np.float32))
    single = x.ndim == 1
    if single:
        x = x.unsqueeze(0)
    if isinstance(head, Head) and x.shape[-1] != head.input_dim:
        raise HeadError(f"head expects {head.input_dim} features, got {x.shape[-1]}")
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            output = head(x.to(next(head.parameters()).device)).cpu().numpy()
    finally:
        head.train(was_training)
    return float(output[0]) if single else output


class FusedModel(nn.Module):
    """Backbone features fused with side features (met or leaf encoding), then the head."""

    def __init__(self, backbone: nn.Module, head: Head):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, image: torch.Tensor, side: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.head(fuse_features(self.backbone(image), side))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 5e-4
    max_epochs: int = 150
    early_stop_patience: Optional[int] = 25
    drop_last: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise TrainingError("early_stop_patience must be >= 1 or None")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": range(1, len(self.train_loss) + 1),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
        })

    def to_dict(self) -> dict:
        return asdict(self)


def _device(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def _step_inputs(batch: Sequence[torch.Tensor], device: torch.device):
    *inputs, target = batch
    return [tensor.to(device) for tensor in inputs], target.to(device)


def evaluate_loss(model: nn.Module, dataset: Dataset, batch_size: int = 64) -> float:
    """Mean squared error over the whole dataset in evaluation mode."""
    device = _device(model)
    was_training = model.training
    model.eval()
    total = 0.0
    count = 0
    try:
        with torch.no_grad():
            for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
                inputs, target = _step_inputs(batch, device)
                error = model(*inputs).double() - target.double()
                total += float(torch.sum(error * error))
                count += target.shape[0]
    finally:
        model.train(was_training)
    return total / count


def predict_dataset(model: nn.Module, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    device = _device(model)
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with torch.no_grad():
            for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
                inputs, _ = _step_inputs(batch, device)
                outputs.append(model(*inputs).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(outputs).astype(np.float64) if outputs else np.zeros(0)


def train_supervised(model: nn.Module, train: Dataset, val: Dataset,
                     train_config: TrainConfig, device: Optional[str] = None) -> tuple[nn.Module, TrainHistory]:
    """Adam on MSE with seeded shuffling; restores the weights of the lowest validation loss.

    With early_stop_patience=None every epoch runs. Otherwise training stops
    once `patience` epochs pass without a strictly lower validation loss.
    """
    if len(val) == 0:
        raise TrainingError("validation set is empty")
    if train_config.drop_last and len(train) < train_config.batch_size:
        raise TrainingError(
            f"train set has {len(train)} samples, fewer than one batch of {train_config.batch_size}"
        )
    if len(train) == 0:
        raise TrainingError("train set is empty")

    model.to(torch.device(device or config.DEVICE))
    trainable = [parameter for parameter in model.parameters() if parameter.requires_grad]
    if not trainable:
        raise TrainingError("model has no trainable parameters")
    optimizer = torch.optim.Adam(trainable, lr=train_config.learning_rate)
    loss_fn = nn.MSELoss()
    generator = torch.Generator().manual_seed(train_config.seed)
    loader = DataLoader(train, batch_size=train_config.batch_size, shuffle=True,
                        drop_last=train_config.drop_last, generator=generator,
                        num_workers=config.NUM_WORKERS)
    patience = train_config.early_stop_patience
    history = TrainHistory()
    best_loss = float("inf")
    best_state = None
    dev = _device(model)

    with torch.random.fork_rng(devices=[]):
        # dropout masks come from the global generator
        torch.manual_seed(train_config.seed)
        for epoch in range(1, train_config.max_epochs + 1):
            model.train()
            batch_losses = []
            for batch in loader:
                inputs, target = _step_inputs(batch, dev)
                optimizer.zero_grad()
                loss = loss_fn(model(*inputs), target)
                loss.backward()
                optimizer.step()
                batch_losses.append(float(loss.detach()))
            history.train_loss.append(float(np.mean(batch_losses)))
            val_loss = evaluate_loss(model, val)
            history.val_loss.append(val_loss)
            history.stopped_epoch = epoch

            if val_loss < best_loss:
                best_loss = val_loss
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            elif patience is not None and epoch - history.best_epoch >= patience:
                logger.info(f"Early stop at epoch {epoch}; best epoch {history.best_epoch}")
                break
            logger.debug(f"epoch {epoch}: train={history.train_loss[-1]:.5g} val={val_loss:.5g}")

    if best_state is not None:
        model.load_state_dict(best_state)
    logger.info(
        f"Trained {history.stopped_epoch} epochs; best val loss {best_loss:.5g} at epoch {history.best_epoch}"
    )
    return model, history
