#!/usr/bin/env python3
"""SimSiam self-supervised pre-training of the backbone.

Two views of each scene come from square random crops (20-100% of the
area) resized to 96x96 and flipped horizontally half the time; pixel values
are resampled, never recoloured. The projector and predictor exist only
during pre-training; the trained backbone is returned alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset

from backbone import FEATURE_DIM, Backbone, scene_tensor, set_freeze_policy
from config import config
from records import ScenePatch


logger = logging.getLogger(__name__)

COLLAPSE_FLOOR = 0.01
COLLAPSE_GRACE_EPOCHS = 10


class ContrastiveError(ValueError):
    """Raised when pre-training inputs or loss arguments are degenerate."""


@dataclass(frozen=True)
class SimSiamSpec:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    view_size: int = 96
    hflip_p: float = 0.5
    base_lr: float = 0.005
    epochs: int = 100
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    projector_dim: int = 2048
    predictor_hidden: int = 512
    corpus: str = "train"

    def __post_init__(self) -> None:
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ContrastiveError(f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}")
        if self.corpus not in ("train", "all"):
            raise ContrastiveError(f"corpus must be train or all, got {self.corpus!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ContrastiveError("epochs must be >= 1 and batch_size >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(epoch: int, base_lr: float = 0.005, epochs: int = 100) -> float:
    return base_lr * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    side: int
    flipped: bool


def sample_crop(height: int, width: int, rng: np.random.Generator,
                crop_scale: tuple[float, float] = (0.2, 1.0), hflip_p: float = 0.5) -> CropBox:
    """Square crop whose area fraction is drawn uniformly from crop_scale."""
    fraction = rng.uniform(crop_scale[0], crop_scale[1])
    side = min(max(int(math.ceil(math.sqrt(fraction * height * width))), 1), height, width)
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return CropBox(top=top, left=left, side=side, flipped=bool(rng.random() < hflip_p))


def augment_view(scene: Union[ScenePatch, torch.Tensor], rng: np.random.Generator,
                 spec: SimSiamSpec = SimSiamSpec()) -> torch.Tensor:
    """One C x view_size x view_size view; every channel gets the same crop and flip."""
    image = scene_tensor(scene) if isinstance(scene, ScenePatch) else scene
    _, height, width = image.shape
    box = sample_crop(height, width, rng, spec.crop_scale, spec.hflip_p)
    crop = image[:, box.top:box.top + box.side, box.left:box.left + box.side]
    view = F.interpolate(crop.unsqueeze(0), size=(spec.view_size, spec.view_size),
                         mode="bilinear", align_corners=False, antialias=True).squeeze(0)
    return torch.flip(view, dims=[2]) if box.flipped else view


class ViewPairs(Dataset):
    """Two views per scene; each (epoch, index) has its own RNG stream."""

    def __init__(self, scenes: Sequence[ScenePatch], spec: SimSiamSpec, seed: int):
        self.scenes = scenes
        self.spec = spec
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int):
        rng = np.random.default_rng([self.seed, self.epoch, index])
        image = scene_tensor(self.scenes[index])
        return augment_view(image, rng, self.spec), augment_view(image, rng, self.spec)


def build_projector(in_dim: int = FEATURE_DIM, dim: int = 2048) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, dim, bias=False),
        nn.BatchNorm1d(dim),
        nn.ReLU(inplace=True),
        nn.Linear(dim, dim, bias=False),
        nn.BatchNorm1d(dim),
        nn.ReLU(inplace=True),
        nn.Linear(dim, dim),
        nn.BatchNorm1d(dim, affine=False),
    )


def build_predictor(dim: int = 2048, hidden: int = 512) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


class SimSiamNetwork(nn.Module):
    def __init__(self, encoder: nn.Module, projector: nn.Module, predictor: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def forward(self, x1: torch.Tensor, x2: torch.Tensor):
        z1 = self.projector(self.encoder(x1))
        z2 = self.projector(self.encoder(x2))
        return self.predictor(z1), self.predictor(z2), z1, z2


def simsiam_loss(p1: torch.Tensor, z1: torch.Tensor, p2: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """-(cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2, averaged over the batch."""
    if not (p1.shape == z1.shape == p2.shape == z2.shape):
        raise ContrastiveError(
            f"loss inputs must share a shape, got {tuple(p1.shape)}, {tuple(z1.shape)}, "
            f"{tuple(p2.shape)}, {tuple(z2.shape)}"
        )
    for name, tensor in (("p1", p1), ("z1", z1), ("p2", p2), ("z2", z2)):
        if bool((torch.linalg.vector_norm(tensor.detach(), dim=-1) == 0).any()):
            raise ContrastiveError(f"{name} contains a zero-norm vector")
    first = F.cosine_similarity(p1, z2.detach(), dim=-1).mean()
    second = F.cosine_similarity(p2, z1.detach(), dim=-1).mean()
    return -0.5 * (first + second)


def representation_spread(z: torch.Tensor) -> float:
    """Mean per-dimension std of L2-normalised outputs; near 0 means collapse."""
    return float(F.normalize(z.detach(), dim=1).std(dim=0).mean())


@dataclass
class SimSiamHistory:
    loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    spread: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def train_simsiam(backbone: Backbone, scenes: Sequence[ScenePatch], spec: SimSiamSpec, seed: int,
                  device: Optional[str] = None) -> tuple[Backbone, SimSiamHistory]:
    """Pre-train all backbone layers; projector and predictor are discarded afterwards."""
    if len(scenes) < 2:
        raise ContrastiveError(f"SimSiam needs at least 2 scenes, got {len(scenes)}")

    dev = torch.device(device or config.DEVICE)
    set_freeze_policy(backbone, "all_trainable")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = SimSiamNetwork(
            backbone,
            build_projector(FEATURE_DIM, spec.projector_dim),
            build_predictor(spec.projector_dim, spec.predictor_hidden),
        )
    network.to(dev)

    optimizer = torch.optim.SGD(network.parameters(), lr=spec.base_lr,
                                momentum=spec.momentum, weight_decay=spec.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda epoch: cosine_lr(epoch, spec.base_lr, spec.epochs) / spec.base_lr
    )
    pairs = ViewPairs(scenes, spec, seed)
    loader = DataLoader(pairs, batch_size=spec.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(seed),
                        num_workers=config.NUM_WORKERS)
    history = SimSiamHistory()

    logger.info(f"SimSiam pre-training on {len(scenes)} scenes for {spec.epochs} epochs")
    for epoch in range(spec.epochs):
        pairs.epoch = epoch
        network.train()
        losses, spreads = [], []
        for x1, x2 in loader:
            # batch norm needs two samples
            if x1.shape[0] < 2:
                continue
            p1, p2, z1, z2 = network(x1.to(dev), x2.to(dev))
            loss = simsiam_loss(p1, z1, p2, z2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            spreads.append(representation_spread(z1))
        history.learning_rate.append(optimizer.param_groups[0]["lr"])
        scheduler.step()
        history.loss.append(float(np.mean(losses)) if losses else float("nan"))
        history.spread.append(float(np.mean(spreads)) if spreads else float("nan"))
        logger.info(f"SimSiam epoch {epoch + 1}/{spec.epochs}: loss={history.loss[-1]:.4f} "
                    f"spread={history.spread[-1]:.4f}")
        if epoch + 1 > COLLAPSE_GRACE_EPOCHS and history.spread[-1] < COLLAPSE_FLOOR:
            logger.warning(f"Representation spread {history.spread[-1]:.4g} below {COLLAPSE_FLOOR}: "
                           "possible collapse")

    trained = network.encoder
    del network
    return trained, history
