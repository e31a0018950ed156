#!/usr/bin/env python3
"""ResNet50 feature extractor with pluggable weights and freeze policies.

The backbone is torchvision's ResNet50 with the classifier replaced by an
identity, so a forward pass returns the 2048-d global-average-pooled
feature. Tensor names match torchvision's (conv1.weight, layer4.2.bn3.bias,
...), which is also the naming used by every archive this project writes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torchvision.models import ResNet50_Weights
from torchvision.models.resnet import Bottleneck, ResNet

from config import DEFAULT_WEIGHTS_MANIFEST, config
from records import ScenePatch
from weights_archive import WeightsArchiveError, load_archive, load_name_manifest, rename_tensors


logger = logging.getLogger(__name__)

FEATURE_DIM = 2048
INIT_MODES = ("random", "imagenet", "simsiam_local", "external_file")
FREEZE_POLICIES = ("all_frozen", "tune_block4_avgpool", "all_trainable")

# Named stages of the network and the torchvision modules that make them up
STAGES = {
    "Conv1": ("conv1", "bn1"),
    "Block1": ("layer1",),
    "Block2": ("layer2",),
    "Block3": ("layer3",),
    "Block4": ("layer4",),
    "Avgpool": ("avgpool",),
}
TRAINABLE_STAGES = {
    "all_frozen": (),
    "tune_block4_avgpool": ("Block4", "Avgpool"),
    "all_trainable": tuple(STAGES),
}


class BackboneError(ValueError):
    """Raised when a backbone cannot be built, loaded, adapted, or applied."""


@dataclass(frozen=True)
class BackboneSpec:
    init_mode: str = "random"
    in_channels: int = 3
    freeze_policy: str = "all_frozen"
    external_weights_path: Optional[str] = None
    weights_format: str = "backbone"

    def __post_init__(self) -> None:
        if self.init_mode not in INIT_MODES:
            raise BackboneError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.in_channels not in (3, 4):
            raise BackboneError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise BackboneError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {self.freeze_policy!r}")
        if self.init_mode in ("external_file", "simsiam_local") and not self.external_weights_path:
            raise BackboneError(f"{self.init_mode} mode requires a weights path")


class Backbone(ResNet):
    """ResNet50 without its classifier; batch-norm modes follow the freeze policy."""

    def __init__(self, in_channels: int = 3):
        super().__init__(Bottleneck, [3, 4, 6, 3])
        self.fc = nn.Identity()
        if in_channels != 3:
            self.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(self.conv1.weight, mode="fan_out", nonlinearity="relu")
        self.freeze_policy = "all_trainable"

    @property
    def in_channels(self) -> int:
        return self.conv1.in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise BackboneError(f"backbone expects N x {self.in_channels} x H x W input, got {tuple(x.shape)}")
        return super().forward(x)

    def train(self, mode: bool = True) -> "Backbone":
        # the root keeps the requested mode so callers can restore it
        super().train(mode)
        if self.freeze_policy in ("all_frozen", "tune_block4_avgpool"):
            for child in self.children():
                child.train(False)
            if mode and self.freeze_policy == "tune_block4_avgpool":
                self.layer4.train(True)
        return self


def stage_of(parameter_name: str) -> str:
    module = parameter_name.split(".", 1)[0]
    for stage, modules in STAGES.items():
        if module in modules:
            return stage
    raise BackboneError(f"parameter {parameter_name!r} belongs to no backbone stage")


def set_freeze_policy(backbone: Backbone, policy: str) -> Backbone:
    if policy not in FREEZE_POLICIES:
        raise BackboneError(f"freeze_policy must be one of {FREEZE_POLICIES}, got {policy!r}")
    trainable = TRAINABLE_STAGES[policy]
    for name, parameter in backbone.named_parameters():
        parameter.requires_grad_(stage_of(name) in trainable)
    backbone.freeze_policy = policy
    backbone.train(backbone.training)
    return backbone


def trainable_parameter_names(backbone: Backbone) -> list[str]:
    return [name for name, parameter in backbone.named_parameters() if parameter.requires_grad]


def _seeded_backbone(in_channels: int, seed: int) -> Backbone:
    # fork_rng keeps the caller's global RNG untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(in_channels=in_channels)


def adapt_input_channels(backbone: Backbone, new_in: int = 4, seed: int = 0) -> Backbone:
    """Grow conv1 from 3 to new_in input channels, keeping the existing slices bit-identical.

    Added slices are drawn like the random init: normal with std sqrt(2 / fan_out).
    """
    old = backbone.conv1
    if old.in_channels != 3:
        raise BackboneError(f"backbone already has {old.in_channels} input channels")
    if new_in <= 3:
        raise BackboneError(f"new_in must exceed 3, got {new_in}")

    out_channels, _, kh, kw = old.weight.shape
    generator = torch.Generator().manual_seed(seed)
    std = math.sqrt(2.0 / (out_channels * kh * kw))
    added = torch.randn((out_channels, new_in - 3, kh, kw), generator=generator) * std

    conv = nn.Conv2d(new_in, out_channels, kernel_size=old.kernel_size, stride=old.stride,
                     padding=old.padding, bias=False)
    with torch.no_grad():
        conv.weight.copy_(torch.cat([old.weight.detach().cpu(), added.to(old.weight.dtype)], dim=1))
    conv.to(old.weight.device)
    backbone.conv1 = conv
    set_freeze_policy(backbone, backbone.freeze_policy)
    logger.info(f"Adapted conv1 to {new_in} input channels")
    return backbone


def _load_named_tensors(backbone: Backbone, tensors: Mapping[str, torch.Tensor], source: str) -> None:
    expected = backbone.state_dict()
    unexpected = sorted(set(tensors) - set(expected))
    if unexpected:
        raise BackboneError(f"{source}: unexpected tensor {unexpected[0]!r} ({len(unexpected)} unexpected)")
    state = {}
    for name, reference in expected.items():
        if name not in tensors:
            if name.endswith("num_batches_tracked"):
                state[name] = reference
                continue
            raise BackboneError(f"{source}: missing tensor {name!r}")
        tensor = tensors[name]
        if tuple(tensor.shape) != tuple(reference.shape):
            raise BackboneError(
                f"{source}: tensor {name!r} has shape {tuple(tensor.shape)}, expected {tuple(reference.shape)}"
            )
        state[name] = tensor.to(reference.dtype)
    backbone.load_state_dict(state, strict=True)


def imagenet_state_dict(local_path: Optional[str] = None) -> dict[str, torch.Tensor]:
    """ImageNet-1K ResNet50 weights without the classifier.

    A local archive (safetensors or torch) replaces the checksum-pinned download.
    """
    if local_path:
        path = Path(local_path)
        try:
            if path.suffix == ".safetensors":
                state, _ = load_archive(path)
            else:
                state = torch.load(str(path), map_location="cpu", weights_only=True)
        except (WeightsArchiveError, OSError, RuntimeError) as exc:
            raise BackboneError(f"Cannot read ImageNet weights {path}: {exc}") from exc
    else:
        try:
            state = ResNet50_Weights.IMAGENET1K_V1.get_state_dict(progress=False, check_hash=True)
        except (OSError, RuntimeError) as exc:
            raise BackboneError(f"Cannot fetch ImageNet weights: {exc}") from exc
    return {name: tensor for name, tensor in state.items() if not name.startswith("fc.")}


def _archive_tensors(spec: BackboneSpec, manifest_path: Path) -> dict[str, torch.Tensor]:
    try:
        tensors, _ = load_archive(Path(spec.external_weights_path))
        rules = load_name_manifest(manifest_path)
    except WeightsArchiveError as exc:
        raise BackboneError(str(exc)) from exc
    if spec.weights_format not in rules:
        raise BackboneError(f"unknown weights format {spec.weights_format!r}; known: {sorted(rules)}")
    try:
        return rename_tensors(tensors, rules[spec.weights_format])
    except WeightsArchiveError as exc:
        raise BackboneError(str(exc)) from exc


def build_backbone(spec: BackboneSpec, seed: int, imagenet_weights: Optional[str] = None,
                   manifest_path: Path = DEFAULT_WEIGHTS_MANIFEST) -> Backbone:
    """A backbone initialised per spec. Loading happens into a fresh model, so a failure leaves nothing half-built."""
    if spec.init_mode == "random":
        backbone = _seeded_backbone(spec.in_channels, seed)
    else:
        if spec.init_mode == "imagenet":
            tensors = imagenet_state_dict(imagenet_weights or config.IMAGENET_WEIGHTS)
            source = "ImageNet weights"
        else:
            tensors = _archive_tensors(spec, manifest_path)
            source = str(spec.external_weights_path)
        if "conv1.weight" not in tensors:
            raise BackboneError(f"{source}: missing tensor 'conv1.weight'")
        stored_channels = int(tensors["conv1.weight"].shape[1])
        if stored_channels not in (3, spec.in_channels):
            raise BackboneError(
                f"{source}: tensor 'conv1.weight' has {stored_channels} input channels, "
                f"backbone needs {spec.in_channels}"
            )
        backbone = _seeded_backbone(stored_channels, seed)
        _load_named_tensors(backbone, tensors, source)
        if stored_channels != spec.in_channels:
            adapt_input_channels(backbone, spec.in_channels, seed)
    set_freeze_policy(backbone, spec.freeze_policy)
    logger.info(
        f"Built backbone: init={spec.init_mode}, channels={spec.in_channels}, "
        f"policy={spec.freeze_policy}, trainable tensors={len(trainable_parameter_names(backbone))}"
    )
    return backbone


def backbone_tensors(backbone: Backbone) -> dict[str, torch.Tensor]:
    return {name: tensor.detach().cpu() for name, tensor in backbone.state_dict().items()}


def scene_tensor(scene: ScenePatch) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(scene.bands, 2, 0), dtype=np.float32))


def _check_scene(backbone: Backbone, scene: ScenePatch) -> None:
    if scene.channels != backbone.in_channels:
        raise BackboneError(
            f"scene {scene.station_id} {scene.date} has {scene.channels} channels, "
            f"backbone expects {backbone.in_channels}"
        )
    if not scene.normalized:
        raise BackboneError(f"scene {scene.station_id} {scene.date} is not normalised")


def extract_features(backbone: Backbone, scene: ScenePatch) -> np.ndarray:
    return extract_features_batch(backbone, [scene])[0]


def extract_features_batch(backbone: Backbone, scenes: Sequence[ScenePatch],
                           batch_size: Optional[int] = None, device: Optional[str] = None) -> np.ndarray:
    """N x 2048 features in evaluation mode; the backbone's previous mode is restored."""
    batch_size = batch_size or config.FEATURE_BATCH_SIZE
    device = torch.device(device or config.DEVICE)

    was_training = backbone.training
    backbone.eval()
    backbone.to(device)
    outputs = []
    try:
        with torch.no_grad():
            for start in range(0, len(scenes), batch_size):
                batch = scenes[start:start + batch_size]
                for scene in batch:
                    _check_scene(backbone, scene)
                tensor = torch.stack([scene_tensor(scene) for scene in batch])
                outputs.append(backbone(tensor.to(device)).cpu().numpy())
    finally:
        backbone.train(was_training)
    if not outputs:
        return np.zeros((0, FEATURE_DIM), dtype=np.float32)
    features = np.concatenate(outputs, axis=0)
    if not np.isfinite(features).all():
        raise BackboneError("backbone produced non-finite features")
    return features
