#!/usr/bin/env python3
"""Named-tensor weight archives with a checksum sidecar.

Archives are safetensors files: a JSON header (name -> dtype, shape, byte
offsets) followed by raw tensor bytes. Every archive written here gets a
`<file>.sha256` sidecar; loading verifies it when present. String metadata
(config snapshots, normalisation stats) rides in the header.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from config import DEFAULT_WEIGHTS_MANIFEST


logger = logging.getLogger(__name__)

CHUNK_SIZE = 1 << 20


class WeightsArchiveError(ValueError):
    """Raised when a weight archive or its name manifest cannot be used."""


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".sha256")


def save_archive(path: Path, tensors: Mapping[str, torch.Tensor],
                 metadata: Optional[Mapping[str, Any]] = None) -> Path:
    """Write tensors atomically, then the sha256 sidecar. Non-string metadata is JSON-encoded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        key: value if isinstance(value, str) else json.dumps(value, sort_keys=True)
        for key, value in (metadata or {}).items()
    }
    # safetensors refuses shared or strided storage
    payload = {name: tensor.detach().cpu().contiguous().clone() for name, tensor in tensors.items()}
    temp_path = path.with_name(path.name + ".tmp")
    save_file(payload, str(temp_path), metadata=header)
    temp_path.replace(path)
    sidecar_path(path).write_text(f"{sha256_of(path)}  {path.name}\n", encoding="utf-8")
    logger.info(f"Saved {len(payload)} tensors to {path}")
    return path


def verify_checksum(path: Path, required: bool = False) -> bool:
    path = Path(path)
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        if required:
            raise WeightsArchiveError(f"Checksum sidecar missing for {path}")
        logger.warning(f"No checksum sidecar for {path}; skipping verification")
        return False
    expected = sidecar.read_text(encoding="utf-8").split()[0].strip().lower()
    actual = sha256_of(path)
    if actual != expected:
        raise WeightsArchiveError(f"Checksum mismatch for {path}: expected {expected}, got {actual}")
    return True


def load_archive(path: Path, require_checksum: bool = False) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    """All tensors and header metadata of an archive; nothing is returned on any failure."""
    path = Path(path)
    if not path.is_file():
        raise WeightsArchiveError(f"Weight archive does not exist: {path}")
    verify_checksum(path, required=require_checksum)
    try:
        with safe_open(str(path), framework="pt", device="cpu") as handle:
            metadata = dict(handle.metadata() or {})
            tensors = {name: handle.get_tensor(name) for name in handle.keys()}
    except (SafetensorError, OSError, RuntimeError) as exc:
        raise WeightsArchiveError(f"Cannot read weight archive {path}: {exc}") from exc
    return tensors, metadata


def decode_metadata(metadata: Mapping[str, str], key: str) -> Any:
    if key not in metadata:
        raise WeightsArchiveError(f"Archive metadata has no {key!r} entry")
    try:
        return json.loads(metadata[key])
    except json.JSONDecodeError as exc:
        raise WeightsArchiveError(f"Archive metadata {key!r} is not JSON: {exc}") from exc


@dataclass(frozen=True)
class NameRules:
    """How one external checkpoint family names its tensors."""

    strip_prefixes: tuple[str, ...] = ()
    drop_prefixes: tuple[str, ...] = ()
    prefix_map: dict[str, str] = field(default_factory=dict)

    def apply(self, name: str) -> Optional[str]:
        """Backbone name for an external tensor name, or None when the tensor is not part of the backbone."""
        if any(name.startswith(prefix) for prefix in self.drop_prefixes):
            return None
        for prefix in self.strip_prefixes:
            if name.startswith(prefix):
                name = name[len(prefix):]
                break
        if any(name.startswith(prefix) for prefix in self.drop_prefixes):
            return None
        # longest prefix wins so "4." never shadows "4.0."
        for prefix in sorted(self.prefix_map, key=len, reverse=True):
            if name.startswith(prefix):
                return self.prefix_map[prefix] + name[len(prefix):]
        return name


def load_name_manifest(path: Path = DEFAULT_WEIGHTS_MANIFEST) -> dict[str, NameRules]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise WeightsArchiveError(f"Weights manifest does not exist: {path}") from exc
    except json.JSONDecodeError as exc:
        raise WeightsArchiveError(f"Weights manifest is invalid JSON: {exc}") from exc

    missing = sorted({"schema_version", "formats"} - set(document))
    if missing:
        raise WeightsArchiveError(f"Weights manifest is missing keys: {', '.join(missing)}")
    formats = {}
    for name, rules in document["formats"].items():
        unknown = sorted(set(rules) - {"strip_prefixes", "drop_prefixes", "prefix_map", "description"})
        if unknown:
            raise WeightsArchiveError(f"Weights manifest format {name} has unknown keys: {', '.join(unknown)}")
        formats[name] = NameRules(
            strip_prefixes=tuple(rules.get("strip_prefixes", ())),
            drop_prefixes=tuple(rules.get("drop_prefixes", ())),
            prefix_map=dict(rules.get("prefix_map", {})),
        )
    return formats


def rename_tensors(tensors: Mapping[str, torch.Tensor], rules: NameRules) -> dict[str, torch.Tensor]:
    renamed: dict[str, torch.Tensor] = {}
    for name, tensor in tensors.items():
        target = rules.apply(name)
        if target is None:
            continue
        if target in renamed:
            raise WeightsArchiveError(f"Tensors {name!r} and another both map to {target!r}")
        renamed[target] = tensor
    return renamed


def convert_checkpoint(source: Path, destination: Path, format_name: str,
                       manifest_path: Path = DEFAULT_WEIGHTS_MANIFEST) -> Path:
    """Turn a torch checkpoint from another codebase into a backbone archive."""
    formats = load_name_manifest(manifest_path)
    if format_name not in formats:
        raise WeightsArchiveError(f"Unknown weights format {format_name!r}; known: {sorted(formats)}")
    try:
        checkpoint = torch.load(str(source), map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise WeightsArchiveError(f"Checkpoint does not exist: {source}") from exc
    except (RuntimeError, EOFError, OSError) as exc:
        raise WeightsArchiveError(f"Cannot read checkpoint {source}: {exc}") from exc

    state = checkpoint.get("state_dict", checkpoint) if isinstance(checkpoint, dict) else None
    if not isinstance(state, dict):
        raise WeightsArchiveError(f"Checkpoint {source} holds no state dict")
    tensors = rename_tensors({k: v for k, v in state.items() if isinstance(v, torch.Tensor)}, formats[format_name])
    if not tensors:
        raise WeightsArchiveError(f"No backbone tensors left in {source} after applying {format_name}")
    return save_archive(destination, tensors, {"source": Path(source).name, "format": format_name})
