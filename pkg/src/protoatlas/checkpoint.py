"""Versioned checkpoint archive: backbone id, parameter tensors, prototype
source metadata, class names, the config used, and an optional calibrator.
Loading rejects format-version mismatches."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .calibration import Calibrator
from .model import ModelConfig, ProtoPartsModel, ProtoSource

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, model: ProtoPartsModel,
                    calibrator: Calibrator | None = None,
                    train_config: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "backbone": model.config.backbone,
        "model_config": model.config.to_dict(),
        "class_names": list(model.config.class_names),
        "state_dict": model.state_dict(),
        "prototype_sources": {str(j): s.to_dict()
                              for j, s in model.prototype_sources.items()},
        "calibrator": calibrator.to_dict() if calibrator is not None else None,
        "train_config": train_config,
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[ProtoPartsModel, dict]:
    """Returns (model, meta) where meta carries the calibrator, train config,
    extras, and the content fingerprint used as model_version."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})")
    config = ModelConfig.from_dict({**payload["model_config"], "pretrained": False})
    model = ProtoPartsModel(config)
    model.load_state_dict(payload["state_dict"])
    model.prototype_sources = {int(j): ProtoSource.from_dict(d)
                               for j, d in payload["prototype_sources"].items()}
    model.eval()
    cal = payload.get("calibrator")
    meta = {
        "calibrator": Calibrator.from_dict(cal) if cal is not None else None,
        "train_config": payload.get("train_config"),
        "extra": payload.get("extra", {}),
        "model_version": checkpoint_fingerprint(path),
    }
    return model, meta


def checkpoint_fingerprint(path: str | Path) -> str:
    """Short content hash identifying the model version."""
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return digest[:12]
