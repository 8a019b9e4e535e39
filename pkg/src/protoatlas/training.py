"""Training loop: per-epoch gradient updates over the augmented train split,
prototype projection every few epochs, and model selection on validation
accuracy.

Main training optimizes backbone, adaptation layers, and prototypes; the
evidence layer keeps its +1/-0.5 init and is only touched by
``last_layer_tune``. The backbone is frozen for the first few epochs so the
pretrained features are not disturbed while prototypes settle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import save_checkpoint
from .dataset import (VARIANT_SEP, DatasetIndex, ImageEntry, Split,
                      load_sample_image, recipe_for_instrument, variant_tags)
from .losses import LossBreakdown, LossWeights, total_loss
from .model import (FeatureMap, ModelConfig, ProtoPartsModel, project_prototypes,
                    to_input_tensor)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr_phase1: float = 1e-4
    epochs_phase1: int = 100
    lr_phase2: float = 1e-5
    epochs_phase2: int = 100
    batch_size: int = 80
    projection_period: int = 5
    optimizer: str = "adam"
    seed: int = 0
    warmup_epochs: int = 5
    last_layer_iterations: int = 20
    fc_l1_weight: float = 0.0
    cache_images: bool = True
    track_projection_train_acc: bool = False

    def __post_init__(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0 or self.batch_size < 1:
            raise ValueError("learning rates and batch size must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.projection_period < 1:
            raise ValueError("projection_period must be positive")
        if self.optimizer.lower() != "adam":
            raise ValueError("only the adam optimizer is supported")
        total = self.epochs_phase1 + self.epochs_phase2
        if total > 0 and total % self.projection_period != 0:
            raise ValueError("projection_period must divide the total epoch count")

    @property
    def total_epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class TrainState:
    epoch: int
    model: ProtoPartsModel
    best_val_acc: float | None
    best_checkpoint: Path | None
    loss_history: list[LossBreakdown] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    projection_events: list[dict] = field(default_factory=list)


class ImageBank:
    """Resolves (image_id[, variant tag]) to a normalized input tensor.

    Variant sample ids look like ``imageid::rot90``; the bank re-derives the
    variant from the base image so augmented pool sources stay loadable.
    """

    def __init__(self, index: DatasetIndex, input_size: int, cache: bool = True):
        self.index = index
        self.input_size = input_size
        self.cache: dict[str, torch.Tensor] | None = {} if cache else None

    def sample_id(self, entry: ImageEntry, tag: str) -> str:
        return entry.image_id if tag == "orig" else f"{entry.image_id}{VARIANT_SEP}{tag}"

    def tensor(self, sample_id: str) -> torch.Tensor:
        if self.cache is not None and sample_id in self.cache:
            return self.cache[sample_id]
        t = to_input_tensor(load_sample_image(self.index, sample_id, self.input_size),
                            self.input_size)
        if self.cache is not None:
            self.cache[sample_id] = t
        return t


def augmented_samples(index: DatasetIndex, split: Split = Split.TRAIN
                      ) -> list[tuple[ImageEntry, str]]:
    samples = []
    for entry in index.split_entries(split):
        for tag in variant_tags(recipe_for_instrument(entry.instrument)):
            samples.append((entry, tag))
    return samples


def _batches(n: int, batch_size: int, perm=None):
    order = perm if perm is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate_accuracy(model: ProtoPartsModel, samples: list[tuple[ImageEntry, str]],
                      bank: ImageBank, batch_size: int = 64) -> float:
    if not samples:
        raise ValueError("no samples to evaluate")
    model.eval()
    correct = 0
    with torch.no_grad():
        for idx in _batches(len(samples), batch_size):
            x = torch.stack([bank.tensor(bank.sample_id(*samples[i])) for i in idx])
            y = torch.tensor([samples[i][0].label for i in idx])
            logits, _, _ = model(x)
            correct += int((logits.argmax(dim=1) == y).sum())
    return correct / len(samples)


def build_feature_pool(model: ProtoPartsModel, samples: list[tuple[ImageEntry, str]],
                       bank: ImageBank, batch_size: int = 64):
    """(FeatureMap, label) pairs for projection, in eval mode."""
    model.eval()
    pool = []
    with torch.no_grad():
        for idx in _batches(len(samples), batch_size):
            x = torch.stack([bank.tensor(bank.sample_id(*samples[i])) for i in idx])
            feats = model.conv_features(x)
            for row, i in enumerate(idx):
                entry, tag = samples[i]
                fm = FeatureMap(feats[row].permute(1, 2, 0).numpy(),
                                image_id=bank.sample_id(entry, tag))
                pool.append((fm, entry.label))
    return pool


def train(index: DatasetIndex, model_config: ModelConfig, config: TrainConfig,
          weights: LossWeights | None = None, out_dir: str | Path | None = None,
          log=None) -> TrainState:
    """Run the two-phase schedule; deterministic given config.seed."""
    weights = weights or LossWeights()
    train_entries = index.split_entries(Split.TRAIN)
    val_entries = index.split_entries(Split.VAL)
    if not train_entries or not val_entries:
        raise ValueError("dataset needs nonempty TRAIN and VAL splits")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = ProtoPartsModel(model_config)
    bank = ImageBank(index, model_config.input_size, cache=config.cache_images)
    train_samples = augmented_samples(index, Split.TRAIN)
    val_samples = [(e, "orig") for e in val_entries]

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_path / "metrics.jsonl", "w")

    state = TrainState(epoch=0, model=model, best_val_acc=None, best_checkpoint=None)
    if config.total_epochs == 0:
        if metrics_fh:
            metrics_fh.close()
        return state

    opt = torch.optim.Adam([
        {"params": model.backbone.parameters(), "name": "backbone"},
        {"params": model.add_on.parameters(), "name": "add_on"},
        {"params": [model.prototypes], "name": "prototypes"},
    ], lr=config.lr_phase1)

    try:
        for epoch in range(1, config.total_epochs + 1):
            lr = config.lr_phase1 if epoch <= config.epochs_phase1 else config.lr_phase2
            for group in opt.param_groups:
                group["lr"] = lr
            freeze_backbone = epoch <= min(config.warmup_epochs, config.epochs_phase1)
            for p in model.backbone.parameters():
                p.requires_grad_(not freeze_backbone)

            model.train()
            perm = rng.permutation(len(train_samples))
            sums = {"total": 0.0, "crsent": 0.0, "clst": 0.0, "sep": 0.0, "div": 0.0}
            for idx in _batches(len(train_samples), config.batch_size, perm):
                x = torch.stack([bank.tensor(bank.sample_id(*train_samples[i])) for i in idx])
                y = torch.tensor([train_samples[i][0].label for i in idx])
                logits, _, distances = model(x)
                loss, breakdown = total_loss(logits, distances, y,
                                             model.proto_classes, weights)
                if not math.isfinite(breakdown.total):
                    raise TrainingDiverged(epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                for key, value in breakdown.to_dict().items():
                    sums[key] += value * len(idx)
            epoch_breakdown = LossBreakdown(
                **{k: v / len(train_samples) for k, v in sums.items()})

            val_acc = evaluate_accuracy(model, val_samples, bank, config.batch_size)
            projected = epoch % config.projection_period == 0
            record = {"epoch": epoch, **epoch_breakdown.to_dict(),
                      "lr": lr, "val_acc": val_acc, "projected": projected}
            if projected:
                pool = build_feature_pool(model, train_samples, bank, config.batch_size)
                project_prototypes(model, pool)
                val_after = evaluate_accuracy(model, val_samples, bank, config.batch_size)
                state.projection_events.append(
                    {"epoch": epoch, "val_acc_before": val_acc, "val_acc_after": val_after})
                record["val_acc_post_projection"] = val_after
                val_acc = val_after

            state.epoch = epoch
            state.loss_history.append(epoch_breakdown)
            state.val_history.append(val_acc)
            if state.best_val_acc is None or val_acc > state.best_val_acc:
                state.best_val_acc = val_acc
                if out_path is not None:
                    state.best_checkpoint = out_path / "best.pt"
                    save_checkpoint(state.best_checkpoint, model,
                                    train_config=config.to_dict(),
                                    extra={"epoch": epoch, "val_acc": val_acc})
            if out_path is not None:
                save_checkpoint(out_path / "last.pt", model,
                                train_config=config.to_dict(),
                                extra={"epoch": epoch, "val_acc": val_acc})
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if log:
                log(record)
    finally:
        if metrics_fh:
            metrics_fh.close()

    if out_path is not None:
        save_checkpoint(out_path / "final.pt", model, train_config=config.to_dict(),
                        extra={"epoch": state.epoch})
    return state


def last_layer_tune(state: TrainState, index: DatasetIndex, config: TrainConfig
                    ) -> TrainState:
    """Convex tuning of the evidence layer on frozen features; every other
    parameter (prototypes included) is untouched."""
    model = state.model
    if not model.prototype_sources:
        raise ValueError("last-layer tuning requires projection to have run")
    if config.last_layer_iterations == 0:
        return state

    bank = ImageBank(index, model.config.input_size, cache=config.cache_images)
    samples = augmented_samples(index, Split.TRAIN)
    model.eval()
    score_rows, labels = [], []
    with torch.no_grad():
        for idx in _batches(len(samples), config.batch_size):
            x = torch.stack([bank.tensor(bank.sample_id(*samples[i])) for i in idx])
            _, scores, _ = model(x)
            score_rows.append(scores)
            labels.extend(samples[i][0].label for i in idx)
    scores = torch.cat(score_rows).double()
    y = torch.tensor(labels)
    off_class = (model.proto_classes.view(1, -1)
                 != torch.arange(model.config.num_classes).view(-1, 1)).double()

    weight = model.fc.weight.detach().double().clone().requires_grad_(True)
    opt = torch.optim.LBFGS([weight], lr=0.1, max_iter=config.last_layer_iterations,
                            line_search_fn="strong_wolfe")

    def objective():
        loss = torch.nn.functional.cross_entropy(scores @ weight.T, y)
        if config.fc_l1_weight > 0:
            loss = loss + config.fc_l1_weight * (weight * off_class).abs().sum()
        return loss

    def closure():
        opt.zero_grad()
        loss = objective()
        loss.backward()
        return loss

    before = float(objective())
    opt.step(closure)
    after = float(objective())
    if after <= before:
        with torch.no_grad():
            model.fc.weight.copy_(weight.detach().float())
    return state
