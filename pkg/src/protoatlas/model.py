"""Prototype-parts classifier: a convolutional backbone feeding a prototype
layer whose max-pooled similarity scores are the only input to the final
evidence layer.

Per-location similarity is ``log((d + 1) / (d + eps))`` of the squared
euclidean distance d between a latent patch and a prototype, so activation
grows as the patch approaches the prototype and stays positive for finite d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

EPSILON = 1e-4
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BACKBONES = ("vgg19", "resnet18", "tiny")


@dataclass(frozen=True)
class ModelConfig:
    class_names: tuple[str, ...]
    backbone: str = "resnet18"
    prototypes_per_class: int = 10
    prototype_dim: int = 128
    input_size: int = 224
    pretrained: bool = True
    backbone_weights: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.prototypes_per_class < 1 or self.prototype_dim < 1:
            raise ValueError("prototypes_per_class and prototype_dim must be positive")
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "backbone": self.backbone,
            "prototypes_per_class": self.prototypes_per_class,
            "prototype_dim": self.prototype_dim,
            "input_size": self.input_size,
            "pretrained": self.pretrained,
            "backbone_weights": self.backbone_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "class_names": tuple(d["class_names"])})


@dataclass
class FeatureMap:
    """H x W x D grid of latent patch vectors for one image."""

    values: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be HxWxD, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def patches(self) -> np.ndarray:
        """Flattened (H*W, D) view in row-major (row, col) order."""
        h, w, d = self.values.shape
        return self.values.reshape(h * w, d)


@dataclass(frozen=True)
class ProtoSource:
    image_id: str
    row: int
    col: int
    distance: float

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "row": self.row, "col": self.col,
                "distance": self.distance}

    @classmethod
    def from_dict(cls, d: dict) -> "ProtoSource":
        return cls(d["image_id"], d["row"], d["col"], d["distance"])


@dataclass
class Prototype:
    vector: np.ndarray
    class_id: int
    prototype_id: int
    source: ProtoSource | None = None


@dataclass
class SimilarityResult:
    map: np.ndarray
    score: float


def similarity_from_distance(d):
    """Monotone-decreasing activation of squared distance; positive for finite d."""
    if isinstance(d, torch.Tensor):
        return torch.log(d + 1.0) - torch.log(d + EPSILON)
    d = np.asarray(d, dtype=np.float64)
    return np.log(d + 1.0) - np.log(d + EPSILON)


def _tiny_backbone() -> tuple[nn.Module, int, int]:
    def block(cin, cout):
        return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                             nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    net = nn.Sequential(block(3, 32), block(32, 64), block(64, 64), block(64, 64))
    return net, 64, 16


def _torchvision_backbone(name: str, pretrained: bool, weights_file: str | None):
    from torchvision import models

    if name == "vgg19":
        weights = models.VGG19_Weights.IMAGENET1K_V1 if pretrained and not weights_file else None
        full = models.vgg19(weights=weights)
        if weights_file:
            full.load_state_dict(torch.load(weights_file, map_location="cpu"))
        return full.features, 512, 32
    if name == "resnet18":
        weights = models.ResNet18_Weights.IMAGENET1K_V1 if pretrained and not weights_file else None
        full = models.resnet18(weights=weights)
        if weights_file:
            full.load_state_dict(torch.load(weights_file, map_location="cpu"))
        trunk = nn.Sequential(full.conv1, full.bn1, full.relu, full.maxpool,
                              full.layer1, full.layer2, full.layer3, full.layer4)
        return trunk, 512, 32
    raise ValueError(name)


class ProtoPartsModel(nn.Module):
    """Backbone -> two 1x1 adaptation convs (ReLU, then sigmoid) -> prototype
    similarity scores -> evidence layer. Logits depend on the image only
    through the per-prototype similarity scores."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny":
            self.backbone, channels, self.stride = _tiny_backbone()
        else:
            self.backbone, channels, self.stride = _torchvision_backbone(
                config.backbone, config.pretrained, config.backbone_weights)

        d = config.prototype_dim
        self.add_on = nn.Sequential(
            nn.Conv2d(channels, d, kernel_size=1), nn.ReLU(inplace=True),
            nn.Conv2d(d, d, kernel_size=1), nn.Sigmoid())
        self.prototypes = nn.Parameter(torch.rand(config.num_prototypes, d))
        self.register_buffer(
            "proto_classes",
            torch.repeat_interleave(torch.arange(config.num_classes),
                                    config.prototypes_per_class))
        self.fc = nn.Linear(config.num_prototypes, config.num_classes, bias=False)
        self.reset_fc()
        # prototype_id -> ProtoSource once projection has run
        self.prototype_sources: dict[int, ProtoSource] = {}

    def reset_fc(self) -> None:
        """+1 on in-class entries, -0.5 elsewhere."""
        with torch.no_grad():
            onehot = F.one_hot(self.proto_classes,
                               self.config.num_classes).T.float()
            self.fc.weight.copy_(onehot + (onehot - 1.0) * 0.5)

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.config.class_names

    def conv_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.add_on(self.backbone(x))

    def distances_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        """Per-location squared euclidean distance to every prototype.

        feats: (B, D, H, W) -> (B, P, H, W).
        """
        p = self.prototypes
        z2 = (feats ** 2).sum(dim=1, keepdim=True)              # (B,1,H,W)
        zp = F.conv2d(feats, p.view(p.shape[0], p.shape[1], 1, 1))
        p2 = (p ** 2).sum(dim=1).view(1, -1, 1, 1)
        return torch.clamp(z2 - 2.0 * zp + p2, min=0.0)

    def scores_from_distances(self, distances: torch.Tensor) -> torch.Tensor:
        return similarity_from_distance(distances).amax(dim=(2, 3))

    def forward(self, x: torch.Tensor):
        """Returns (logits (B,C), similarity scores (B,P), distances (B,P,H,W))."""
        feats = self.conv_features(x)
        distances = self.distances_from_features(feats)
        scores = self.scores_from_distances(distances)
        return self.fc(scores), scores, distances

    def prototype_info(self, prototype_id: int) -> Prototype:
        return Prototype(
            vector=self.prototypes.detach()[prototype_id].cpu().numpy().copy(),
            class_id=int(self.proto_classes[prototype_id]),
            prototype_id=prototype_id,
            source=self.prototype_sources.get(prototype_id))


def to_input_tensor(image, input_size: int | None = None) -> torch.Tensor:
    """PIL image or HxWx3 uint8/float array -> normalized (3,H,W) tensor."""
    if isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.max() > 1.5:
            arr = arr / 255.0
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {arr.shape}")
    if input_size is not None and arr.shape[:2] != (input_size, input_size):
        raise ValueError(
            f"expected {input_size}x{input_size} input, got {arr.shape[0]}x{arr.shape[1]}")
    mean = np.array(IMAGENET_MEAN, dtype=np.float32)
    std = np.array(IMAGENET_STD, dtype=np.float32)
    return torch.from_numpy(((arr - mean) / std).transpose(2, 0, 1).copy())


def extract_features(image, model: ProtoPartsModel, image_id: str = "") -> FeatureMap:
    """Run backbone + adaptation layers on one image (inference mode)."""
    x = to_input_tensor(image, model.config.input_size).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.conv_features(x)[0]
    finally:
        model.train(was_training)
    return FeatureMap(feats.permute(1, 2, 0).numpy(), image_id=image_id)


def similarity(fm: FeatureMap, prototype) -> SimilarityResult:
    """Similarity map and max score of one prototype over a feature map."""
    vector = prototype.vector if isinstance(prototype, Prototype) else np.asarray(prototype)
    if fm.values.shape[2] != vector.shape[0]:
        raise ValueError(
            f"dimension mismatch: feature map D={fm.values.shape[2]}, prototype D={vector.shape[0]}")
    d = ((fm.values.astype(np.float64) - vector.astype(np.float64)) ** 2).sum(axis=2)
    sim = similarity_from_distance(d)
    return SimilarityResult(map=sim, score=float(sim.max()))


def forward(image, model: ProtoPartsModel) -> tuple[np.ndarray, np.ndarray]:
    """(logits C-vector, similarity scores per prototype) for one image."""
    x = to_input_tensor(image, model.config.input_size).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, scores, _ = model(x)
    finally:
        model.train(was_training)
    return logits[0].numpy(), scores[0].numpy()


FeaturePool = Sequence[tuple[FeatureMap, int]]


def _class_patch_table(pool: FeaturePool, class_id: int):
    """Patches of class-``class_id`` maps in lexical (image_id, row, col) order."""
    maps = sorted((fm for fm, label in pool if label == class_id),
                  key=lambda fm: fm.image_id)
    if not maps:
        return None, None
    keys = []
    blocks = []
    for fm in maps:
        h, w, _ = fm.values.shape
        blocks.append(fm.patches())
        keys.extend((fm.image_id, r, c) for r in range(h) for c in range(w))
    return np.concatenate(blocks, axis=0).astype(np.float64), keys


def nearest_patches(model: ProtoPartsModel, pool: FeaturePool,
                    require_all_classes: bool = True) -> dict[int, ProtoSource | None]:
    """Nearest same-class pool patch for every prototype.

    Ties on distance resolve to the lexically smallest (image_id, row, col);
    argmin over the lexically ordered patch table realizes that directly.
    """
    protos = model.prototypes.detach().cpu().numpy().astype(np.float64)
    result: dict[int, ProtoSource | None] = {}
    for class_id in range(model.config.num_classes):
        patches, keys = _class_patch_table(pool, class_id)
        proto_ids = (model.proto_classes == class_id).nonzero(as_tuple=True)[0].tolist()
        if patches is None:
            if require_all_classes:
                raise ValueError(f"no pool images for class {class_id}")
            result.update({j: None for j in proto_ids})
            continue
        for j in proto_ids:
            d2 = ((patches - protos[j]) ** 2).sum(axis=1)
            idx = int(np.argmin(d2))
            image_id, row, col = keys[idx]
            result[j] = ProtoSource(image_id=image_id, row=row, col=col,
                                    distance=float(math.sqrt(d2[idx])))
    return result


def project_prototypes(model: ProtoPartsModel, pool: FeaturePool) -> dict[int, ProtoSource]:
    """Replace each prototype with its nearest same-class training patch and
    record where it came from. Mutates the model."""
    sources = nearest_patches(model, pool, require_all_classes=True)
    maps = {fm.image_id: fm for fm, _ in pool}
    with torch.no_grad():
        for j, src in sources.items():
            patch = maps[src.image_id].values[src.row, src.col]
            model.prototypes[j] = torch.from_numpy(patch.copy())
    model.prototype_sources = dict(sources)
    return dict(sources)


def visualize_test_prototypes(model: ProtoPartsModel, pool: FeaturePool) -> dict[int, ProtoSource | None]:
    """Nearest patches over a held-out pool; reporting only, no mutation.
    Classes absent from the pool come back as None (unmatched)."""
    return nearest_patches(model, pool, require_all_classes=False)
