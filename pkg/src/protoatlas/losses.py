"""Training objective: cross-entropy plus three distance-based costs over the
patch-prototype grid.

cluster cost   pulls some patch of each image toward an in-class prototype
separation     pushes all patches away from out-of-class prototypes (negated min)
diversity      hinged nearest-patch distance per in-class prototype, minimized
               over patches, averaged over in-class prototypes, negated

All three consume the (B, P, H, W) squared-distance tensor, so each is
differentiable with respect to prototypes, adaptation weights, and the
backbone. Signs: clst >= 0, sep <= 0, div <= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

_INF = float("inf")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.8
    lambda2: float = 0.08
    lambda3: float = 0.04
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class LossBreakdown:
    total: float
    crsent: float
    clst: float
    sep: float
    div: float

    def to_dict(self) -> dict:
        return {"total": self.total, "crsent": self.crsent, "clst": self.clst,
                "sep": self.sep, "div": self.div}


def _check_batch(distances: torch.Tensor, labels: torch.Tensor,
                 proto_classes: torch.Tensor) -> None:
    if distances.ndim != 4:
        raise ValueError(f"distances must be (B,P,H,W), got {tuple(distances.shape)}")
    if labels.numel() == 0:
        raise ValueError("empty batch")


def _in_class_mask(labels: torch.Tensor, proto_classes: torch.Tensor) -> torch.Tensor:
    return labels.view(-1, 1) == proto_classes.view(1, -1)  # (B, P)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of softmax(logits) at the labels."""
    if labels.numel() == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return F.cross_entropy(logits, labels)


def cluster_cost(distances: torch.Tensor, labels: torch.Tensor,
                 proto_classes: torch.Tensor) -> torch.Tensor:
    """Mean over images of min over (in-class prototype, patch) distance."""
    _check_batch(distances, labels, proto_classes)
    mask = _in_class_mask(labels, proto_classes)
    if not mask.any(dim=1).all():
        raise ValueError("an image has no in-class prototypes")
    per_proto = distances.amin(dim=(2, 3))                      # (B, P)
    return per_proto.masked_fill(~mask, _INF).amin(dim=1).mean()


def separation_cost(distances: torch.Tensor, labels: torch.Tensor,
                    proto_classes: torch.Tensor) -> torch.Tensor:
    """Negative mean of the min out-of-class (prototype, patch) distance, so
    minimizing the total pushes that distance up."""
    _check_batch(distances, labels, proto_classes)
    mask = _in_class_mask(labels, proto_classes)
    if not (~mask).any(dim=1).all():
        raise ValueError("an image has no out-of-class prototypes")
    per_proto = distances.amin(dim=(2, 3))
    return -per_proto.masked_fill(mask, _INF).amin(dim=1).mean()


def diversity_cost(distances: torch.Tensor, labels: torch.Tensor,
                   proto_classes: torch.Tensor, margin: float) -> torch.Tensor:
    """Literal hinge form: per image, per in-class prototype, take the min over
    patches of max(d - margin, 0); average over in-class prototypes, then
    negate the batch mean. Zero whenever every in-class prototype sits within
    the margin of some patch of every in-class image."""
    _check_batch(distances, labels, proto_classes)
    if margin < 0:
        raise ValueError("margin must be >= 0")
    mask = _in_class_mask(labels, proto_classes)
    if not mask.any(dim=1).all():
        raise ValueError("an image has no in-class prototypes")
    hinged = torch.clamp(distances - margin, min=0.0).amin(dim=(2, 3))  # (B, P)
    per_image = (hinged * mask).sum(dim=1) / mask.sum(dim=1)
    return -per_image.mean()


def total_loss(logits: torch.Tensor, distances: torch.Tensor, labels: torch.Tensor,
               proto_classes: torch.Tensor, weights: LossWeights
               ) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the four terms; returns the differentiable scalar and a
    float breakdown satisfying total = crsent + l1*clst + l2*sep + l3*div."""
    crsent = cross_entropy(logits, labels)
    clst = cluster_cost(distances, labels, proto_classes)
    sep = separation_cost(distances, labels, proto_classes)
    div = diversity_cost(distances, labels, proto_classes, weights.margin)
    loss = (crsent + weights.lambda1 * clst + weights.lambda2 * sep
            + weights.lambda3 * div)
    breakdown = LossBreakdown(
        total=float(loss.detach()), crsent=float(crsent.detach()),
        clst=float(clst.detach()), sep=float(sep.detach()), div=float(div.detach()))
    return loss, breakdown
