"""Independent brute-force oracles used by the loss and metric tests.

Everything here is deliberately written as plain python loops over patches
and prototypes, separate from the vectorized implementations under test.
"""

import numpy as np
import torch


def sq_dist(z, p):
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return float(((z - p) ** 2).sum())


def oracle_clst(maps, labels, protos, proto_classes):
    per_image = []
    for values, y in zip(maps, labels):
        patches = np.asarray(values, dtype=np.float64).reshape(-1, protos.shape[1])
        in_ids = [j for j, c in enumerate(proto_classes) if c == y]
        per_image.append(min(sq_dist(z, protos[j]) for j in in_ids for z in patches))
    return float(np.mean(per_image))


def oracle_sep(maps, labels, protos, proto_classes):
    per_image = []
    for values, y in zip(maps, labels):
        patches = np.asarray(values, dtype=np.float64).reshape(-1, protos.shape[1])
        out_ids = [j for j, c in enumerate(proto_classes) if c != y]
        per_image.append(min(sq_dist(z, protos[j]) for j in out_ids for z in patches))
    return -float(np.mean(per_image))


def oracle_div(maps, labels, protos, proto_classes, margin):
    per_image = []
    for values, y in zip(maps, labels):
        patches = np.asarray(values, dtype=np.float64).reshape(-1, protos.shape[1])
        in_ids = [j for j, c in enumerate(proto_classes) if c == y]
        hinges = [min(max(sq_dist(z, protos[j]) - margin, 0.0) for z in patches)
                  for j in in_ids]
        per_image.append(float(np.mean(hinges)))
    return -float(np.mean(per_image))


def torch_distances(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """(B,D,H,W) x (P,D) -> (B,P,H,W) squared distances, differentiable."""
    z2 = (features ** 2).sum(dim=1, keepdim=True)
    zp = torch.einsum("bdhw,pd->bphw", features, prototypes)
    p2 = (prototypes ** 2).sum(dim=1).view(1, -1, 1, 1)
    return torch.clamp(z2 - 2.0 * zp + p2, min=0.0)


def central_difference_grad(fn, prototypes: np.ndarray, step: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(prototypes, dtype=np.float64)
    it = np.nditer(prototypes, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = prototypes.copy()
        minus = prototypes.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2.0 * step)
        it.iternext()
    return grad


def random_instance(rng, num_classes=2, protos_per_class=2, d=4, hw=(2, 2), batch=3):
    maps = rng.normal(size=(batch, hw[0], hw[1], d))
    labels = rng.integers(0, num_classes, size=batch)
    # ensure both classes appear so sep is defined
    labels[0] = 0
    if num_classes > 1:
        labels[-1] = 1
    protos = rng.normal(size=(num_classes * protos_per_class, d))
    proto_classes = np.repeat(np.arange(num_classes), protos_per_class)
    return maps, labels, protos, proto_classes
