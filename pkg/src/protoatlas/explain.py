"""Evidence panels: top-k prototype matches with upsampled similarity
heatmaps, bounding boxes at 95% of each map's maximum, source-prototype
crops, similarity scores, and evidence-layer weights.

Boxes are inclusive pixel rectangles (row0, col0, row1, col1) on the
upsampled map; thresholding uses the raw activation scale, normalization
happens only when rendering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.patches import Rectangle

from .calibration import Calibrator, apply_calibrator
from .model import ProtoPartsModel, similarity_from_distance, to_input_tensor

BBox = tuple[int, int, int, int]


@dataclass
class EvidenceItem:
    prototype_id: int
    prototype_class: int
    similarity_score: float
    fc_weight_to_predicted: float
    test_bbox: BBox
    heatmap: np.ndarray
    source_image_id: str
    source_bbox: BBox | None = None

    @property
    def negative_evidence(self) -> bool:
        return self.fc_weight_to_predicted < 0


@dataclass
class Explanation:
    image_id: str
    predicted_class: int
    predicted_class_name: str
    confidence: float
    k: int
    items: list[EvidenceItem] = field(default_factory=list)


def upsample_bilinear(map2d: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.asarray(map2d, dtype=np.float32))[None, None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def bbox_above_fraction(map2d: np.ndarray, fraction: float = 0.95) -> BBox:
    """Minimal rectangle containing every pixel >= fraction * max.

    Falls back to the argmax pixel if the threshold excludes everything
    (possible only for all-negative synthetic maps)."""
    map2d = np.asarray(map2d)
    mask = map2d >= fraction * map2d.max()
    if not mask.any():
        r, c = np.unravel_index(int(map2d.argmax()), map2d.shape)
        return (int(r), int(c), int(r), int(c))
    rows, cols = np.nonzero(mask)
    return (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def crop(image: np.ndarray, bbox: BBox) -> np.ndarray:
    r0, c0, r1, c1 = bbox
    return image[r0:r1 + 1, c0:c1 + 1]


def normalize_map(map2d: np.ndarray) -> np.ndarray:
    """[0, 1] rescale for rendering only."""
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi - lo < 1e-12:
        return np.zeros_like(map2d)
    return (map2d - lo) / (hi - lo)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a colormapped, normalized heatmap over an RGB float image.
    alpha = 0 reproduces the image exactly."""
    cmap = plt.get_cmap("jet")
    colored = cmap(normalize_map(heatmap))[..., :3].astype(np.float64)
    return (1.0 - alpha) * np.asarray(image, dtype=np.float64) + alpha * colored


def _image_to_float(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.max() > 1.5:
        arr = arr / 255.0
    return arr


def explain(image, model: ProtoPartsModel, k: int = 4,
            calibrator: Calibrator | None = None,
            image_loader: Callable[[str], "np.ndarray"] | None = None,
            image_id: str = "", threshold_fraction: float = 0.95) -> Explanation:
    """Top-k evidence for one image, ordered by similarity score descending
    (prototype_id breaks ties). Requires projected prototypes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not model.prototype_sources:
        raise ValueError("prototypes have no sources; run projection first")
    size = model.config.input_size
    x = to_input_tensor(image, size).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            sim_maps = similarity_from_distance(
                model.distances_from_features(model.conv_features(x)))[0].numpy()
            scores = sim_maps.max(axis=(1, 2))
            logits = model.fc(torch.from_numpy(scores).float()[None])[0].numpy()

            probs = apply_calibrator(calibrator or Calibrator(kind="none"), logits[None])[0]
            predicted = int(probs.argmax())
            confidence = float(probs.max())

            order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
            fc_weight = model.fc.weight.detach().numpy()
            source_maps: dict[str, np.ndarray] = {}

            items = []
            for j in order[:min(k, len(scores))]:
                up = upsample_bilinear(sim_maps[j], size)
                source = model.prototype_sources[j]
                source_bbox = None
                if image_loader is not None:
                    if source.image_id not in source_maps:
                        src_x = to_input_tensor(image_loader(source.image_id), size).unsqueeze(0)
                        source_maps[source.image_id] = similarity_from_distance(
                            model.distances_from_features(model.conv_features(src_x)))[0].numpy()
                    src_up = upsample_bilinear(source_maps[source.image_id][j], size)
                    source_bbox = bbox_above_fraction(src_up, threshold_fraction)
                items.append(EvidenceItem(
                    prototype_id=j, prototype_class=int(model.proto_classes[j]),
                    similarity_score=float(scores[j]),
                    fc_weight_to_predicted=float(fc_weight[predicted, j]),
                    test_bbox=bbox_above_fraction(up, threshold_fraction),
                    heatmap=up, source_image_id=source.image_id,
                    source_bbox=source_bbox))
    finally:
        model.train(was_training)

    return Explanation(image_id=image_id, predicted_class=predicted,
                       predicted_class_name=model.config.class_names[predicted],
                       confidence=confidence, k=k, items=items)


def explanation_to_dict(exp: Explanation, warning: str | None = None) -> dict:
    """JSON-safe view: ids, scores, weights, boxes, source refs. No pixels."""
    out = {
        "image_id": exp.image_id,
        "predicted_class": exp.predicted_class,
        "predicted_class_name": exp.predicted_class_name,
        "confidence": exp.confidence,
        "k": exp.k,
        "items": [{
            "prototype_id": it.prototype_id,
            "prototype_class": it.prototype_class,
            "similarity_score": it.similarity_score,
            "fc_weight_to_predicted": it.fc_weight_to_predicted,
            "negative_evidence": it.negative_evidence,
            "test_bbox": list(it.test_bbox),
            "source_image_id": it.source_image_id,
            "source_bbox": None if it.source_bbox is None else list(it.source_bbox),
        } for it in exp.items],
    }
    if warning is not None:
        out["warning"] = warning
    return out


def explanation_to_json(exp: Explanation, warning: str | None = None) -> str:
    return json.dumps(explanation_to_dict(exp, warning), indent=2)


def render_panel(exp: Explanation, test_image,
                 image_loader: Callable[[str], "np.ndarray"],
                 alpha: float = 0.5):
    """Five-column evidence grid, one row per item: test image, heatmap
    overlay, thresholded test crop with score, source crop, source image with
    the projected region outlined."""
    test = _image_to_float(test_image)
    n = len(exp.items)
    fig, axes = plt.subplots(n, 5, figsize=(14, 2.9 * n), squeeze=False)
    for ax_row, item in zip(axes, exp.items):
        source = _image_to_float(image_loader(item.source_image_id))
        ax_row[0].imshow(test)
        ax_row[0].set_title(f"test: {exp.predicted_class_name}", fontsize=9)
        ax_row[1].imshow(overlay(test, item.heatmap, alpha))
        ax_row[1].set_title("activation", fontsize=9)
        ax_row[2].imshow(crop(test, item.test_bbox))
        ax_row[2].set_title(f"sim {item.similarity_score:.3f}", fontsize=9)
        src_crop = crop(source, item.source_bbox) if item.source_bbox is not None else source
        ax_row[3].imshow(src_crop)
        weight = item.fc_weight_to_predicted
        ax_row[3].set_title(f"prototype {item.prototype_id} (w {weight:+.2f})", fontsize=9)
        ax_row[4].imshow(source)
        if item.source_bbox is not None:
            r0, c0, r1, c1 = item.source_bbox
            ax_row[4].add_patch(Rectangle((c0 - 0.5, r0 - 0.5), c1 - c0 + 1, r1 - r0 + 1,
                                          fill=False, edgecolor="yellow", linewidth=1.5))
        ax_row[4].set_title(f"source {item.source_image_id}", fontsize=9)
        for ax in ax_row:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    return fig
