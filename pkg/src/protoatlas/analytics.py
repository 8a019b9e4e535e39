"""Quantitative evaluation: accuracy / thresholded accuracy / abstention rate,
the majority-class baseline, and the prototype diversity and in-class curves.

Prediction and evidence-trace files are line-delimited JSON, one record per
line (see docs/formats.md).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import Calibrator, apply_calibrator
from .dataset import DatasetIndex, Split, load_image
from .model import ProtoPartsModel, forward


@dataclass
class PredictionRecord:
    image_id: str
    true_label: int
    predicted_label: int
    confidence: float
    logits: list[float]
    abstained: bool

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "true_label": self.true_label,
                "predicted_label": self.predicted_label,
                "confidence": self.confidence, "logits": self.logits,
                "abstained": self.abstained}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(image_id=d["image_id"], true_label=int(d["true_label"]),
                   predicted_label=int(d["predicted_label"]),
                   confidence=float(d["confidence"]),
                   logits=[float(v) for v in d["logits"]],
                   abstained=bool(d["abstained"]))


@dataclass
class TracedPrototype:
    prototype_id: int
    prototype_class: int
    source_image_id: str


@dataclass
class EvidenceTrace:
    image_id: str
    true_label: int
    correct: bool
    top_prototypes: list[TracedPrototype] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "true_label": self.true_label,
                "correct": self.correct,
                "top_prototypes": [{"prototype_id": p.prototype_id,
                                    "prototype_class": p.prototype_class,
                                    "source_image_id": p.source_image_id}
                                   for p in self.top_prototypes]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceTrace":
        return cls(image_id=d["image_id"], true_label=int(d["true_label"]),
                   correct=bool(d["correct"]),
                   top_prototypes=[TracedPrototype(int(p["prototype_id"]),
                                                   int(p["prototype_class"]),
                                                   p["source_image_id"])
                                   for p in d["top_prototypes"]])


def write_records(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    with open(path) as fh:
        return [PredictionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_traces(path: str | Path) -> list[EvidenceTrace]:
    with open(path) as fh:
        return [EvidenceTrace.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class AccuracyReport:
    """Percentages. acc_at_threshold is None when every record abstained."""
    acc: float
    acc_at_threshold: float | None
    abstention_rate: float


def accuracy_report(records: list[PredictionRecord], threshold: float = 0.9) -> AccuracyReport:
    """Overall accuracy, accuracy over delivered (confidence >= threshold)
    records, and the abstention rate, all as percentages."""
    if not records:
        raise ValueError("no prediction records")
    n = len(records)
    correct = [r.predicted_label == r.true_label for r in records]
    delivered = [r.confidence >= threshold for r in records]
    n_delivered = sum(delivered)
    acc = 100.0 * sum(correct) / n
    abst = 100.0 * (n - n_delivered) / n
    if n_delivered == 0:
        return AccuracyReport(acc=acc, acc_at_threshold=None, abstention_rate=abst)
    acc_at = 100.0 * sum(c for c, d in zip(correct, delivered) if d) / n_delivered
    return AccuracyReport(acc=acc, acc_at_threshold=acc_at, abstention_rate=abst)


def most_common_baseline(index: DatasetIndex, split: Split) -> float:
    """Accuracy (pct) of always predicting the majority TRAIN class."""
    train = index.split_entries(Split.TRAIN)
    if not train:
        raise ValueError("empty TRAIN split")
    target = index.split_entries(split)
    if not target:
        raise ValueError(f"empty {split.value} split")
    counts = np.bincount([e.label for e in train], minlength=index.num_classes)
    majority = int(counts.argmax())
    return 100.0 * sum(e.label == majority for e in target) / len(target)


def _check_trace_depth(traces, k_max):
    for t in traces:
        if len(t.top_prototypes) < k_max:
            raise ValueError(
                f"trace {t.image_id} has only {len(t.top_prototypes)} prototypes, need {k_max}")


def diversity_curve(traces: list[EvidenceTrace], k_max: int = 5) -> dict[int, list[float]]:
    """Per class, for k in [1, k_max]: mean number of unique source training
    images among the top-k prototypes of correctly classified traces. Classes
    with no correct traces are omitted."""
    correct = [t for t in traces if t.correct]
    _check_trace_depth(correct, k_max)
    by_class: dict[int, list[EvidenceTrace]] = {}
    for t in correct:
        by_class.setdefault(t.true_label, []).append(t)
    curves = {}
    for class_id, group in sorted(by_class.items()):
        curves[class_id] = [
            float(np.mean([len({p.source_image_id for p in t.top_prototypes[:k]})
                           for t in group]))
            for k in range(1, k_max + 1)]
    return curves


def inclass_curve(traces: list[EvidenceTrace], k_max: int = 5,
                  correct_only: bool = False) -> dict[int, list[float]]:
    """Per class, mean count of top-k prototypes owned by the trace's class."""
    if correct_only:
        traces = [t for t in traces if t.correct]
    if not traces:
        raise ValueError("no traces")
    _check_trace_depth(traces, k_max)
    by_class: dict[int, list[EvidenceTrace]] = {}
    for t in traces:
        by_class.setdefault(t.true_label, []).append(t)
    curves = {}
    for class_id, group in sorted(by_class.items()):
        curves[class_id] = [
            float(np.mean([sum(p.prototype_class == t.true_label
                               for p in t.top_prototypes[:k]) for t in group]))
            for k in range(1, k_max + 1)]
    return curves


def collect_predictions(model: ProtoPartsModel, index: DatasetIndex, split: Split,
                        calibrator: Calibrator | None = None,
                        threshold: float = 0.9) -> list[PredictionRecord]:
    calibrator = calibrator or Calibrator(kind="none")
    records = []
    for entry in index.split_entries(split):
        image = load_image(entry.path, model.config.input_size)
        logits, _ = forward(image, model)
        probs = apply_calibrator(calibrator, logits[None, :])[0]
        confidence = float(probs.max())
        records.append(PredictionRecord(
            image_id=entry.image_id, true_label=entry.label,
            predicted_label=int(probs.argmax()), confidence=confidence,
            logits=[float(v) for v in logits],
            abstained=confidence < threshold))
    return records


def collect_traces(model: ProtoPartsModel, index: DatasetIndex, split: Split,
                   k_max: int = 10) -> list[EvidenceTrace]:
    """Rank all prototypes by similarity score per image (prototype_id breaks
    ties) and keep the top k_max with their projected sources."""
    if not model.prototype_sources:
        raise ValueError("prototypes have no sources; run projection first")
    proto_classes = model.proto_classes.tolist()
    traces = []
    for entry in index.split_entries(split):
        image = load_image(entry.path, model.config.input_size)
        logits, scores = forward(image, model)
        order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))[:k_max]
        top = [TracedPrototype(prototype_id=j, prototype_class=proto_classes[j],
                               source_image_id=model.prototype_sources[j].image_id)
               for j in order]
        traces.append(EvidenceTrace(image_id=entry.image_id, true_label=entry.label,
                                    correct=int(logits.argmax()) == entry.label,
                                    top_prototypes=top))
    return traces


def _pct(v: float | None) -> str:
    if v is None:
        return "-"
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return s + "%"


SPLIT_ORDER = ("train", "val", "test")
SPLIT_TITLES = {"train": "Train", "val": "Validation", "test": "Test"}


def format_accuracy_table(model_rows: list[tuple[str, dict[str, AccuracyReport | None]]],
                          baseline: dict[str, float] | None = None,
                          counts: dict[str, int] | None = None) -> str:
    """Aligned text table with Acc / Acc(0.9) / Abst Rate per split."""
    header_cells = []
    for split in SPLIT_ORDER:
        title = SPLIT_TITLES[split]
        if counts and split in counts:
            title += f" (n={counts[split]})"
        header_cells.append(title)

    rows: list[list[str]] = []
    if baseline is not None:
        cells = ["Most common (baseline)"]
        for split in SPLIT_ORDER:
            v = baseline.get(split)
            cells += [_pct(v), "-", "-"]
        rows.append(cells)
    for name, reports in model_rows:
        cells = [name]
        for split in SPLIT_ORDER:
            rep = reports.get(split)
            if rep is None:
                cells += ["-", "-", "-"]
            else:
                cells += [_pct(rep.acc), _pct(rep.acc_at_threshold),
                          _pct(rep.abstention_rate)]
        rows.append(cells)

    sub = [""] + ["Acc", "Acc (0.9)", "Abst Rate"] * 3
    widths = [max(len(r[i]) for r in rows + [sub]) for i in range(len(sub))]
    widths[0] = max(widths[0], 5)

    lines = []
    group = " " * widths[0]
    pos = 1
    for title in header_cells:
        span = sum(widths[pos:pos + 3]) + 4
        group += " | " + title.ljust(span)
        pos += 3
    lines.append(group.rstrip())
    line = sub[0].ljust(widths[0])
    for i in range(1, len(sub), 3):
        line += " | " + "  ".join(sub[i + j].ljust(widths[i + j]) for j in range(3))
    lines.append(line.rstrip())
    for row in rows:
        line = row[0].ljust(widths[0])
        for i in range(1, len(row), 3):
            line += " | " + "  ".join(row[i + j].ljust(widths[i + j]) for j in range(3))
        lines.append(line.rstrip())
    return "\n".join(lines)


def write_accuracy_tsv(model_rows: list[tuple[str, dict[str, AccuracyReport | None]]],
                       path: str | Path, baseline: dict[str, float] | None = None) -> None:
    """Machine-readable companion of the text table."""
    with open(path, "w") as fh:
        fh.write("model\tsplit\tacc\tacc_at_threshold\tabstention_rate\n")
        if baseline:
            for split in SPLIT_ORDER:
                if split in baseline:
                    fh.write(f"Most common (baseline)\t{split}\t{baseline[split]:.6g}\t\t\n")
        for name, reports in model_rows:
            for split in SPLIT_ORDER:
                rep = reports.get(split)
                if rep is None:
                    continue
                acc_at = "" if rep.acc_at_threshold is None else f"{rep.acc_at_threshold:.6g}"
                fh.write(f"{name}\t{split}\t{rep.acc:.6g}\t{acc_at}\t{rep.abstention_rate:.6g}\n")


def write_curves_csv(curves: dict[int, list[float]], class_names: list[str],
                     path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("class_id,class_name,k,value\n")
        for class_id, values in sorted(curves.items()):
            for k, v in enumerate(values, start=1):
                fh.write(f"{class_id},{class_names[class_id]},{k},{v:.6g}\n")
