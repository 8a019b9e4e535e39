"""HTTP serving of calibrated classifications behind the 0.9 confidence gate,
on-demand cached explanations, durable feedback capture, and review export.

Abstained predictions never expose a class in any payload. Explanations are
computed lazily and cached per (image_id, model_version, k) as the exact
bytes first served. Feedback writes go through a serialized sqlite store and
are acknowledged only after commit.
"""

from __future__ import annotations

import io
import json
import sqlite3
import threading
import uuid
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel, model_validator

from .analytics import PredictionRecord
from .calibration import Calibrator, apply_calibrator
from .dataset import DatasetIndex, load_image, load_sample_image
from .explain import Explanation, explain, explanation_to_dict
from .model import ProtoPartsModel, forward

DEFAULT_THRESHOLD = 0.9

KIND_WRONG_LABEL = "WRONG_LABEL"
KIND_WRONG_EVIDENCE = "WRONG_EVIDENCE"


def is_abstained(confidence: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """Inclusive gate: confidence of exactly the threshold is delivered."""
    return confidence < threshold


@dataclass
class FeedbackRecord:
    feedback_id: str
    image_id: str
    kind: str
    suggested_label: int | None
    prototype_id: int | None
    comment: str | None
    created_at: str
    model_version: str

    def to_dict(self) -> dict:
        return {"feedback_id": self.feedback_id, "image_id": self.image_id,
                "kind": self.kind, "suggested_label": self.suggested_label,
                "prototype_id": self.prototype_id, "comment": self.comment,
                "created_at": self.created_at, "model_version": self.model_version}


class FeedbackStore:
    """Embedded transactional store; writes serialize through one lock and
    are committed before add() returns."""

    _SCHEMA = """
    CREATE TABLE IF NOT EXISTS feedback (
        feedback_id TEXT PRIMARY KEY,
        image_id TEXT NOT NULL,
        kind TEXT NOT NULL,
        suggested_label INTEGER,
        prototype_id INTEGER,
        comment TEXT,
        created_at TEXT NOT NULL,
        model_version TEXT NOT NULL
    )"""

    def __init__(self, path: str | Path = ":memory:"):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._lock = threading.Lock()
        with self._lock:
            if str(path) != ":memory:":
                self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute(self._SCHEMA)
            self._conn.commit()

    def add(self, image_id: str, kind: str, suggested_label: int | None,
            prototype_id: int | None, comment: str | None,
            model_version: str) -> FeedbackRecord:
        record = FeedbackRecord(
            feedback_id=uuid.uuid4().hex, image_id=image_id, kind=kind,
            suggested_label=suggested_label, prototype_id=prototype_id,
            comment=comment, created_at=datetime.now(timezone.utc).isoformat(),
            model_version=model_version)
        with self._lock:
            self._conn.execute(
                "INSERT INTO feedback VALUES (?,?,?,?,?,?,?,?)",
                (record.feedback_id, record.image_id, record.kind,
                 record.suggested_label, record.prototype_id, record.comment,
                 record.created_at, record.model_version))
            self._conn.commit()
        return record

    def get(self, feedback_id: str) -> FeedbackRecord | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM feedback WHERE feedback_id=?", (feedback_id,)).fetchone()
        return FeedbackRecord(*row) if row else None

    def for_version(self, model_version: str) -> list[FeedbackRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM feedback WHERE model_version=? ORDER BY created_at",
                (model_version,)).fetchall()
        return [FeedbackRecord(*row) for row in rows]

    def count(self, model_version: str) -> int:
        with self._lock:
            (n,) = self._conn.execute(
                "SELECT COUNT(*) FROM feedback WHERE model_version=?",
                (model_version,)).fetchone()
        return int(n)


class ModelPredictor:
    """Immutable model + calibrator snapshot behind the service endpoints."""

    def __init__(self, model: ProtoPartsModel, calibrator: Calibrator | None,
                 index: DatasetIndex, model_version: str,
                 threshold: float = DEFAULT_THRESHOLD):
        self.model = model
        self.calibrator = calibrator or Calibrator(kind="none")
        self.index = index
        self.model_version = model_version
        self.threshold = threshold

    @property
    def class_names(self):
        return self.model.config.class_names

    @property
    def num_prototypes(self) -> int:
        return self.model.config.num_prototypes

    def _predict(self, image, image_id: str, true_label: int) -> PredictionRecord:
        logits, _ = forward(image, self.model)
        probs = apply_calibrator(self.calibrator, logits[None])[0]
        confidence = float(probs.max())
        return PredictionRecord(
            image_id=image_id, true_label=true_label,
            predicted_label=int(probs.argmax()), confidence=confidence,
            logits=[float(v) for v in logits],
            abstained=is_abstained(confidence, self.threshold))

    def predict_pil(self, image: Image.Image, image_id: str) -> PredictionRecord:
        size = self.model.config.input_size
        if image.size != (size, size):
            image = image.resize((size, size), Image.Resampling.BILINEAR)
        return self._predict(image, image_id, true_label=-1)

    def predict_for_id(self, image_id: str) -> PredictionRecord:
        entry = self.index.by_id(image_id)
        image = load_image(entry.path, self.model.config.input_size)
        return self._predict(image, image_id, true_label=entry.label)

    def explain_for_id(self, image_id: str, k: int) -> Explanation:
        size = self.model.config.input_size
        image = load_image(self.index.by_id(image_id).path, size)
        return explain(image, self.model, k=k, calibrator=self.calibrator,
                       image_loader=lambda sid: load_sample_image(self.index, sid, size),
                       image_id=image_id)


def public_payload(record: PredictionRecord, class_names, model_version: str) -> dict:
    """Classification payload; abstained responses carry no class at all."""
    payload = {"image_id": record.image_id, "model_version": model_version,
               "abstained": record.abstained,
               "confidence": round(record.confidence, 6)}
    if not record.abstained:
        payload["predicted_class"] = record.predicted_label
        payload["class_name"] = class_names[record.predicted_label]
    return payload


class FeedbackIn(BaseModel):
    image_id: str
    kind: Literal["WRONG_LABEL", "WRONG_EVIDENCE"]
    suggested_label: int | None = None
    prototype_id: int | None = None
    comment: str | None = None

    @model_validator(mode="after")
    def _check_kind_fields(self):
        if self.kind == KIND_WRONG_LABEL and self.suggested_label is None:
            raise ValueError("suggested_label is required for WRONG_LABEL feedback")
        if self.kind == KIND_WRONG_EVIDENCE and self.prototype_id is None:
            raise ValueError("prototype_id is required for WRONG_EVIDENCE feedback")
        return self


def build_review_export(records: list[FeedbackRecord], model_version: str,
                        prototype_class_of=None, max_samples: int = 5) -> dict:
    """Grouped counts, the label-rectification patch (majority vote, ties
    flagged unresolved), and the prototype complaint ranking."""
    groups: dict[tuple, dict] = {}
    for r in records:
        if r.kind == KIND_WRONG_LABEL:
            key = (r.kind, r.suggested_label, None)
        else:
            klass = prototype_class_of(r.prototype_id) if prototype_class_of else None
            key = (r.kind, klass, r.prototype_id)
        g = groups.setdefault(key, {"kind": key[0], "class": key[1],
                                    "prototype_id": key[2], "count": 0,
                                    "sample_image_ids": []})
        g["count"] += 1
        if r.image_id not in g["sample_image_ids"] and len(g["sample_image_ids"]) < max_samples:
            g["sample_image_ids"].append(r.image_id)

    votes: dict[str, Counter] = {}
    for r in records:
        if r.kind == KIND_WRONG_LABEL:
            votes.setdefault(r.image_id, Counter())[r.suggested_label] += 1
    patch, unresolved = [], []
    for image_id in sorted(votes):
        counter = votes[image_id]
        top = counter.most_common()
        if len(top) > 1 and top[0][1] == top[1][1]:
            unresolved.append(image_id)
        else:
            patch.append({"image_id": image_id, "suggested_label": top[0][0],
                          "votes": top[0][1]})

    complaints = Counter(r.prototype_id for r in records if r.kind == KIND_WRONG_EVIDENCE)
    ranking = [{"prototype_id": pid, "count": n}
               for pid, n in sorted(complaints.items(), key=lambda kv: (-kv[1], kv[0]))]

    return {"model_version": model_version, "total": len(records),
            "empty": not records,
            "groups": sorted(groups.values(),
                             key=lambda g: (g["kind"], str(g["class"]), str(g["prototype_id"]))),
            "label_patch": patch, "unresolved": unresolved,
            "prototype_complaints": ranking}


def create_app(predictor, index: DatasetIndex, store: FeedbackStore,
               static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="protoatlas service")
    app.state.predictor = predictor
    lock = threading.Lock()
    prediction_cache: dict[tuple[str, str], PredictionRecord] = {}
    explanation_cache: dict[tuple[str, str, int], bytes] = {}
    uploads: dict[str, Image.Image] = {}

    def known_image(image_id: str) -> bool:
        try:
            index.by_id(image_id)
            return True
        except KeyError:
            return image_id in uploads

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model_version": predictor.model_version,
                "num_classes": len(predictor.class_names),
                "threshold": predictor.threshold}

    @app.get("/images")
    def images(split: str | None = None, class_name: str | None = None,
               limit: int = 50, offset: int = 0):
        entries = index.entries
        if split is not None:
            entries = [e for e in entries
                       if e.split is not None and e.split.value == split.upper()]
        if class_name is not None:
            entries = [e for e in entries if e.class_name == class_name]
        total = len(entries)
        page = entries[offset:offset + limit]
        items = []
        for e in page:
            cached = prediction_cache.get((e.image_id, predictor.model_version))
            items.append({
                "image_id": e.image_id, "class_name": e.class_name,
                "instrument": e.instrument.value, "sol": e.sol,
                "split": e.split.value if e.split is not None else None,
                "prediction": public_payload(cached, predictor.class_names,
                                             predictor.model_version)
                if cached is not None else None})
        return {"total": total, "offset": offset, "images": items}

    @app.post("/classify")
    async def classify(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("file")
            if upload is None:
                raise HTTPException(422, detail=[{"loc": ["body", "file"],
                                                  "msg": "file is required"}])
            data = await upload.read()
            try:
                image = Image.open(io.BytesIO(data)).convert("RGB")
            except Exception:
                raise HTTPException(400, detail="undecodable image")
            image_id = str(form.get("image_id") or Path(upload.filename or "upload").stem)
            record = predictor.predict_pil(image, image_id)
            with lock:
                uploads[image_id] = image
                prediction_cache[(image_id, predictor.model_version)] = record
        else:
            try:
                body = await request.json()
            except Exception:
                raise HTTPException(400, detail="expected JSON body or multipart upload")
            image_id = body.get("image_id")
            if not image_id:
                raise HTTPException(422, detail=[{"loc": ["body", "image_id"],
                                                  "msg": "image_id is required"}])
            key = (image_id, predictor.model_version)
            with lock:
                record = prediction_cache.get(key)
            if record is None:
                try:
                    record = predictor.predict_for_id(image_id)
                except KeyError:
                    raise HTTPException(404, detail=f"unknown image_id: {image_id}")
                with lock:
                    prediction_cache[key] = record
        return public_payload(record, predictor.class_names, predictor.model_version)

    @app.get("/explain/{image_id}")
    def explain_endpoint(image_id: str, k: int = 4):
        if k < 1:
            raise HTTPException(422, detail=[{"loc": ["query", "k"],
                                              "msg": "k must be >= 1"}])
        if not known_image(image_id):
            raise HTTPException(404, detail=f"unknown image_id: {image_id}")
        warning = None
        if k > predictor.num_prototypes:
            warning = (f"k={k} clamped to the number of prototypes "
                       f"({predictor.num_prototypes})")
            k = predictor.num_prototypes
        key = (image_id, predictor.model_version, k)
        with lock:
            cached = explanation_cache.get(key)
        if cached is None:
            try:
                exp = predictor.explain_for_id(image_id, k)
            except KeyError:
                raise HTTPException(404, detail=f"unknown image_id: {image_id}")
            cached = json.dumps(explanation_to_dict(exp, warning)).encode()
            with lock:
                explanation_cache[key] = cached
        return Response(content=cached, media_type="application/json")

    @app.post("/feedback", status_code=201)
    def feedback(body: FeedbackIn):
        if not known_image(body.image_id):
            raise HTTPException(422, detail=[{"loc": ["body", "image_id"],
                                              "msg": f"unknown image_id: {body.image_id}"}])
        if body.suggested_label is not None and not (
                0 <= body.suggested_label < len(predictor.class_names)):
            raise HTTPException(422, detail=[{"loc": ["body", "suggested_label"],
                                              "msg": "suggested_label out of range"}])
        if body.prototype_id is not None and not (
                0 <= body.prototype_id < predictor.num_prototypes):
            raise HTTPException(422, detail=[{"loc": ["body", "prototype_id"],
                                              "msg": "prototype_id out of range"}])
        record = store.add(image_id=body.image_id, kind=body.kind,
                           suggested_label=body.suggested_label,
                           prototype_id=body.prototype_id, comment=body.comment,
                           model_version=predictor.model_version)
        return record.to_dict()

    @app.get("/export/review")
    def export_review(model_version: str | None = None):
        version = model_version or predictor.model_version
        proto_class_of = None
        if hasattr(predictor, "model"):
            classes = predictor.model.proto_classes.tolist()
            proto_class_of = lambda j: classes[j] if 0 <= j < len(classes) else None
        return build_review_export(store.for_version(version), version, proto_class_of)

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
