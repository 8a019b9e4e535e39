"""Post-hoc probability calibration feeding the 0.9 abstention gate.

Temperature scaling rescales all logits by a single positive scalar (argmax
preserving); vector scaling applies a per-class scale and bias. Both fit by
minimizing validation NLL with L-BFGS (gradient-norm tolerance 1e-6, at most
500 iterations). The vector fit starts from the fitted temperature, so its
optimum can never be worse than temperature scaling's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

KINDS = ("none", "temperature", "vector")


@dataclass
class Calibrator:
    kind: str = "none"
    temperature: float = 1.0
    scale: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown calibrator kind {self.kind!r}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "vector" and (self.scale is None or self.bias is None):
            raise ValueError("vector calibrator needs scale and bias")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "temperature": self.temperature,
                "scale": None if self.scale is None else [float(v) for v in self.scale],
                "bias": None if self.bias is None else [float(v) for v in self.bias]}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibrator":
        return cls(kind=d["kind"], temperature=d.get("temperature", 1.0),
                   scale=None if d.get("scale") is None else np.asarray(d["scale"], dtype=np.float64),
                   bias=None if d.get("bias") is None else np.asarray(d["bias"], dtype=np.float64))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_calibrator(calibrator: Calibrator, logits: np.ndarray) -> np.ndarray:
    """Calibrated probability vectors; rows sum to 1."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if calibrator.kind == "temperature":
        return softmax(logits / calibrator.temperature)
    if calibrator.kind == "vector":
        return softmax(logits * calibrator.scale + calibrator.bias)
    return softmax(logits)


def nll(calibrator: Calibrator, logits: np.ndarray, labels: np.ndarray) -> float:
    probs = apply_calibrator(calibrator, logits)
    rows = np.arange(len(labels))
    return float(-np.log(np.clip(probs[rows, labels], 1e-300, None)).mean())


def expected_calibration_error(probs: np.ndarray, labels: np.ndarray,
                               bins: int = 15) -> float:
    """Standard equal-width-bin ECE over max-probability confidences."""
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    ece = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (conf > lo) & (conf <= hi) if lo > 0 else (conf >= lo) & (conf <= hi)
        if in_bin.any():
            ece += in_bin.mean() * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(ece)


def _lbfgs_fit(params: list[torch.Tensor], closure) -> None:
    opt = torch.optim.LBFGS(params, lr=0.5, max_iter=500,
                            tolerance_grad=1e-6, tolerance_change=0.0,
                            line_search_fn="strong_wolfe")

    def step():
        opt.zero_grad()
        loss = closure()
        loss.backward()
        return loss

    opt.step(step)


def _validate_fit_inputs(logits: np.ndarray, labels: np.ndarray):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need a nonempty (N, C) logit matrix")
    if len(labels) != len(logits):
        raise ValueError("logits/labels length mismatch")
    if len(np.unique(labels)) < 2:
        raise ValueError("validation set is degenerate (single class)")
    return logits, labels


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> Calibrator:
    logits, labels = _validate_fit_inputs(logits, labels)
    t_logits = torch.from_numpy(logits)
    t_labels = torch.from_numpy(labels)
    log_t = torch.zeros(1, dtype=torch.float64, requires_grad=True)

    def closure():
        return torch.nn.functional.cross_entropy(t_logits / torch.exp(log_t), t_labels)

    _lbfgs_fit([log_t], closure)
    return Calibrator(kind="temperature", temperature=float(torch.exp(log_t.detach())))


def fit_vector(logits: np.ndarray, labels: np.ndarray) -> Calibrator:
    logits, labels = _validate_fit_inputs(logits, labels)
    warm = fit_temperature(logits, labels)
    c = logits.shape[1]
    t_logits = torch.from_numpy(logits)
    t_labels = torch.from_numpy(labels)
    scale = torch.full((c,), 1.0 / warm.temperature, dtype=torch.float64,
                       requires_grad=True)
    bias = torch.zeros(c, dtype=torch.float64, requires_grad=True)

    def closure():
        return torch.nn.functional.cross_entropy(t_logits * scale + bias, t_labels)

    _lbfgs_fit([scale, bias], closure)
    return Calibrator(kind="vector", scale=scale.detach().numpy().copy(),
                      bias=bias.detach().numpy().copy())


def fit(kind: str, logits: np.ndarray, labels: np.ndarray) -> Calibrator:
    if kind == "temperature":
        return fit_temperature(logits, labels)
    if kind == "vector":
        return fit_vector(logits, labels)
    if kind == "none":
        return Calibrator(kind="none")
    raise ValueError(f"unknown calibrator kind {kind!r}")
