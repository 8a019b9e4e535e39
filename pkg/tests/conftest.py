import numpy as np
import pytest
import torch
from PIL import Image, ImageDraw

from protoatlas.dataset import load_manifest, sol_split
from protoatlas.model import ModelConfig, ProtoPartsModel

# ---------------------------------------------------------------------------
# toy shapes dataset: 3 classes (circle / square / triangle) with per-class
# color families, sols increasing so the chronological split is well defined.
# ---------------------------------------------------------------------------

CLASS_NAMES = ("circle", "square", "triangle")
BASE_COLORS = {0: (200, 60, 60), 1: (60, 180, 60), 2: (70, 90, 220)}


def draw_shape(class_id: int, rng: np.random.Generator, size: int = 64) -> Image.Image:
    bg = tuple(int(v) for v in rng.integers(10, 60, size=3))
    img = Image.new("RGB", (size, size), bg)
    d = ImageDraw.Draw(img)
    jitter = rng.integers(-30, 30, size=3)
    color = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(BASE_COLORS[class_id], jitter))
    cx, cy = rng.integers(size // 4, 3 * size // 4, size=2)
    r = int(rng.integers(size // 6, size // 3))
    x0, y0, x1, y1 = cx - r, cy - r, cx + r, cy + r
    if class_id == 0:
        d.ellipse([x0, y0, x1, y1], fill=color)
    elif class_id == 1:
        d.rectangle([x0, y0, x1, y1], fill=color)
    else:
        d.polygon([(cx, y0), (x0, y1), (x1, y1)], fill=color)
    return img


def build_toy_dataset(root, n: int = 50, size: int = 64, seed: int = 7):
    """Writes images + manifest.csv; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = ["path,class_name,instrument,sol"]
    for i in range(n):
        class_id = i % len(CLASS_NAMES)
        img = draw_shape(class_id, rng, size)
        path = root / f"toy_{i:03d}.png"
        img.save(path)
        rows.append(f"{path},{CLASS_NAMES[class_id]},OTHER,{i}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return build_toy_dataset(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_index(toy_manifest):
    return sol_split(load_manifest(toy_manifest), 0.2, 0.2)


def make_tiny_model(num_classes=3, m=2, d=16, input_size=32, seed=0) -> ProtoPartsModel:
    torch.manual_seed(seed)
    config = ModelConfig(class_names=tuple(f"class{i}" for i in range(num_classes)),
                         backbone="tiny", prototypes_per_class=m, prototype_dim=d,
                         input_size=input_size, pretrained=False)
    return ProtoPartsModel(config)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion after the run
# ---------------------------------------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    label = getattr(item.function, "_criterion", None)
    if label:
        _ACCEPTANCE_RESULTS[label] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label, status in _ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"[{status}] {label}")


def criterion(label):
    def mark(fn):
        fn._criterion = label
        return fn
    return mark
