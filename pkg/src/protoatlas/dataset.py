"""Manifest ingestion, chronological (sol-based) splitting, and
instrument-conditional augmentation.

A manifest is a CSV file with a header row and columns
``path,class_name,instrument,sol`` plus an optional ``split`` column.
One image per line, preserved in file order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from PIL import Image


class ManifestError(ValueError):
    """Raised for missing/malformed manifest files or rows."""


class Instrument(Enum):
    MAHLI = "MAHLI"
    MASTCAM = "MASTCAM"
    OTHER = "OTHER"


class Split(Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    path: str
    label: int
    class_name: str
    instrument: Instrument
    sol: int
    split: Split | None = None


@dataclass
class DatasetIndex:
    entries: list[ImageEntry]
    class_names: list[str]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError("duplicate class names")
        for e in self.entries:
            if not 0 <= e.label < len(self.class_names):
                raise ManifestError(f"label {e.label} out of range for {e.image_id}")
            if e.sol < 0:
                raise ManifestError(f"negative sol for {e.image_id}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_entries(self, split: Split) -> list[ImageEntry]:
        return [e for e in self.entries if e.split is split]

    def by_id(self, image_id: str) -> ImageEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def counts_per_class_per_split(self) -> dict[str, dict[str, int]]:
        """Table {split: {class_name: count}}; unassigned rows under 'UNASSIGNED'."""
        table: dict[str, dict[str, int]] = {}
        for e in self.entries:
            key = e.split.value if e.split is not None else "UNASSIGNED"
            row = table.setdefault(key, {})
            row[e.class_name] = row.get(e.class_name, 0) + 1
        return table


_COLUMNS = ("path", "class_name", "instrument", "sol")


def load_manifest(path: str | Path, class_names: list[str] | None = None) -> DatasetIndex:
    """Read and validate a manifest CSV.

    When ``class_names`` is given (e.g. taken from a checkpoint), rows naming a
    class outside that list are rejected; otherwise the class list is inferred
    as the sorted set of names seen, and labels index into it.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError(f"empty manifest: {path}")
        missing = [c for c in _COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"manifest missing columns: {', '.join(missing)}")
        rows = list(reader)

    raw: list[dict] = []
    for i, row in enumerate(rows, start=1):
        def bad(msg: str) -> ManifestError:
            return ManifestError(f"row {i}: {msg}")

        for col in _COLUMNS:
            if row.get(col) in (None, ""):
                raise bad(f"missing {col}")
        try:
            sol = int(row["sol"])
        except ValueError:
            raise bad(f"sol is not an integer: {row['sol']!r}")
        if sol < 0:
            raise bad(f"negative sol: {sol}")
        try:
            instrument = Instrument(row["instrument"].strip().upper())
        except ValueError:
            raise bad(f"unknown instrument: {row['instrument']!r}")
        split = None
        if row.get("split"):
            try:
                split = Split(row["split"].strip().upper())
            except ValueError:
                raise bad(f"unknown split: {row['split']!r}")
        name = row["class_name"].strip()
        if class_names is not None and name not in class_names:
            raise bad(f"unknown class name: {name!r}")
        raw.append(dict(path=row["path"].strip(), class_name=name,
                        instrument=instrument, sol=sol, split=split))

    names = class_names if class_names is not None else sorted({r["class_name"] for r in raw})
    label_of = {n: i for i, n in enumerate(names)}

    entries: list[ImageEntry] = []
    seen: set[str] = set()
    for i, r in enumerate(raw, start=1):
        image_id = Path(r["path"]).stem
        if image_id in seen:
            raise ManifestError(f"row {i}: duplicate image_id: {image_id}")
        seen.add(image_id)
        entries.append(ImageEntry(image_id=image_id, path=r["path"],
                                  label=label_of[r["class_name"]],
                                  class_name=r["class_name"],
                                  instrument=r["instrument"], sol=r["sol"],
                                  split=r["split"]))
    return DatasetIndex(entries=entries, class_names=list(names))


def write_manifest(index: DatasetIndex, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_name", "instrument", "sol", "split"])
        for e in index.entries:
            writer.writerow([e.path, e.class_name, e.instrument.value, e.sol,
                             e.split.value if e.split is not None else ""])


def sol_split(index: DatasetIndex, val_fraction: float, test_fraction: float) -> DatasetIndex:
    """Chronological split: earliest sols go to TRAIN, then VAL, then TEST.

    Entries sharing a sol never straddle a boundary; the whole sol moves to the
    later split. Deterministic for a fixed index (stable sort by sol).
    """
    if val_fraction <= 0 or test_fraction <= 0:
        raise ValueError("fractions must be positive")
    if val_fraction + test_fraction >= 1:
        raise ValueError("fractions must sum to less than 1")
    entries = sorted(index.entries, key=lambda e: e.sol)
    n = len(entries)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    cut1 = n - n_val - n_test  # first VAL index
    cut2 = n - n_test          # first TEST index

    def pull_to_sol_start(cut: int) -> int:
        while 0 < cut < n and entries[cut - 1].sol == entries[cut].sol:
            cut -= 1
        return cut

    cut1 = pull_to_sol_start(cut1)
    cut2 = pull_to_sol_start(cut2)
    if cut1 <= 0 or cut2 <= cut1 or cut2 >= n:
        raise ValueError("sol_split would produce an empty split")

    out = []
    for i, e in enumerate(entries):
        split = Split.TRAIN if i < cut1 else Split.VAL if i < cut2 else Split.TEST
        out.append(replace(e, split=split))
    return DatasetIndex(entries=out, class_names=list(index.class_names))


@dataclass(frozen=True)
class AugmentationRecipe:
    rotations_deg: tuple[int, ...] = ()
    horizontal_flip: bool = False
    vertical_flip: bool = False

    def __post_init__(self):
        for r in self.rotations_deg:
            if r not in (90, 180, 270):
                raise ValueError(f"unsupported rotation: {r}")


_RECIPES = {
    Instrument.MAHLI: AugmentationRecipe((90, 180, 270), True, True),
    Instrument.MASTCAM: AugmentationRecipe((), True, False),
    Instrument.OTHER: AugmentationRecipe(),
}


def recipe_for_instrument(instrument: Instrument) -> AugmentationRecipe:
    return _RECIPES[instrument]


_ROTATE = {90: Image.Transpose.ROTATE_90, 180: Image.Transpose.ROTATE_180,
           270: Image.Transpose.ROTATE_270}


def augment_image(image: Image.Image, recipe: AugmentationRecipe) -> list[tuple[Image.Image, str]]:
    """Apply a recipe to a decoded image; variants are the union
    {original} + rotations + flips, tagged by transform name."""
    if recipe.rotations_deg and image.width != image.height:
        raise ValueError("rotation variants require a square image; resize upstream first")
    variants = [(image.copy(), "orig")]
    for deg in recipe.rotations_deg:
        variants.append((image.transpose(_ROTATE[deg]), f"rot{deg}"))
    if recipe.horizontal_flip:
        variants.append((image.transpose(Image.Transpose.FLIP_LEFT_RIGHT), "hflip"))
    if recipe.vertical_flip:
        variants.append((image.transpose(Image.Transpose.FLIP_TOP_BOTTOM), "vflip"))
    return variants


def augment(entry: ImageEntry, recipe: AugmentationRecipe) -> list[tuple[Image.Image, str]]:
    image = Image.open(entry.path).convert("RGB")
    return augment_image(image, recipe)


def variant_tags(recipe: AugmentationRecipe) -> list[str]:
    tags = ["orig"] + [f"rot{d}" for d in recipe.rotations_deg]
    if recipe.horizontal_flip:
        tags.append("hflip")
    if recipe.vertical_flip:
        tags.append("vflip")
    return tags


def apply_variant(image: Image.Image, tag: str) -> Image.Image:
    if tag == "orig":
        return image
    if tag.startswith("rot"):
        if image.width != image.height:
            raise ValueError("rotation variants require a square image; resize upstream first")
        return image.transpose(_ROTATE[int(tag[3:])])
    if tag == "hflip":
        return image.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
    if tag == "vflip":
        return image.transpose(Image.Transpose.FLIP_TOP_BOTTOM)
    raise ValueError(f"unknown variant tag: {tag}")


def load_image(path: str | Path, size: int = 224) -> Image.Image:
    """Decode and resize to the backbone's square input resolution (bilinear)."""
    image = Image.open(path).convert("RGB")
    if image.size != (size, size):
        image = image.resize((size, size), Image.Resampling.BILINEAR)
    return image


VARIANT_SEP = "::"


def load_sample_image(index: DatasetIndex, sample_id: str, size: int = 224) -> Image.Image:
    """Resolve a plain image_id or an augmented id like ``imageid::rot90``."""
    base, _, tag = sample_id.partition(VARIANT_SEP)
    image = load_image(index.by_id(base).path, size)
    return apply_variant(image, tag) if tag else image
