"""
On-disk corpus format for protomargin.

Writes per-split directories of binary PGM (P5) images and masks plus a JSON
manifest, and reads them back losslessly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from protomargin.synthgen import LesionSpec, MarginClass, SynthSample


logger = logging.getLogger("protomargin.dataset")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (0.73, 0.12, 0.15)


class DatasetError(ValueError):
    """Raised for missing splits, unreadable files or unwritable output paths."""


@dataclass
class ManifestEntry:
    """One sample row of the manifest."""

    sample_id: str
    split: str
    margin_class: str
    malignant: bool
    has_fine_mask: bool
    seed: int
    confounder: bool
    files: dict[str, str]
    spec: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.sample_id,
            "split": self.split,
            "margin_class": self.margin_class,
            "malignant": self.malignant,
            "has_fine_mask": self.has_fine_mask,
            "seed": self.seed,
            "confounder": self.confounder,
            "files": dict(self.files),
            "spec": self.spec,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ManifestEntry:
        return cls(
            sample_id=data["id"],
            split=data["split"],
            margin_class=data["margin_class"],
            malignant=bool(data["malignant"]),
            has_fine_mask=bool(data["has_fine_mask"]),
            seed=int(data["seed"]),
            confounder=bool(data.get("confounder", False)),
            files=dict(data["files"]),
            spec=data.get("spec"),
        )


@dataclass
class Manifest:
    """
    Index of a written corpus.

    Attributes:
        root: Directory the manifest lives in; file paths are relative to it.
        entries: One entry per sample, sorted by id.
        image_size: Side of the square images.
    """

    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    image_size: int = 112

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def split_counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": MANIFEST_VERSION,
            "image_size": self.image_size,
            "splits": self.split_counts(),
            "samples": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"unreadable manifest {path}: {exc}") from exc
        if data.get("format_version") != MANIFEST_VERSION:
            raise DatasetError(
                f"unsupported manifest version {data.get('format_version')!r} in {path}"
            )
        return cls(
            root=path.parent,
            entries=[ManifestEntry.from_dict(row) for row in data["samples"]],
            image_size=int(data.get("image_size", 112)),
        )


# ============================================================================
# Splitting
# ============================================================================


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Integer counts summing to `total`, proportional to `ratios`."""
    if total < 0:
        raise ValueError(f"total must be nonnegative, got {total}")
    weights = np.asarray(ratios, dtype=np.float64)
    if weights.ndim != 1 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError(f"ratios must be nonnegative with a positive sum, got {list(ratios)}")
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    short = total - int(counts.sum())
    # Largest fractional part first; earlier entries win ties.
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return [int(c) for c in counts]


def stratified_split(
    samples: Sequence[SynthSample],
    ratios: Sequence[float] | None = None,
    counts: Sequence[int] | None = None,
) -> dict[str, list[SynthSample]]:
    """
    Assign samples to train/val/test keeping class proportions.

    Split sizes come from `counts` when given (they must sum to the sample count),
    otherwise from `ratios` by largest remainder. Each split's size is then shared
    across classes by largest remainder of the class proportions, so per-class
    proportions stay within one sample of the global ones.

    Raises:
        ValueError: If counts do not sum to the sample count or both are missing.
    """
    total = len(samples)
    if counts is not None:
        sizes = [int(c) for c in counts]
        if len(sizes) != len(SPLITS) or sum(sizes) != total or min(sizes) < 0:
            raise ValueError(
                f"split counts {sizes} must be {len(SPLITS)} values summing to {total}"
            )
    else:
        sizes = largest_remainder(total, ratios or DEFAULT_SPLIT_RATIOS)

    by_class: dict[int, list[SynthSample]] = {}
    for sample in sorted(samples, key=lambda s: s.sample_id):
        by_class.setdefault(sample.y_margin, []).append(sample)
    classes = sorted(by_class)

    # quota[split][class]: per-class split counts, filled split by split so that
    # column sums match the class sizes exactly.
    remaining = {c: len(by_class[c]) for c in classes}
    quotas: list[dict[int, int]] = []
    for i, size in enumerate(sizes):
        if i == len(sizes) - 1:
            quotas.append(dict(remaining))
            break
        left = sum(remaining.values())
        shares = [0] * len(classes)
        if left:
            shares = largest_remainder(size, [remaining[c] for c in classes])
        quota = {c: min(s, remaining[c]) for c, s in zip(classes, shares, strict=True)}
        quotas.append(quota)
        for c in classes:
            remaining[c] -= quota[c]

    result: dict[str, list[SynthSample]] = {name: [] for name in SPLITS}
    for c in classes:
        start = 0
        for name, quota in zip(SPLITS, quotas, strict=True):
            result[name].extend(by_class[c][start : start + quota[c]])
            start += quota[c]
    for name in SPLITS:
        result[name].sort(key=lambda s: s.sample_id)
    return result


def choose_fine_annotated(train: Sequence[SynthSample], count: int) -> set[str]:
    """Pick `count` training ids (class-stratified, lowest ids first) that keep fine masks."""
    count = min(count, len(train))
    by_class: dict[int, list[str]] = {}
    for sample in sorted(train, key=lambda s: s.sample_id):
        by_class.setdefault(sample.y_margin, []).append(sample.sample_id)
    classes = sorted(by_class)
    shares = largest_remainder(count, [len(by_class[c]) for c in classes]) if count else []
    chosen: set[str] = set()
    for c, share in zip(classes, shares, strict=False):
        chosen.update(by_class[c][:share])
    return chosen


# ============================================================================
# Writing and reading
# ============================================================================


def _write_pgm(path: Path, array: np.ndarray, scale: float) -> None:
    levels = np.round(np.asarray(array, dtype=np.float64) * scale)
    Image.fromarray(np.clip(levels, 0, 255).astype(np.uint8)).save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DatasetError(f"{path} is not an 8-bit grayscale PGM (mode {img.mode})")
            return np.asarray(img, dtype=np.uint8).copy()
    except FileNotFoundError:
        raise DatasetError(f"missing dataset file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"unreadable dataset file {path}: {exc}") from exc


def write_dataset(
    samples: Sequence[SynthSample],
    out_dir: str | Path,
    ratios: Sequence[float] | None = None,
    counts: Sequence[int] | None = None,
    fine_annotated: int = 30,
) -> Manifest:
    """
    Write a class-stratified corpus and its manifest.

    Validation and test samples always keep their fine masks; among training samples
    only the `fine_annotated` subset does, the rest expose the lesion mask only.

    Args:
        samples: Nonempty sample collection with unique ids.
        out_dir: Output directory (created if needed).
        ratios: Split ratios (train, val, test); default (0.73, 0.12, 0.15).
        counts: Explicit split sizes; overrides `ratios`.
        fine_annotated: Size of the fine-annotated training subset.

    Returns:
        The Manifest that was written.

    Raises:
        ValueError: If `samples` is empty or ids repeat.
        DatasetError: If the output path cannot be written.

    Example:
        ```python
        from protomargin.dataset import write_dataset
        from protomargin.synthgen import SynthConfig, generate_corpus

        samples = generate_corpus(SynthConfig(class_counts=(20, 20, 20)), master_seed=0)
        manifest = write_dataset(samples, "data/", ratios=(0.73, 0.12, 0.15))
        ```
    """
    if not samples:
        raise ValueError("write_dataset needs at least one sample")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")

    root = Path(out_dir)
    splits = stratified_split(samples, ratios=ratios, counts=counts)
    keep_fine = choose_fine_annotated(splits["train"], fine_annotated)

    entries: list[ManifestEntry] = []
    try:
        for name in SPLITS:
            split_dir = root / name
            split_dir.mkdir(parents=True, exist_ok=True)
            for sample in splits[name]:
                has_fine = sample.fine_mask is not None and (
                    name != "train" or sample.sample_id in keep_fine
                )
                files = {
                    "image": f"{name}/{sample.sample_id}_image.pgm",
                    "lesion_mask": f"{name}/{sample.sample_id}_lesion.pgm",
                }
                _write_pgm(root / files["image"], sample.image, 255.0)
                _write_pgm(root / files["lesion_mask"], sample.lesion_mask, 255.0)
                if has_fine:
                    files["fine_mask"] = f"{name}/{sample.sample_id}_fine.pgm"
                    assert sample.fine_mask is not None
                    _write_pgm(root / files["fine_mask"], sample.fine_mask, 255.0)
                entries.append(
                    ManifestEntry(
                        sample_id=sample.sample_id,
                        split=name,
                        margin_class=sample.margin_class.label,
                        malignant=bool(sample.y_mal),
                        has_fine_mask=has_fine,
                        seed=sample.seed,
                        confounder=sample.confounder_flag,
                        files=files,
                        spec=sample.spec.to_dict() if sample.spec is not None else None,
                    )
                )

        entries.sort(key=lambda e: e.sample_id)
        manifest = Manifest(root=root, entries=entries, image_size=samples[0].image.shape[0])
        manifest.path.write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc

    logger.info(
        "wrote dataset",
        extra={
            "root": str(root),
            "splits": manifest.split_counts(),
            "fine_annotated": sum(e.has_fine_mask for e in manifest.split("train")),
        },
    )
    return manifest


def load_sample(manifest: Manifest, entry: ManifestEntry) -> SynthSample:
    """Read one manifest entry back into a SynthSample."""
    image = _read_pgm(manifest.root / entry.files["image"]).astype(np.float64) / 255.0
    lesion = (_read_pgm(manifest.root / entry.files["lesion_mask"]) > 127).astype(np.uint8)
    fine = None
    if entry.has_fine_mask:
        fine = (_read_pgm(manifest.root / entry.files["fine_mask"]) > 127).astype(np.uint8)
    margin_class = MarginClass.parse(entry.margin_class)
    return SynthSample(
        sample_id=entry.sample_id,
        image=image,
        y_margin=int(margin_class),
        y_mal=int(entry.malignant),
        lesion_mask=lesion,
        fine_mask=fine,
        confounder_flag=entry.confounder,
        spec=LesionSpec.from_dict(entry.spec) if entry.spec else None,
        seed=entry.seed,
        metadata={"split": entry.split},
    )


def read_dataset(manifest_path: str | Path, split: str | None = None) -> list[SynthSample]:
    """
    Load samples of one split (or all splits) in id order.

    Raises:
        DatasetError: If the split is unknown or empty, or a file is missing.
    """
    manifest = Manifest.load(manifest_path)
    if split is not None and split not in SPLITS:
        raise DatasetError(f"Unknown split: {split}")
    entries = manifest.entries if split is None else manifest.split(split)
    if not entries:
        raise DatasetError(f"split {split!r} is empty in {manifest.path}")
    return [load_sample(manifest, e) for e in entries]


def read_training_samples(
    manifest_path: str | Path, include_val: bool = False
) -> list[SynthSample]:
    """
    Load the training set, optionally merged with the validation split.

    Validation samples carry fine masks for evaluation only; they join the
    merged set as coarse-only, so the fine-annotated subset keeps its
    configured size.
    """
    samples = read_dataset(manifest_path, "train")
    if not include_val:
        return samples
    val = [replace(s, fine_mask=None) for s in read_dataset(manifest_path, "val")]
    merged = sorted(samples + val, key=lambda s: s.sample_id)
    logger.info(
        "Merged train and val splits",
        extra={
            "samples": len(merged),
            "fine_annotated": sum(s.fine_mask is not None for s in merged),
        },
    )
    return merged


def manifest_hash(manifest_path: str | Path) -> str:
    """SHA-256 of the manifest file bytes."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError as exc:
        raise DatasetError(f"cannot hash manifest {path}: {exc}") from exc


def load_samples_by_id(manifest_path: str | Path, ids: Iterable[str]) -> dict[str, SynthSample]:
    """
    Load the named samples from any split.

    Raises:
        DatasetError: If an id is not in the manifest or its files are missing.
    """
    manifest = Manifest.load(manifest_path)
    by_id = {e.sample_id: e for e in manifest.entries}
    wanted = sorted(set(ids))
    unknown = [i for i in wanted if i not in by_id]
    if unknown:
        raise DatasetError(f"samples not in {manifest.path}: {', '.join(unknown)}")
    return {i: load_sample(manifest, by_id[i]) for i in wanted}


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale image file as float64 values in [0, 1]."""
    return _read_pgm(Path(path)).astype(np.float64) / 255.0
