"""Manifest ingestion, critical/non-critical relabeling, class statistics and
epoch batching for dermatoscopic image corpora (HAM10000 layout)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

DIAGNOSIS_CODES = ("nv", "mel", "bkl", "bcc", "akiec", "vasc", "df")
NONCRITICAL_CODES = frozenset({"nv"})
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

ID_COLUMNS = ("image_id", "id")
DX_COLUMNS = ("dx", "diagnosis", "diagnosis_code")


class DatasetError(Exception):
    """Base class for every data-side failure (CLI exit code 2)."""


class ManifestNotFoundError(DatasetError):
    pass


class MalformedRowError(DatasetError):
    pass


class UnknownDiagnosisError(DatasetError):
    pass


class MissingImageError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


class ClassBalanceError(DatasetError):
    pass


class BinaryLabel(IntEnum):
    # values double as the softmax output index
    CRITICAL = 0
    NONCRITICAL = 1

    @property
    def text(self) -> str:
        return "critical" if self is BinaryLabel.CRITICAL else "non-critical"

    @classmethod
    def parse(cls, text: str) -> "BinaryLabel":
        key = text.strip().lower().replace("_", "-")
        if key in ("critical", "c"):
            return cls.CRITICAL
        if key in ("non-critical", "noncritical", "nc"):
            return cls.NONCRITICAL
        raise ValueError(f"not a binary label: {text!r}")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    diagnosis_code: str
    image_path: Path

    @property
    def label(self) -> BinaryLabel:
        return relabel(self.diagnosis_code)


@dataclass(frozen=True)
class ClassDistribution:
    n_critical: int
    n_noncritical: int

    def __post_init__(self):
        if self.n_critical < 1 or self.n_noncritical < 1:
            raise ClassBalanceError(
                f"both classes required, got critical={self.n_critical} "
                f"non-critical={self.n_noncritical}"
            )

    @property
    def total(self) -> int:
        return self.n_critical + self.n_noncritical

    @property
    def f_critical(self) -> float:
        return self.n_critical / self.total

    @property
    def f_noncritical(self) -> float:
        return self.n_noncritical / self.total

    def to_dict(self) -> dict:
        return {
            "n_critical": self.n_critical,
            "n_noncritical": self.n_noncritical,
            "f_critical": self.f_critical,
            "f_noncritical": self.f_noncritical,
        }


@dataclass(frozen=True)
class ClassWeights:
    w_critical: float
    w_noncritical: float

    def __post_init__(self):
        for name in ("w_critical", "w_noncritical"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    def for_label(self, label: int) -> float:
        return self.w_critical if label == BinaryLabel.CRITICAL else self.w_noncritical

    def as_array(self) -> np.ndarray:
        """Weights indexed by output node."""
        return np.array([self.w_critical, self.w_noncritical], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"w_critical": self.w_critical, "w_noncritical": self.w_noncritical}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassWeights":
        return cls(float(d["w_critical"]), float(d["w_noncritical"]))


# Weights quoted for the 67/33 HAM10000 split; selectable as a manual override.
QUOTED_BASELINE_WEIGHTS = ClassWeights(1.3, 0.73)


@dataclass(frozen=True)
class EpochPlan:
    batches: tuple[tuple[Any, ...], ...]
    batch_size: int

    def ids(self) -> list[list[str]]:
        return [[_entry_id(e) for e in batch] for batch in self.batches]

    def to_json(self) -> str:
        return json.dumps(self.ids())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _entry_id(entry: Any) -> str:
    return entry.image_id if hasattr(entry, "image_id") else str(entry)


def relabel(diagnosis_code: str) -> BinaryLabel:
    if diagnosis_code not in DIAGNOSIS_CODES:
        raise UnknownDiagnosisError(f"unknown diagnosis code {diagnosis_code!r}")
    if diagnosis_code in NONCRITICAL_CODES:
        return BinaryLabel.NONCRITICAL
    return BinaryLabel.CRITICAL


def _pick_column(header: Sequence[str], candidates: Sequence[str]) -> str | None:
    lowered = {h.strip().lower(): h for h in header}
    for name in candidates:
        if name in lowered:
            return lowered[name]
    return None


def resolve_image(image_dir: Path, image_id: str) -> Path | None:
    direct = image_dir / image_id
    if direct.suffix.lower() in IMAGE_EXTENSIONS and direct.is_file():
        return direct
    for ext in IMAGE_EXTENSIONS:
        candidate = image_dir / f"{image_id}{ext}"
        if candidate.is_file():
            return candidate
    return None


def load_manifest(csv_path: str | Path, image_dir: str | Path) -> list[ManifestEntry]:
    """Parse a metadata CSV (columns ``image_id`` and ``dx``; extras ignored).

    Rows keep file order. Row numbers in errors count the header as row 1.
    """
    csv_path, image_dir = Path(csv_path), Path(image_dir)
    if not csv_path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {csv_path}")

    with csv_path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRowError(f"{csv_path}: row 1: empty file, header expected") from None
        id_col = _pick_column(header, ID_COLUMNS)
        dx_col = _pick_column(header, DX_COLUMNS)
        if id_col is None or dx_col is None:
            raise MalformedRowError(
                f"{csv_path}: row 1: header needs image_id and dx columns, got {header}"
            )
        id_idx, dx_idx = header.index(id_col), header.index(dx_col)

        entries = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise MalformedRowError(
                    f"{csv_path}: row {row_no}: expected {len(header)} fields, got {len(row)}"
                )
            image_id, code = row[id_idx].strip(), row[dx_idx].strip()
            if not image_id:
                raise MalformedRowError(f"{csv_path}: row {row_no}: empty image_id")
            if code not in DIAGNOSIS_CODES:
                raise UnknownDiagnosisError(
                    f"{csv_path}: row {row_no}: unknown diagnosis code {code!r}"
                )
            path = resolve_image(image_dir, image_id)
            if path is None:
                raise MissingImageError(
                    f"{csv_path}: row {row_no}: no image file for {image_id!r} in {image_dir}"
                )
            entries.append(ManifestEntry(image_id, code, path))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], csv_path: str | Path) -> None:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "dx"])
        for e in entries:
            writer.writerow([e.image_id, e.diagnosis_code])


def class_distribution(entries: Sequence[ManifestEntry]) -> ClassDistribution:
    if not entries:
        raise ClassBalanceError("empty entry list")
    n_crit = sum(1 for e in entries if relabel(e.diagnosis_code) is BinaryLabel.CRITICAL)
    return ClassDistribution(n_crit, len(entries) - n_crit)


def baseline_weights(dist: ClassDistribution) -> ClassWeights:
    """Inverse-frequency weights with mean 1 under the class distribution."""
    return ClassWeights(0.5 / dist.f_critical, 0.5 / dist.f_noncritical)


def make_epoch_plan(
    entries: Sequence[Any], batch_size: int, batches_per_epoch: int, seed: int
) -> EpochPlan:
    if batch_size < 1 or batches_per_epoch < 1:
        raise ValueError("batch_size and batches_per_epoch must be >= 1")
    needed = batch_size * batches_per_epoch
    if len(entries) < needed:
        raise DatasetError(
            f"epoch needs {needed} entries ({batches_per_epoch}x{batch_size}), have {len(entries)}"
        )
    order = np.random.default_rng(seed).permutation(len(entries))[:needed]
    batches = tuple(
        tuple(entries[i] for i in order[b * batch_size:(b + 1) * batch_size])
        for b in range(batches_per_epoch)
    )
    return EpochPlan(batches, batch_size)


def split(
    entries: Sequence[ManifestEntry], test_fraction: float, seed: int
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Stratified train/test split. Both halves keep the input's file order."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for label in BinaryLabel:
        members = [i for i, e in enumerate(entries) if e.label is label]
        n_test = int(round(len(members) * test_fraction))
        picked = rng.permutation(len(members))[:n_test]
        test_idx.update(members[j] for j in picked)
    train = [e for i, e in enumerate(entries) if i not in test_idx]
    test = [e for i, e in enumerate(entries) if i in test_idx]
    return train, test


def load_image(entry: ManifestEntry | str | Path, resolution: tuple[int, int]) -> np.ndarray:
    """Decode an RGB raster and bilinearly resize to ``(H, W)``, values in [0, 1]."""
    h, w = resolution
    if h < 1 or w < 1:
        raise ValueError(f"target resolution must be positive, got {resolution}")
    path = Path(entry.image_path if isinstance(entry, ManifestEntry) else entry)
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc

    if rgb.shape[:2] == (h, w):
        return rgb
    # per-channel float resize keeps full precision (no uint8 requantization)
    channels = []
    for c in range(3):
        plane = Image.fromarray(np.ascontiguousarray(rgb[..., c]))
        channels.append(np.asarray(plane.resize((w, h), Image.BILINEAR)))
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)
