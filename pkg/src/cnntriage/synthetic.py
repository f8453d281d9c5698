"""Seeded synthetic lesion images for offline runs.

Non-critical images show a small, round, evenly coloured mole. Critical images
carry a ``severity`` in (0, 1]: as it grows the lesion gets larger, darker,
more irregular in outline and more mottled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import BinaryLabel

SKIN = np.array([0.87, 0.70, 0.60])
MOLE = np.array([0.58, 0.40, 0.30])
DARK = np.array([0.18, 0.08, 0.12])
CRITICAL_CODES = ("mel", "bcc", "akiec", "bkl", "df", "vasc")


@dataclass
class SyntheticSet:
    ids: list[str]
    codes: list[str]
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # 0 = critical
    severity: np.ndarray  # 0 for non-critical

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "SyntheticSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SyntheticSet([self.ids[i] for i in idx], [self.codes[i] for i in idx],
                            self.images[idx], self.labels[idx], self.severity[idx])


def render_lesion(rng: np.random.Generator, size: int, severity: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    cy, cx = rng.uniform(-0.15, 0.15, 2)
    r = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)

    radius = rng.uniform(0.28, 0.38) + 0.25 * severity
    wobble = sum(
        severity * rng.uniform(0.05, 0.12) * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
        for k in (3, 5, 7)
    )
    edge = radius * (1 + wobble)
    mask = 1 / (1 + np.exp((r - edge) / 0.03))

    colour = MOLE + severity * (DARK - MOLE) + rng.normal(0, 0.03, 3)
    mottling = severity * 0.18 * rng.normal(0, 1, (size, size, 1))
    lesion = colour + mottling
    skin = SKIN + rng.normal(0, 0.03, 3) + rng.normal(0, 0.015, (size, size, 3))
    img = skin * (1 - mask[..., None]) + lesion * mask[..., None]
    return np.clip(img, 0, 1).astype(np.float32)


def make_synthetic(
    n: int,
    seed: int,
    size: int = 32,
    critical_fraction: float = 1 / 3,
    severity_range: tuple[float, float] = (0.3, 1.0),
    prefix: str = "syn",
) -> SyntheticSet:
    rng = np.random.default_rng(seed)
    n_crit = int(round(n * critical_fraction))
    labels = np.array([BinaryLabel.CRITICAL] * n_crit + [BinaryLabel.NONCRITICAL] * (n - n_crit),
                      dtype=np.intp)
    labels = labels[rng.permutation(n)]
    severity = np.where(labels == BinaryLabel.CRITICAL, rng.uniform(*severity_range, n), 0.0)
    images = np.stack([render_lesion(rng, size, s) for s in severity])
    ids = [f"{prefix}_{i:05d}" for i in range(n)]
    codes = [CRITICAL_CODES[i % len(CRITICAL_CODES)] if lab == BinaryLabel.CRITICAL else "nv"
             for i, lab in enumerate(labels)]
    return SyntheticSet(ids, codes, images, labels, severity)


def write_synthetic(data: SyntheticSet, directory: str | Path) -> Path:
    """PNG per image under ``images/`` plus ``metadata.csv`` (image_id, dx, severity)."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for image_id, img in zip(data.ids, data.images):
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(img_dir / f"{image_id}.png")
    manifest = directory / "metadata.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "dx", "severity"])
        for image_id, code, s in zip(data.ids, data.codes, data.severity):
            w.writerow([image_id, code, f"{s:.6f}"])
    return manifest
