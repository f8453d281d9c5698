"""Mini-batch SGD training loop over an epoch/batch plan."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ..dataset import ClassWeights, ManifestEntry, load_image, make_epoch_plan
from .network import Model, loss_and_gradients, predict_proba, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-6
    epochs: int = 20
    batch_size: int = 20
    batches_per_epoch: int = 70
    class_weights: ClassWeights = field(default_factory=lambda: ClassWeights(1.0, 1.0))
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("batch_size and batches_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = self.class_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["class_weights"] = ClassWeights.from_dict(d["class_weights"])
        return cls(**d)


class ImageSource(Protocol):
    labels: np.ndarray

    def __len__(self) -> int: ...

    def batch(self, indices: Sequence[int]) -> np.ndarray: ...


class ArraySource:
    """In-memory images (N, H, W, C) with integer labels (0 = critical)."""

    def __init__(self, images: np.ndarray, labels, ids: Sequence[str] | None = None):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.intp)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    def batch(self, indices):
        return self.images[np.asarray(indices, dtype=np.intp)]


class ManifestSource:
    """Decodes manifest images lazily; memory stays bounded for full-size corpora."""

    def __init__(self, entries: Sequence[ManifestEntry], resolution: tuple[int, int],
                 cache: bool = False):
        self.entries = list(entries)
        self.resolution = tuple(resolution)
        self.labels = np.array([int(e.label) for e in self.entries], dtype=np.intp)
        self.ids = [e.image_id for e in self.entries]
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def _get(self, i: int) -> np.ndarray:
        if self._cache is None:
            return load_image(self.entries[i], self.resolution)
        if i not in self._cache:
            self._cache[i] = load_image(self.entries[i], self.resolution)
        return self._cache[i]

    def batch(self, indices):
        return np.stack([self._get(int(i)) for i in indices])


@dataclass
class TrainResult:
    model: Model
    # (epoch, batch, mean batch loss), both 0-based
    trace: list[tuple[int, int, float]]

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for e, _, loss in self.trace:
            by_epoch.setdefault(e, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: Model,
    source: ImageSource,
    tc: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``epochs x batches_per_epoch`` SGD steps on ``model`` (mutated in place).

    Each epoch draws a fresh without-replacement sample of
    ``batch_size * batches_per_epoch`` items; the step direction is the mean
    of per-example gradients.
    """
    trace = []
    index = list(range(len(source)))
    for epoch in range(tc.epochs):
        plan = make_epoch_plan(index, tc.batch_size, tc.batches_per_epoch,
                               epoch_seed(tc.seed, epoch))
        for b, batch in enumerate(plan.batches):
            loss, grads = loss_and_gradients(
                model, source.batch(batch), source.labels[list(batch)], tc.class_weights
            )
            sgd_step(model, grads, tc.learning_rate)
            trace.append((epoch, b, loss))
        mean = float(np.mean([t[2] for t in trace if t[0] == epoch]))
        log.debug("epoch %d mean loss %.5f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return TrainResult(model, trace)


def accuracy(model: Model, source: ImageSource, chunk: int = 100) -> float:
    correct = 0
    for start in range(0, len(source), chunk):
        idx = list(range(start, min(start + chunk, len(source))))
        probs = predict_proba(model, source.batch(idx))
        # exact 0.5 counts as non-critical, matching the ensemble vote rule
        pred = np.where(probs[:, 0] > 0.5, 0, 1)
        correct += int(np.sum(pred == source.labels[idx]))
    return correct / len(source)


def write_loss_trace(trace, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "loss"])
        for epoch, batch, loss in trace:
            w.writerow([epoch, batch, repr(float(loss))])
