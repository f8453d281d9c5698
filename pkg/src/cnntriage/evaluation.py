"""Per-class accuracy at a critical threshold, confusion counts and index
histograms. Member forwards run once; thresholds are applied to cached votes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier.training import ImageSource
from .conglomerate import Ensemble, TriagePolicy, attainable_indices, member_probs
from .dataset import BinaryLabel, ClassBalanceError


@dataclass(frozen=True)
class VoteCache:
    """Critical-node probabilities (N, n) with true labels (N,)."""

    probs: np.ndarray
    labels: np.ndarray
    m: float

    @property
    def n_members(self) -> int:
        return self.probs.shape[1]

    def indices(self) -> np.ndarray:
        return self.m * (self.probs > 0.5).sum(axis=1) / self.n_members


@dataclass(frozen=True)
class EvalResult:
    threshold: float
    n_critical: int
    n_noncritical: int
    acc_critical: float
    acc_noncritical: float
    # rows: true critical / non-critical; columns: predicted critical / non-critical
    confusion: tuple[tuple[int, int], tuple[int, int]]
    index_histogram: dict[float, int]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_critical": self.n_critical,
            "n_noncritical": self.n_noncritical,
            "acc_critical": self.acc_critical,
            "acc_noncritical": self.acc_noncritical,
            "confusion": [list(row) for row in self.confusion],
            "index_histogram": {f"{k:g}": v for k, v in self.index_histogram.items()},
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def write_histogram_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "count"])
            for k, v in self.index_histogram.items():
                w.writerow([f"{k:g}", v])


def collect_votes(ensemble: Ensemble, source: ImageSource, chunk: int = 100) -> VoteCache:
    parts = []
    for start in range(0, len(source), chunk):
        idx = list(range(start, min(start + chunk, len(source))))
        parts.append(member_probs(ensemble, source.batch(idx)))
    probs = np.concatenate(parts, axis=0) if parts else np.zeros((0, ensemble.spec.n))
    return VoteCache(probs, np.asarray(source.labels, dtype=np.intp), ensemble.spec.m)


def evaluate_votes(cache: VoteCache, policy: TriagePolicy) -> EvalResult:
    policy.check(cache.m)
    labels = cache.labels
    is_crit = labels == BinaryLabel.CRITICAL
    n_c, n_nc = int(is_crit.sum()), int((~is_crit).sum())
    if n_c == 0 or n_nc == 0:
        raise ClassBalanceError(
            f"test set needs both classes, got critical={n_c} non-critical={n_nc}"
        )
    idx = cache.indices()
    pred_crit = idx > policy.threshold
    tp = int(np.sum(pred_crit & is_crit))
    tn = int(np.sum(~pred_crit & ~is_crit))
    grid = attainable_indices(cache.n_members, cache.m)
    votes = (cache.probs > 0.5).sum(axis=1)
    hist = {g: int(np.sum(votes == k)) for k, g in enumerate(grid)}
    return EvalResult(
        threshold=policy.threshold,
        n_critical=n_c,
        n_noncritical=n_nc,
        acc_critical=tp / n_c,
        acc_noncritical=tn / n_nc,
        confusion=((tp, n_c - tp), (n_nc - tn, tn)),
        index_histogram=hist,
    )


def evaluate(ensemble: Ensemble, test_set: ImageSource | VoteCache,
             policy: TriagePolicy) -> EvalResult:
    cache = test_set if isinstance(test_set, VoteCache) else collect_votes(ensemble, test_set)
    return evaluate_votes(cache, policy)


def sweep_threshold(ensemble: Ensemble | None, test_set: ImageSource | VoteCache,
                    thresholds: Sequence[float]) -> list[tuple[float, EvalResult]]:
    """Evaluate several thresholds off one set of member forwards."""
    if isinstance(test_set, VoteCache):
        cache = test_set
    else:
        if ensemble is None:
            raise ValueError("an ensemble is required unless votes are cached")
        cache = collect_votes(ensemble, test_set)
    return [(float(t), evaluate_votes(cache, TriagePolicy(float(t)))) for t in thresholds]
