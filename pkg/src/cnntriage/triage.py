"""Score a batch with an ensemble and order it from most to least critical."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from .classifier.layers import ShapeError
from .conglomerate import (
    Ensemble,
    TriagePolicy,
    VoteVector,
    classify,
    critical_index,
    member_probs,
    tiebreak_score,
)
from .dataset import BinaryLabel

CSV_COLUMNS = ("rank", "image_id", "index", "tiebreak", "label")


@dataclass(frozen=True)
class TriageRecord:
    image_id: str
    index: float
    tiebreak: float
    label: BinaryLabel
    rank: int = 0  # 0 until ordered

    def to_dict(self) -> dict:
        return {"rank": self.rank, "image_id": self.image_id, "index": self.index,
                "tiebreak": self.tiebreak, "label": self.label.text}

    @classmethod
    def from_dict(cls, d: dict) -> "TriageRecord":
        return cls(d["image_id"], float(d["index"]), float(d["tiebreak"]),
                   BinaryLabel.parse(d["label"]), int(d["rank"]))


@dataclass(frozen=True)
class TriageReport:
    policy: TriagePolicy
    ensemble_id: str
    records: tuple[TriageRecord, ...]
    timestamp: str

    def body(self) -> dict:
        """Everything except the timestamp."""
        return {"policy": {"threshold": self.policy.threshold},
                "ensemble_id": self.ensemble_id,
                "records": [r.to_dict() for r in self.records]}

    def to_dict(self) -> dict:
        return {**self.body(), "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d: dict) -> "TriageReport":
        return cls(TriagePolicy(float(d["policy"]["threshold"])), d["ensemble_id"],
                   tuple(TriageRecord.from_dict(r) for r in d["records"]), d["timestamp"])


def record_from_votes(image_id: str, v: VoteVector, m: float,
                      policy: TriagePolicy) -> TriageRecord:
    index = critical_index(v, m)
    return TriageRecord(image_id, index, tiebreak_score(v), classify(index, policy))


def score_batch(
    ensemble: Ensemble,
    images: Sequence[tuple[str, np.ndarray]],
    policy: TriagePolicy,
) -> list[TriageRecord]:
    """One unranked record per image, in input order."""
    if not images:
        raise ValueError("empty batch")
    policy.check(ensemble.spec.m)
    expected = (*ensemble.config.input_resolution, ensemble.config.in_channels)
    for image_id, img in images:
        if np.shape(img) != expected:
            raise ShapeError(f"image {image_id!r} has shape {np.shape(img)}, expected {expected}")
    probs = member_probs(ensemble, np.stack([img for _, img in images]))
    return [record_from_votes(image_id, VoteVector.from_probs(row), ensemble.spec.m, policy)
            for (image_id, _), row in zip(images, probs)]


def order(records: Sequence[TriageRecord], policy: TriagePolicy | None = None,
          ensemble_id: str = "", timestamp: str | None = None) -> TriageReport:
    """Sort by index desc, then tiebreak desc, then image_id asc; assign ranks 1..N."""
    if not records:
        raise ValueError("no records to order")
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate image_id in batch: {dupes}")
    ranked = sorted(records, key=lambda r: (-r.index, -r.tiebreak, r.image_id))
    ranked = tuple(replace(r, rank=i) for i, r in enumerate(ranked, start=1))
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return TriageReport(policy or TriagePolicy(), ensemble_id, ranked, timestamp)


def render_report(report: TriageReport, fmt: str = "text") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            w.writerow([r.rank, r.image_id, repr(r.index), repr(r.tiebreak), r.label.text])
        return buf.getvalue().encode("utf-8")
    if fmt == "text":
        width = max(8, *(len(r.image_id) for r in report.records))
        lines = [
            f"triage report  ensemble={report.ensemble_id}  "
            f"threshold={report.policy.threshold:g}  {report.timestamp}",
            f"{'rank':>4}  {'image_id':<{width}}  {'index':>5}  {'tiebreak':>8}  label",
        ]
        for r in report.records:
            lines.append(f"{r.rank:>4}  {r.image_id:<{width}}  {r.index:>5.2f}  "
                         f"{r.tiebreak:>8.4f}  {r.label.text}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(data: bytes) -> TriageReport:
    return TriageReport.from_dict(json.loads(data))
