"""n-member ensemble of class-weight-biased binary classifiers whose averaged
critical votes form a critical index on a 0..m scale."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classifier import (
    Model,
    NetworkConfig,
    TrainConfig,
    init_model,
    load_model,
    predict_proba,
    save_model,
    train,
)
from .classifier.store import ModelStoreError
from .classifier.training import ImageSource, TrainResult
from .dataset import BinaryLabel, ClassWeights

log = logging.getLogger(__name__)

ENSEMBLE_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, member: int, cause: BaseException):
        super().__init__(f"member {member} failed: {cause}")
        self.member = member


@dataclass(frozen=True)
class EnsembleSpec:
    n: int = 5
    m: float = 10.0
    beta: float = 2.0
    baseline: ClassWeights = field(default_factory=lambda: ClassWeights(1.0, 1.0))
    member_train: TrainConfig = field(default_factory=TrainConfig)
    member_seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.m > 0:
            raise ValueError(f"m must be > 0, got {self.m}")
        if not self.beta >= 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if not self.member_seeds:
            object.__setattr__(self, "member_seeds",
                               tuple(self.member_train.seed + k for k in range(self.n)))
        object.__setattr__(self, "member_seeds", tuple(int(s) for s in self.member_seeds))
        if len(self.member_seeds) != self.n:
            raise ValueError(f"{len(self.member_seeds)} member seeds for n={self.n}")
        if len(set(self.member_seeds)) != self.n:
            raise ValueError("member seeds must be distinct")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "beta": self.beta,
            "baseline": self.baseline.to_dict(),
            "member_train": self.member_train.to_dict(),
            "member_seeds": list(self.member_seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        return cls(
            n=int(d["n"]),
            m=float(d["m"]),
            beta=float(d["beta"]),
            baseline=ClassWeights.from_dict(d["baseline"]),
            member_train=TrainConfig.from_dict(d["member_train"]),
            member_seeds=tuple(d["member_seeds"]),
        )


@dataclass
class Ensemble:
    spec: EnsembleSpec
    members: list[Model]
    member_weights: list[ClassWeights]

    def __post_init__(self):
        if len(self.members) != self.spec.n or len(self.member_weights) != self.spec.n:
            raise ValueError(f"ensemble needs {self.spec.n} members and weight pairs")
        if any(mem.config != self.members[0].config for mem in self.members[1:]):
            raise ValueError("all members must share one topology")

    @property
    def config(self) -> NetworkConfig:
        return self.members[0].config

    @property
    def identifier(self) -> str:
        """Content hash of the ensemble spec, weights and every member tensor."""
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for w in self.member_weights:
            h.update(json.dumps(w.to_dict(), sort_keys=True).encode())
        for mem in self.members:
            for layer, pname, arr in mem.tensors():
                h.update(f"{layer}.{pname}".encode())
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class VoteVector:
    votes: tuple[bool, ...]
    critical_probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.votes) != len(self.critical_probs):
            raise ValueError("votes and critical_probs differ in length")
        for v, p in zip(self.votes, self.critical_probs):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")
            if v != (p > 0.5):
                raise ValueError("vote must equal critical_prob > 0.5")

    @classmethod
    def from_probs(cls, critical_probs: Sequence[float]) -> "VoteVector":
        probs = tuple(float(p) for p in critical_probs)
        return cls(tuple(p > 0.5 for p in probs), probs)

    @property
    def n(self) -> int:
        return len(self.votes)


@dataclass(frozen=True)
class TriagePolicy:
    threshold: float = 3.0

    def check(self, m: float) -> None:
        if not 0 < self.threshold < m:
            raise ValueError(f"threshold must lie in (0, {m}), got {self.threshold}")


def delta(n: int, m: float) -> float:
    """Smallest gap between consecutive attainable index values."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not m > 0:
        raise ValueError(f"m must be > 0, got {m}")
    return m / n


def attainable_indices(n: int, m: float) -> list[float]:
    return [m * k / n for k in range(n + 1)]


def weight_schedule(spec: EnsembleSpec) -> list[ClassWeights]:
    """Member k gets ``(w_c * g_k, w_nc / g_k)`` with ``g_k = beta ** (1 - 2k/(n-1))``.

    The first member favours the critical class by beta, the last member
    favours the non-critical class by beta, the middle one keeps the baseline.
    """
    base = spec.baseline
    if spec.n == 1:
        return [base]
    out = []
    for k in range(spec.n):
        g = spec.beta ** (1 - 2 * k / (spec.n - 1))
        out.append(ClassWeights(base.w_critical * g, base.w_noncritical / g))
    return out


def _train_member(k: int, spec: EnsembleSpec, config: NetworkConfig, source: ImageSource,
                  weights: ClassWeights, init: Callable[[int], Model] | None) -> TrainResult:
    seed = spec.member_seeds[k]
    tc = replace(spec.member_train, class_weights=weights, seed=seed)
    model = init(seed) if init is not None else init_model(config, seed)
    if model.config != config:
        raise ValueError("initializer returned a model with a different topology")

    def report(epoch, loss):
        log.info("member %d epoch %d loss %.5f", k, epoch, loss)

    return train(model, source, tc, on_epoch=report)


def train_ensemble(
    spec: EnsembleSpec,
    config: NetworkConfig,
    source: ImageSource,
    jobs: int = 1,
    init: Callable[[int], Model] | None = None,
) -> tuple[Ensemble, list[TrainResult]]:
    """Train the n members independently; they differ only in class weights and seed.

    ``init(seed)`` may supply starting weights (e.g. converted pretrained
    blocks); the default is a seeded He-uniform init.
    """
    schedule = weight_schedule(spec)

    def run(k):
        try:
            return _train_member(k, spec, config, source, schedule[k], init)
        except Exception as exc:
            raise TrainingError(k, exc) from exc

    if jobs > 1 and spec.n > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, spec.n)) as pool:
            results = list(pool.map(run, range(spec.n)))
    else:
        results = [run(k) for k in range(spec.n)]
    return Ensemble(spec, [r.model for r in results], schedule), results


def member_probs(ensemble: Ensemble, images: np.ndarray) -> np.ndarray:
    """(N, n) critical-node probabilities, columns in member order."""
    return np.stack([predict_proba(mem, images)[:, BinaryLabel.CRITICAL]
                     for mem in ensemble.members], axis=1)


def vote(ensemble: Ensemble, image: np.ndarray) -> VoteVector:
    return VoteVector.from_probs(member_probs(ensemble, image)[0])


def vote_batch(ensemble: Ensemble, images: np.ndarray) -> list[VoteVector]:
    return [VoteVector.from_probs(row) for row in member_probs(ensemble, images)]


def critical_index(v: VoteVector, m: float) -> float:
    return m * sum(v.votes) / v.n


def classify(index: float, policy: TriagePolicy) -> BinaryLabel:
    return BinaryLabel.CRITICAL if index > policy.threshold else BinaryLabel.NONCRITICAL


def tiebreak_score(v: VoteVector) -> float:
    """Mean critical-node output across members."""
    return float(np.mean(v.critical_probs))


def save_ensemble(ensemble: Ensemble, directory: str | Path) -> Path:
    """``ensemble.json`` plus ``member_<k>/`` model stores; written atomically."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-ensemble-", dir=directory.parent))
    try:
        members = []
        for k, (mem, w) in enumerate(zip(ensemble.members, ensemble.member_weights)):
            save_model(mem, tmp / f"member_{k}")
            members.append({"dir": f"member_{k}", "seed": ensemble.spec.member_seeds[k],
                            "weights": w.to_dict()})
        meta = {"format_version": ENSEMBLE_FORMAT_VERSION,
                "spec": ensemble.spec.to_dict(), "members": members}
        (tmp / "ensemble.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        if directory.exists():
            shutil.rmtree(directory)
        tmp.rename(directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_ensemble(directory: str | Path) -> Ensemble:
    directory = Path(directory)
    meta_path = directory / "ensemble.json"
    if not meta_path.is_file():
        raise ModelStoreError(f"no ensemble.json in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != ENSEMBLE_FORMAT_VERSION:
        raise ModelStoreError(f"{meta_path}: unsupported format version "
                              f"{meta.get('format_version')!r}")
    spec = EnsembleSpec.from_dict(meta["spec"])
    members, weights = [], []
    config = None
    for entry in meta["members"]:
        mem = load_model(directory / entry["dir"], expected_config=config)
        config = mem.config
        members.append(mem)
        weights.append(ClassWeights.from_dict(entry["weights"]))
    return Ensemble(spec, members, weights)
