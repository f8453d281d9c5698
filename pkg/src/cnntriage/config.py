"""Run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .classifier import TrainConfig, build_config
from .conglomerate import EnsembleSpec, TriagePolicy
from .dataset import QUOTED_BASELINE_WEIGHTS, ClassDistribution, ClassWeights, baseline_weights

BASELINE_MODES = ("inverse-frequency", "quoted")

# desk-scale preset applied by `prepare --synthetic` before file/flag overrides
SYNTHETIC_PRESET = {
    "arch": "tiny",
    "learning_rate": 1e-2,
    "batches_per_epoch": 25,
    "test_fraction": 1 / 6,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str = "data/HAM10000_metadata.csv"
    image_dir: str = "data/images"
    output_dir: str = "runs/default"
    model_store: str = ""  # defaults to <output_dir>/ensemble
    test_fraction: float = 0.5
    seed: int = 0
    resolution: tuple[int, int] | None = None  # defaults to the architecture's input
    arch: str = "vgg16"
    n: int = 5
    m: float = 10.0
    beta: float = 2.0
    tau: float = 3.0
    baseline: str = "inverse-frequency"
    learning_rate: float = 1e-6
    epochs: int = 20
    batch_size: int = 20
    batches_per_epoch: int = 70
    jobs: int = 1
    pretrained: str | None = None  # model store with converted conv weights
    synthetic_train: int = 500
    synthetic_test: int = 100

    def __post_init__(self):
        if not self.model_store:
            self.model_store = str(Path(self.output_dir) / "ensemble")
        if self.resolution is not None:
            self.resolution = tuple(int(v) for v in self.resolution)

    @property
    def input_resolution(self) -> tuple[int, int]:
        if self.resolution is not None:
            return self.resolution
        return build_config(self.arch).input_resolution

    def validate(self) -> None:
        try:
            net = build_config(self.arch)
            if self.resolution is not None and self.resolution != net.input_resolution:
                raise ConfigError(f"resolution {self.resolution} does not match the "
                                  f"{self.arch} input {net.input_resolution}")
            if not 0 < self.test_fraction < 1:
                raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
            if self.baseline not in BASELINE_MODES:
                raise ConfigError(f"baseline must be one of {BASELINE_MODES}")
            if self.jobs < 1:
                raise ConfigError("jobs must be >= 1")
            self.ensemble_spec(ClassWeights(1.0, 1.0))
            TriagePolicy(self.tau).check(self.m)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            batches_per_epoch=self.batches_per_epoch,
            seed=self.seed,
        )

    def ensemble_spec(self, baseline: ClassWeights) -> EnsembleSpec:
        return EnsembleSpec(n=self.n, m=self.m, beta=self.beta, baseline=baseline,
                            member_train=self.train_config())

    def baseline_weights(self, dist: ClassDistribution) -> ClassWeights:
        if self.baseline == "quoted":
            return QUOTED_BASELINE_WEIGHTS
        return baseline_weights(dist)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["resolution"] is not None:
            d["resolution"] = list(d["resolution"])
        return d

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_sources(cls, file_path: str | None = None, presets: dict | None = None,
                     overrides: dict | None = None) -> "RunConfig":
        """Defaults, then presets, then the JSON file, then flag overrides."""
        known = {f.name for f in fields(cls)}
        merged: dict = {}
        merged.update(presets or {})
        if file_path is not None:
            path = Path(file_path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
            unknown = set(data) - known
            if unknown:
                raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
            merged.update(data)
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
