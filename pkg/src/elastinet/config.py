"""Run configuration: one JSON file drives the whole pipeline.

A run directory is reproducible from its config alone: all randomness flows
from the seeds recorded here.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import Dataset, load_cifar10_binary, split_dataset, synth_dataset
from .search import SearchParams
from .space import ArchSpace, desk_space
from .training import ScheduleOverrides


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"          # synthetic | cifar10
    path: str | None = None            # cifar10 directory
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    separation: float = 4.0
    seed: int = 0


@dataclass(frozen=True)
class LatencyConfig:
    mode: str = "mac_linear"           # mac_linear | file
    alpha: float = 1e-6
    beta: float = 0.01
    path: str | None = None


@dataclass
class RunConfig:
    space: ArchSpace = field(default_factory=desk_space)
    overrides: ScheduleOverrides = field(
        default_factory=lambda: ScheduleOverrides(epoch_scale=0.1,
                                                  epoch_floor=3,
                                                  batch_size=64))
    data: DataConfig = field(default_factory=DataConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    search: SearchParams = field(default_factory=SearchParams)
    seed: int = 0
    out_dir: str = "run"
    probe_every: int = 0               # 0: probe at stage ends only
    collect_n: int = 2000
    naive_epochs: int | None = None    # default: total PS epochs
    eval_batch: int = 256

    def to_dict(self) -> dict:
        d = {
            "space": self.space.to_dict(),
            "overrides": asdict(self.overrides),
            "data": asdict(self.data),
            "latency": asdict(self.latency),
            "search": asdict(self.search),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "probe_every": self.probe_every,
            "collect_n": self.collect_n,
            "naive_epochs": self.naive_epochs,
            "eval_batch": self.eval_batch,
        }
        if math.isinf(d["search"]["constraint_ms"]):
            d["search"]["constraint_ms"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            search = dict(d.get("search", {}))
            if search.get("constraint_ms") is None:
                search["constraint_ms"] = math.inf
            return cls(
                space=ArchSpace.from_dict(d["space"]) if "space" in d else desk_space(),
                overrides=ScheduleOverrides(**d.get("overrides", {})),
                data=DataConfig(**d.get("data", {})),
                latency=LatencyConfig(**d.get("latency", {})),
                search=SearchParams(**search),
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "run")),
                probe_every=int(d.get("probe_every", 0)),
                collect_n=int(d.get("collect_n", 2000)),
                naive_epochs=d.get("naive_epochs"),
                eval_batch=int(d.get("eval_batch", 256)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad run config: {e}") from e

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e


def prepare_datasets(cfg: RunConfig) -> dict[str, Dataset]:
    """Build the train/val/test splits.  Validation is carved out of the
    training data; the test split is only read by eval and reporting."""
    dc = cfg.data
    if dc.source == "synthetic":
        resolution = max(cfg.space.resolution_choices)
        total = dc.n_train + dc.n_val + dc.n_test
        full = synth_dataset(total, cfg.space.n_classes, resolution,
                             seed=dc.seed, separation=dc.separation)
        return split_dataset(full, {"train": dc.n_train, "val": dc.n_val,
                                    "test": dc.n_test}, seed=dc.seed)
    if dc.source == "cifar10":
        if not dc.path:
            raise ConfigError("cifar10 source needs data.path")
        train, test = load_cifar10_binary(dc.path)
        carved = split_dataset(train, {"train": len(train) - dc.n_val,
                                       "val": dc.n_val}, seed=dc.seed)
        carved["test"] = test
        return carved
    raise ConfigError(f"unknown data source {dc.source!r}")
