"""Run configuration files: training hyperparameters plus a dataset section."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .data import SplitDataset, gen_synthetic, load_dataset
from .trainer import ConfigError, TrainConfig

SYNTHETIC_DEFAULTS = {
    "num_classes": 15,
    "videos_per_class": 20,
    "noise_sigma": 0.3,
    "warp_strength": 0.25,
    "seed": 42,
    "split_sizes": [10, 0, 5],
    "n_freq": 3,
    "latent_dim": 8,
    "shared_weight": 0.6,
}


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    dataset: dict
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        dataset = d.pop("dataset", {"source": "synthetic"})
        output_dir = d.pop("output_dir", "runs/default")
        if not isinstance(output_dir, str):
            raise ConfigError("output_dir must be a string")
        train = TrainConfig.from_dict(d)
        return cls(train, normalize_dataset(dataset, train), output_dir)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "dataset": self.dataset, "output_dir": self.output_dir}


def normalize_dataset(section: dict, train: TrainConfig) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("dataset section must be an object")
    section = dict(section)
    source = section.pop("source", "synthetic")
    if source == "files":
        unknown = set(section) - {"index_path"}
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        if "index_path" not in section:
            raise ConfigError("dataset.source 'files' requires index_path")
        return {"source": "files", "index_path": str(section["index_path"])}
    if source != "synthetic":
        raise ConfigError(f"dataset.source must be 'synthetic' or 'files', got {source!r}")
    params = dict(section.pop("synthetic", {}))
    if section:
        raise ConfigError(f"unknown dataset keys: {sorted(section)}")
    unknown = set(params) - set(SYNTHETIC_DEFAULTS) - {"T", "C"}
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
    for dim in ("T", "C"):
        if dim in params and params[dim] != getattr(train, dim):
            raise ConfigError(f"synthetic {dim}={params[dim]} disagrees with config {dim}={getattr(train, dim)}")
    merged = {**SYNTHETIC_DEFAULTS, **params}
    if merged["noise_sigma"] < 0 or not 0 <= merged["warp_strength"] <= 1:
        raise ConfigError("noise_sigma must be >= 0 and warp_strength in [0, 1]")
    return {"source": "synthetic", "synthetic": merged}


def build_dataset(section: dict, train: TrainConfig) -> SplitDataset:
    if section["source"] == "files":
        return load_dataset(section["index_path"])
    p = section["synthetic"]
    return gen_synthetic(p["num_classes"], p["videos_per_class"], train.T, train.C, p["noise_sigma"],
                         p["warp_strength"], p["seed"], p["split_sizes"], p["n_freq"],
                         p["latent_dim"], p["shared_weight"])
