"""Experiment configuration: one JSON document drives everything.

The config's root ``seed`` is the only source of randomness; every stage
derives its own stream from it (see iwelab.rng), so two runs of the same
config produce bit-identical artifacts on one backend and one thread.  No
environment variables are consulted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .data import (AugmentationSpec, Dataset, OODTriggerSet, PartitionKey,
                   TriggerSet, build_ood_trigger_set, build_trigger_set,
                   gen_gaussians, gen_patches, make_partition_key)
from .errors import ConfigError
from .persist import config_hash
from .rng import child_seed
from .watermark import EmbedConfig


def default_config() -> dict:
    spread = 0.7
    return {
        "seed": 20260809,
        "dataset": {"kind": "gaussians", "K": 10, "d": 8, "n_per_class": 200,
                    "n_test_per_class": 100, "spread": spread, "jitter": 0.1},
        "embed": {"delta": 0.5, "exclude_top_k": 3, "epochs": 30,
                  "batch_size": 64, "base_lr": 0.05, "post_ft_lr": 1e-5,
                  "post_ft_epochs": 1, "momentum": 0.9, "weight_decay": 5e-4,
                  "hidden": [512]},
        "trigger": {"classes": [8, 9], "fraction": 0.5,
                    "aug": {"kind": "rotation", "theta": math.pi / 2,
                            "plane": [0, 1]}},
        "ood": {"m": 100, "offset": 3.0 + 10.0 * spread, "delta": 0.1,
                "threshold": 0.5},
        "population": {"n_models": 20, "alpha": 0.05},
        "watermarked": {"n_models": 20},
        "attacks": {
            "ft": {"lr0": 0.05, "decay": 0.9, "epochs": 60},
            "ft_sweep": [0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            "fp": {"fraction": 0.99, "ft_lr": 0.01, "ft_epochs": 30},
            "prune_curve": [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 0.99],
            "kd": {"tau": 10.0, "lam": 0.5, "epochs": 40, "lr": 0.05},
            "kd_settings": [{"tau": 1.0, "lam": 0.0},
                            {"tau": 2.0, "lam": 0.5},
                            {"tau": 10.0, "lam": 0.5}],
            "noise": {"sigmas": [0.5, 1.0, 2.0], "trials": 2000,
                      "kind": "gaussian", "curve_K": [4, 10, 20]},
            "security": {"n_aug": 8},
        },
    }


@dataclass
class ExperimentConfig:
    """Validated view over the config document."""

    doc: dict = field(default_factory=default_config)

    def __post_init__(self):
        base = default_config()
        merged = _merge(base, self.doc or {})
        _check_keys(merged, base, path="")
        self.doc = merged
        self.embed = EmbedConfig.from_dict(merged["embed"])
        ds = merged["dataset"]
        if ds["kind"] not in ("gaussians", "patches"):
            raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
        if ds["kind"] == "patches" and ds["d"] != 64:
            raise ConfigError("patches datasets are 8x8, set d=64")
        self.embed.validate(ds["K"])
        if not isinstance(merged["seed"], int):
            raise ConfigError("seed must be an integer")

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def alpha(self) -> float:
        return self.doc["population"]["alpha"]

    def hash(self) -> str:
        return config_hash(self.doc)

    def stream(self, *labels) -> int:
        return child_seed(self.seed, *labels)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        doc = json.loads(json.dumps(self.doc))
        doc["seed"] = int(seed)
        return ExperimentConfig(doc)

    # ---- materialization -------------------------------------------------

    def make_dataset(self) -> Dataset:
        ds = self.doc["dataset"]
        seed = self.stream("data")
        if ds["kind"] == "gaussians":
            return gen_gaussians(seed, K=ds["K"], d=ds["d"],
                                 n_per_class=ds["n_per_class"],
                                 spread=ds["spread"],
                                 n_test_per_class=ds["n_test_per_class"])
        return gen_patches(seed, K=ds["K"], n_per_class=ds["n_per_class"],
                           jitter=ds.get("jitter", 0.1),
                           n_test_per_class=ds["n_test_per_class"])

    def make_aug_spec(self) -> AugmentationSpec:
        spec = AugmentationSpec.from_dict(self.doc["trigger"]["aug"])
        if self.doc["dataset"]["kind"] == "patches":
            spec.grid = spec.kind == "rotation"
            spec.clamp = spec.kind == "color"
        return spec

    def make_trigger(self, data: Dataset) -> TriggerSet:
        t = self.doc["trigger"]
        return build_trigger_set(data, t["classes"], t["fraction"],
                                 self.make_aug_spec(), self.stream("trigger"))

    def make_key(self) -> PartitionKey:
        return make_partition_key(self.doc["dataset"]["K"], self.stream("key"))

    def make_ood_trigger(self) -> OODTriggerSet:
        o = self.doc["ood"]
        ds = self.doc["dataset"]
        d = 64 if ds["kind"] == "patches" else ds["d"]
        return build_ood_trigger_set(self.stream("ood"), o["m"], d, ds["K"],
                                     offset=o["offset"])


def _merge(base, override):
    if isinstance(base, dict) and isinstance(override, dict):
        out = dict(base)
        for k, v in override.items():
            out[k] = _merge(base[k], v) if k in base else v
        return out
    return override


def _check_keys(doc, base, path):
    if not isinstance(base, dict) or not isinstance(doc, dict):
        return
    for k in doc:
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            _check_keys(doc[k], base[k], path + k + ".")


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return ExperimentConfig(doc)
