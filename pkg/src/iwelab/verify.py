"""Ownership statistics and hypothesis-test verification.

The test statistic is watermark accuracy on the secret trigger set.  A
population of clean models (same data and architecture, no trigger in
training, distinct seeds) defines the null distribution; the threshold is
its empirical (1 - alpha) quantile and a suspect model is flagged as
watermarked when its statistic reaches the threshold.

Quantile rule: with n sorted samples, the threshold is the g-th smallest
where g = ceil((1 - alpha) * (n + 1)), clipped to [1, n].  For alpha = 0.05
and n = 20 this is the sample maximum, which gives a fresh clean model an
exceedance probability of 1/21, i.e. a false positive rate of about 5%.
The verdict comparison is non-strict: statistic >= threshold rejects the
clean-model hypothesis.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import persist
from .data import Dataset, OODTriggerSet, PartitionKey, TriggerSet
from .errors import ConfigError, NumericError, VerificationError
from .nn import ModelParams
from .watermark import EmbedConfig, predict_wm, train_clean

MIN_POPULATION = 20


def acc(model, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions."""
    if len(labels) == 0:
        raise ConfigError("empty evaluation split")
    pred = model.forward(inputs).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def acc_on(model, data: Dataset, split: str = "test") -> float:
    x, y = data.split(split)
    return acc(model, x, y)


def acc_w(model, trigger, key: PartitionKey, k: int) -> float:
    """Watermark-task accuracy on the trigger set."""
    pred = predict_wm(model, trigger, key, k)
    return float(np.mean(pred == np.asarray(trigger.wm_labels)))


def ood_trigger_acc(model, ood: OODTriggerSet) -> float:
    return acc(model, ood.inputs, ood.labels)


def quantile_threshold(samples, alpha: float) -> float:
    """(1 - alpha) quantile via the (n + 1) order-statistic rule."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    if s.size == 0:
        raise VerificationError("no samples to take a quantile of")
    if not 0 <= alpha <= 1:
        raise ConfigError("alpha must be in [0, 1]")
    g = math.ceil((1.0 - alpha) * (s.size + 1))
    g = min(max(g, 1), s.size)
    return float(s[g - 1])


@dataclass
class VerificationReport:
    accw: float
    threshold: float
    alpha: float
    verdict: int
    population_id: str

    def __post_init__(self):
        want = 1 if self.accw >= self.threshold else 0
        if self.verdict != want:
            raise VerificationError("verdict inconsistent with threshold")

    def to_json(self) -> str:
        return json.dumps({"acc_w": self.accw, "threshold": self.threshold,
                           "alpha": self.alpha, "verdict": self.verdict,
                           "population": self.population_id}, sort_keys=True)


@dataclass
class CleanPopulation:
    """Clean models plus their statistic samples under one (T, key, k)."""

    models: list
    seeds: list
    acc_samples: np.ndarray
    accw_samples: np.ndarray
    config_hash: str
    ood_acc_samples: np.ndarray | None = None
    failures: list | None = None
    config: dict | None = None

    def __len__(self) -> int:
        return len(self.accw_samples)


def population_config(data: Dataset, cfg: EmbedConfig, trigger: TriggerSet,
                      key: PartitionKey, seeds, ood: OODTriggerSet | None = None) -> dict:
    doc = {
        "dataset": {"kind": data.kind, "seed": data.seed, "K": data.K, "d": data.d,
                    "params": {k: v for k, v in data.params.items() if k != "means"}},
        "train": cfg.to_dict(),
        "trigger_hash": persist.array_hash(trigger.inputs, trigger.wm_labels),
        "key": list(key.indices),
        "k": cfg.exclude_top_k,
        "seeds": [int(s) for s in seeds],
    }
    if ood is not None:
        doc["ood_hash"] = persist.array_hash(ood.inputs, ood.labels)
    return doc


def _train_one_clean(args):
    data, cfg, seed = args
    return train_clean(data, cfg, seed).model


def build_clean_population(data: Dataset, cfg: EmbedConfig, trigger: TriggerSet,
                           key: PartitionKey, seeds, ood: OODTriggerSet | None = None,
                           cache_dir=None, jobs: int = 1) -> CleanPopulation:
    """Train (or load) the clean-model population and record its statistics.

    Seeds that diverge are recorded as failures; the population is valid
    only if at least MIN_POPULATION models survive.  With ``cache_dir``
    the population is content-addressed by its config hash and reloaded
    on a rerun instead of retrained.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(set(seeds)):
        raise ConfigError("population seeds must be distinct")
    conf = population_config(data, cfg, trigger, key, seeds, ood)
    chash = persist.config_hash(conf)
    if cache_dir is not None:
        pop_dir = Path(cache_dir) / chash[:16]
        if (pop_dir / "manifest.json").exists():
            return load_population(pop_dir, expected_hash=chash)

    models, ok_seeds, failures = [], [], []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one_clean,
                                    [(data, cfg, s) for s in seeds]))
        for seed, model in zip(seeds, results):
            models.append(model)
            ok_seeds.append(seed)
    else:
        for seed in seeds:
            try:
                models.append(train_clean(data, cfg, seed).model)
                ok_seeds.append(seed)
            except NumericError as exc:
                failures.append({"seed": seed, "error": str(exc)})
    if len(models) < MIN_POPULATION:
        raise VerificationError(
            f"only {len(models)} clean models trained, need >= {MIN_POPULATION}")

    accs = np.array([acc_on(m, data) for m in models])
    accws = np.array([acc_w(m, trigger, key, cfg.exclude_top_k) for m in models])
    oods = np.array([ood_trigger_acc(m, ood) for m in models]) if ood is not None else None
    pop = CleanPopulation(models, ok_seeds, accs, accws, chash, oods, failures, conf)
    if cache_dir is not None:
        save_population(Path(cache_dir) / chash[:16], pop)
    return pop


def save_population(pop_dir, pop: CleanPopulation):
    pop_dir = Path(pop_dir)
    pop_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (model, seed) in enumerate(zip(pop.models, pop.seeds)):
        name = f"clean_{i:03d}"
        persist.save_model(pop_dir / name, model, {"seed": seed})
        names.append(name)
    manifest = {"config_hash": pop.config_hash,
                "config": pop.config,
                "seeds": pop.seeds,
                "models": names,
                "acc": [float(a) for a in pop.acc_samples],
                "accw": [float(a) for a in pop.accw_samples],
                "ood_acc": None if pop.ood_acc_samples is None
                else [float(a) for a in pop.ood_acc_samples],
                "failures": pop.failures or []}
    (pop_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_population(pop_dir, expected_hash: str | None = None) -> CleanPopulation:
    pop_dir = Path(pop_dir)
    try:
        manifest = json.loads((pop_dir / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no population manifest in {pop_dir}")
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise VerificationError(
            f"population at {pop_dir} was built for a different config; refusing to reuse")
    models = [persist.load_model(pop_dir / name)[0] for name in manifest["models"]]
    ood = manifest.get("ood_acc")
    return CleanPopulation(models, manifest["seeds"],
                           np.array(manifest["acc"]), np.array(manifest["accw"]),
                           manifest["config_hash"],
                           None if ood is None else np.array(ood),
                           manifest.get("failures"), manifest.get("config"))


def verify(model, trigger, key: PartitionKey, k: int,
           population: CleanPopulation, alpha: float = 0.05) -> VerificationReport:
    """Hypothesis-test verdict for one suspect model."""
    if len(population) < MIN_POPULATION:
        raise VerificationError("population too small for verification")
    t = quantile_threshold(population.accw_samples, alpha)
    a = acc_w(model, trigger, key, k)
    return VerificationReport(a, t, alpha, 1 if a >= t else 0,
                              population.config_hash)


def verify_ood_population(model, ood: OODTriggerSet,
                          population: CleanPopulation,
                          alpha: float = 0.05) -> VerificationReport:
    """Same test with the K-way OOD trigger accuracy as the statistic."""
    if population.ood_acc_samples is None:
        raise VerificationError("population has no OOD statistic samples")
    if len(population) < MIN_POPULATION:
        raise VerificationError("population too small for verification")
    t = quantile_threshold(population.ood_acc_samples, alpha)
    a = ood_trigger_acc(model, ood)
    return VerificationReport(a, t, alpha, 1 if a >= t else 0,
                              population.config_hash)


def tpr_at_fpr(reports) -> float:
    """Mean verdict over watermarked (possibly attacked) models."""
    reports = list(reports)
    if not reports:
        raise VerificationError("no verification reports")
    pop_ids = {r.population_id for r in reports}
    alphas = {r.alpha for r in reports}
    if len(pop_ids) != 1 or len(alphas) != 1:
        raise VerificationError("reports must share one population and alpha")
    return float(np.mean([r.verdict for r in reports]))


def verify_ood_baseline(model, ood: OODTriggerSet, threshold: float) -> int:
    """Legacy fixed-threshold verification for the OOD baseline."""
    if not (1.0 / ood.K) < threshold < 1.0:
        raise ConfigError("threshold must be strictly inside (1/K, 1)")
    return 1 if ood_trigger_acc(model, ood) > threshold else 0
