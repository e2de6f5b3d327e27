"""Watermark-erasure and adaptive attacks.

All attackers hold the adversary split (20% of the training rows) and know
the embedding scheme but not the trigger set or partition key.  Training
attacks (distillation, fine-tuning, fine-pruning) return new parameter
sets; the adaptive logit attacks return a wrapped model whose ``forward``
tampers with the victim's outputs, which is how a stolen deployment would
behave during verification.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, PartitionKey, make_partition_key
from .errors import ConfigError
from .nn import ModelParams, l2_distance
from .rng import child_seed, generator
from .verify import CleanPopulation, acc, acc_on, acc_w, verify
from .watermark import (lr_multiplier, predict_wm_from_logits, top_k_mask,
                        _epoch_batches)

ATTACK_KINDS = ("kd", "ft", "fp", "noise", "replace")


@dataclass
class AttackConfig:
    """Hyperparameters for one attack family.

    kd: student loss lam*CE(student, labels) + (1-lam)*CE over softened
    logits at temperature tau; (tau=1, lam=0) is plain model extraction.
    ft: initial lr decayed by ft_decay every epoch for ft_epochs.
    fp: zero the lowest prune_fraction of last-hidden units by mean
    activation, then repair at prune_ft_lr for prune_ft_epochs.
    noise: iid logit noise with mean noise_mu and std noise_sigma.
    """

    kind: str = "ft"
    lam: float = 0.5
    tau: float = 10.0
    kd_epochs: int = 40
    kd_lr: float = 0.05
    ft_lr0: float = 0.05
    ft_decay: float = 0.9
    ft_epochs: int = 60
    prune_fraction: float = 0.99
    prune_ft_lr: float = 0.01
    prune_ft_epochs: int = 30
    noise_kind: str = "gaussian"
    noise_mu: float = 0.0
    noise_sigma: float = 1.0
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.tau < 1.0:
            raise ConfigError("distillation temperature must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must be in [0, 1]")
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ConfigError("prune_fraction must be in [0, 1)")
        if self.noise_kind not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown noise kind {self.noise_kind!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")


@dataclass
class AttackReport:
    kind: str
    config: dict
    delta_acc: float        # pre-minus-post main accuracy, in points
    post_accw: float
    post_verdict: int | None
    wall_time: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config,
                "delta_acc": self.delta_acc, "post_accw": self.post_accw,
                "post_verdict": self.post_verdict, "wall_time": self.wall_time}


def evaluate_attack(kind: str, config: dict, victim, attacked, data: Dataset,
                    trigger, key: PartitionKey, k: int,
                    population: CleanPopulation | None = None,
                    alpha: float = 0.05, wall_time: float = 0.0) -> AttackReport:
    """Assemble the standard report for one (victim, attack) pair."""
    delta = acc_on(victim, data) - acc_on(attacked, data)
    post_accw = acc_w(attacked, trigger, key, k)
    verdict = None
    if population is not None:
        verdict = verify(attacked, trigger, key, k, population, alpha).verdict
    return AttackReport(kind, config, delta, post_accw, verdict, wall_time)


class QueryCountingModel:
    """Black-box view of a victim: logits only, counting queried samples."""

    def __init__(self, model: ModelParams):
        self._model = model
        self.queries = 0

    def forward(self, inputs) -> np.ndarray:
        self.queries += np.atleast_2d(inputs).shape[0]
        return self._model.forward(inputs)


@dataclass
class KDResult:
    model: ModelParams
    queries: int


def attack_kd(victim: ModelParams, data: Dataset, student_arch,
              cfg: AttackConfig, seed: int) -> KDResult:
    """Train a student on the adversary split against the victim's logits.

    With lam = 1 the distillation term is off and the victim is never
    queried; with lam = 0, tau = 1 this is the classic extraction attack.
    """
    teacher = QueryCountingModel(victim)
    student = nn.init_model(tuple(student_arch), child_seed(seed, "kd-student"))
    state = nn.OptimizerState.for_model(student, cfg.kd_lr, cfg.momentum,
                                        cfg.weight_decay)
    rng = generator(seed, "kd-batches")
    ax, ay = data.adversary_x, data.adversary_y
    for epoch in range(cfg.kd_epochs):
        state.learning_rate = cfg.kd_lr * lr_multiplier(epoch, cfg.kd_epochs)
        for idx in _epoch_batches(len(ay), cfg.batch_size, rng):
            logits, acts = nn.forward_trace(student, ax[idx])
            dlogits = np.zeros_like(logits)
            if cfg.lam > 0:
                _, g_hard = nn.cross_entropy(logits, ay[idx])
                dlogits += cfg.lam * g_hard
            if cfg.lam < 1:
                t_probs = nn.softmax(teacher.forward(ax[idx]) / cfg.tau)
                _, g_soft = nn.soft_cross_entropy(logits, t_probs, cfg.tau)
                dlogits += (1.0 - cfg.lam) * g_soft
            nn.sgd_step(student, nn.backprop(student, acts, dlogits), state)
    return KDResult(student, teacher.queries)


def attack_ft(victim: ModelParams, data: Dataset, cfg: AttackConfig,
              seed: int) -> ModelParams:
    """REFIT-style fine-tune: large initial lr decayed geometrically."""
    model = victim.copy()
    state = nn.OptimizerState.for_model(model, cfg.ft_lr0, cfg.momentum,
                                        cfg.weight_decay)
    rng = generator(seed, "ft-batches")
    ax, ay = data.adversary_x, data.adversary_y
    for epoch in range(cfg.ft_epochs):
        state.learning_rate = cfg.ft_lr0 * cfg.ft_decay ** epoch
        for idx in _epoch_batches(len(ay), cfg.batch_size, rng):
            logits, acts = nn.forward_trace(model, ax[idx])
            _, dlogits = nn.cross_entropy(logits, ay[idx])
            nn.sgd_step(model, nn.backprop(model, acts, dlogits), state)
    return model


def unit_importance(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Mean post-relu activation of the last hidden layer per unit."""
    return nn.hidden_activations(model, inputs).mean(axis=0)


def prune_units(model: ModelParams, unit_ids) -> ModelParams:
    """Zero the weights into and out of the given last-hidden units."""
    pruned = model.copy()
    ids = np.asarray(unit_ids, dtype=np.int64)
    if ids.size:
        pruned.weights[-2][ids, :] = 0.0
        pruned.biases[-2][ids] = 0.0
        pruned.weights[-1][:, ids] = 0.0
    return pruned


def prune_only(victim: ModelParams, data: Dataset, fraction: float) -> ModelParams:
    """First stage of fine-pruning, without the repair fine-tune."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("prune_fraction must be in [0, 1)")
    importance = unit_importance(victim, data.adversary_x)
    order = np.argsort(importance, kind="stable")
    n_prune = math.floor(fraction * importance.size)
    return prune_units(victim, order[:n_prune])


def attack_prune(victim: ModelParams, data: Dataset, cfg: AttackConfig,
                 seed: int) -> ModelParams:
    """Fine-pruning: prune low-activation units, then low-lr repair.

    The pruned units stay masked during the repair fine-tune.
    """
    importance = unit_importance(victim, data.adversary_x)
    order = np.argsort(importance, kind="stable")
    n_prune = math.floor(cfg.prune_fraction * importance.size)
    pruned_ids = order[:n_prune]
    model = prune_units(victim, pruned_ids)
    if cfg.prune_ft_epochs == 0:
        return model
    state = nn.OptimizerState.for_model(model, cfg.prune_ft_lr, cfg.momentum,
                                        cfg.weight_decay)
    rng = generator(seed, "fp-batches")
    ax, ay = data.adversary_x, data.adversary_y
    for _ in range(cfg.prune_ft_epochs):
        for idx in _epoch_batches(len(ay), cfg.batch_size, rng):
            logits, acts = nn.forward_trace(model, ax[idx])
            _, dlogits = nn.cross_entropy(logits, ay[idx])
            nn.sgd_step(model, nn.backprop(model, acts, dlogits), state)
            if pruned_ids.size:
                model.weights[-2][pruned_ids, :] = 0.0
                model.biases[-2][pruned_ids] = 0.0
                model.weights[-1][:, pruned_ids] = 0.0
    return model


@dataclass
class NoiseRobustnessSummary:
    baseline_accw: float
    mean_accw: float
    verdict_flip_rate: float | None
    group1_noise_var: float
    group0_noise_var: float
    predicted_var: float    # 2 sigma^2 / K

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def attack_noise_logits(victim, trigger, key: PartitionKey, k: int,
                        cfg: AttackConfig, trials: int, seed: int,
                        threshold: float | None = None) -> NoiseRobustnessSummary:
    """Add iid noise to every logit before the watermark readout.

    The group-mean noise variance is measured over the full partition
    groups (the quantity the 2 sigma^2 / K law describes); exclusion only
    shrinks groups by k << K, which the summary ignores.
    """
    base = victim.forward(trigger.inputs)
    labels = np.asarray(trigger.wm_labels)
    baseline = float(np.mean(predict_wm_from_logits(base, key, k) == labels))
    base_verdict = None if threshold is None else int(baseline >= threshold)

    rng = generator(seed, "logit-noise")
    key_mask = key.mask()
    accs = np.empty(trials)
    flips = 0
    s1 = s1sq = s0 = s0sq = 0.0
    n_means = 0
    for t in range(trials):
        if cfg.noise_kind == "gaussian":
            xi = cfg.noise_mu + cfg.noise_sigma * rng.standard_normal(base.shape)
        else:
            half = math.sqrt(3.0) * cfg.noise_sigma
            xi = cfg.noise_mu + rng.uniform(-half, half, size=base.shape)
        noisy = base + xi
        accs[t] = np.mean(predict_wm_from_logits(noisy, key, k) == labels)
        if threshold is not None and int(accs[t] >= threshold) != base_verdict:
            flips += 1
        m1 = xi[:, key_mask].mean(axis=1)
        m0 = xi[:, ~key_mask].mean(axis=1)
        s1 += m1.sum()
        s1sq += (m1 ** 2).sum()
        s0 += m0.sum()
        s0sq += (m0 ** 2).sum()
        n_means += m1.size
    var1 = s1sq / n_means - (s1 / n_means) ** 2 if n_means else 0.0
    var0 = s0sq / n_means - (s0 / n_means) ** 2 if n_means else 0.0
    return NoiseRobustnessSummary(
        baseline_accw=baseline,
        mean_accw=float(accs.mean()),
        verdict_flip_rate=None if threshold is None else flips / trials,
        group1_noise_var=float(var1),
        group0_noise_var=float(var0),
        predicted_var=2.0 * cfg.noise_sigma ** 2 / key.K,
    )


class LogitReplacementModel:
    """Victim wrapper returning fake values at the redundant logit slots.

    Top-k logits always pass through untouched; asking to replace them is
    a contract violation, not a supported mode.
    """

    def __init__(self, victim, k: int, source="gaussian", seed: int = 0,
                 replace_top_k: bool = False):
        if replace_top_k:
            raise ConfigError("replacement at top-k indices is not allowed")
        if not (source == "gaussian" or isinstance(source, ModelParams)):
            raise ConfigError("source must be 'gaussian' or a ModelParams")
        self._victim = victim
        self._k = k
        self._source = source
        self._rng = generator(seed, "replace")

    def forward(self, inputs) -> np.ndarray:
        base = self._victim.forward(inputs)
        keep = top_k_mask(base, self._k)
        if isinstance(self._source, ModelParams):
            repl = self._source.forward(inputs)
        else:
            repl = self._rng.standard_normal(base.shape)
        return np.where(keep, base, repl)


def attack_replace_logits(victim, data: Dataset, trigger, key: PartitionKey,
                          k: int, source, seed: int,
                          population: CleanPopulation | None = None,
                          alpha: float = 0.05) -> AttackReport:
    """Replace redundant logits during verification; report the outcome."""
    start = time.perf_counter()
    tampered = LogitReplacementModel(victim, k, source, seed)
    label = "model" if isinstance(source, ModelParams) else str(source)
    return evaluate_attack("replace", {"source": label, "k": k}, victim,
                           tampered, data, trigger, key, k, population, alpha,
                           time.perf_counter() - start)


@dataclass
class ForgedTrigger:
    """Fake credit matching a victim by construction."""

    inputs: np.ndarray
    wm_labels: np.ndarray


def forge_trigger(victim: ModelParams, m: int, k: int, seed: int):
    """Arbitrary inputs labeled with the victim's own watermark readout
    under a random fake partition key; returns (trigger, fake_key)."""
    if m < 2:
        raise ConfigError("forged trigger needs m >= 2")
    rng = generator(seed, "forge-inputs")
    inputs = 3.0 * rng.standard_normal((m, victim.input_dim))
    fake_key = make_partition_key(victim.n_classes, child_seed(seed, "forge-key"))
    labels = predict_wm_from_logits(victim.forward(inputs), fake_key, k)
    return ForgedTrigger(inputs, labels), fake_key


@dataclass
class OwnershipClaim:
    """One party's evidence: the disputed model, a shadow model, and a credit."""

    primary: ModelParams
    shadow: ModelParams
    trigger: object
    key: PartitionKey
    k: int


@dataclass
class DoubleModelReport:
    distance_a: float
    distance_b: float
    qualified_a: bool
    qualified_b: bool
    winner: str | None   # "a", "b", or None


def double_model_check(claim_a: OwnershipClaim, claim_b: OwnershipClaim,
                       data: Dataset, accw_threshold: float,
                       acc_margin: float = 0.02) -> DoubleModelReport:
    """Tie-break between two ownership claims over the same model.

    A claim qualifies when its shadow model matches the claimed trigger
    (acc_w at or above the population threshold), has utility comparable
    to the disputed model, and is not parameter-identical to it.  Among
    qualified claims the larger parameter distance wins: a true owner can
    retrain from scratch, a thief can only nudge the stolen weights.
    """
    def assess(claim: OwnershipClaim):
        dist = l2_distance(claim.primary, claim.shadow)
        matches = acc_w(claim.shadow, claim.trigger, claim.key, claim.k) >= accw_threshold
        comparable = abs(acc_on(claim.shadow, data) - acc_on(claim.primary, data)) <= acc_margin
        return dist, bool(matches and comparable and dist > 0.0)

    dist_a, ok_a = assess(claim_a)
    dist_b, ok_b = assess(claim_b)
    if ok_a and ok_b:
        winner = "a" if dist_a > dist_b else ("b" if dist_b > dist_a else None)
    elif ok_a or ok_b:
        winner = "a" if ok_a else "b"
    else:
        winner = None
    return DoubleModelReport(dist_a, dist_b, ok_a, ok_b, winner)
