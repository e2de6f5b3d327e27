"""Watermark task on redundant logits, and the joint embedding loops.

The watermark task turns a K-way classifier into a binary one without new
modules.  For one logit vector:

1. drop the indices of the k largest logits (ties break toward the lower
   index; the dropped logits are the non-redundant ones),
2. average the remaining logits inside the secret partition group and
   inside its complement; each average is over the members that survived
   the exclusion,
3. a two-way softmax over the two group means gives (p0, p1).

Averaging over the surviving members keeps both group means equivariant
under a uniform logit shift, so (p0, p1) and every watermark prediction are
shift-invariant, and iid noise added to the logits cancels at rate 2/K.
The exclusion mask is a constant during backpropagation: the watermark
loss has exactly zero gradient at top-k indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .data import Dataset, OODTriggerSet, PartitionKey, TriggerSet
from .errors import ConfigError, DimensionError
from .rng import generator


def top_k_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits; ties go to the lower index."""
    logits = np.asarray(logits).ravel()
    if k >= logits.size:
        raise ConfigError("k must be smaller than the number of logits")
    order = np.argsort(-logits, kind="stable")
    return np.sort(order[:k])


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean (n, K) mask of excluded indices, same tie rule per row."""
    logits = np.atleast_2d(logits)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _group_members(logits2d: np.ndarray, key: PartitionKey, k: int):
    """Per-row membership masks (group1, group0) after top-k exclusion."""
    if logits2d.shape[1] != key.K:
        raise DimensionError("logit width does not match partition key")
    excl = top_k_mask(logits2d, k)
    in1 = key.mask()[None, :] & ~excl
    in0 = ~key.mask()[None, :] & ~excl
    n1 = in1.sum(axis=1)
    n0 = in0.sum(axis=1)
    if (n1 == 0).any() or (n0 == 0).any():
        raise ConfigError("top-k exclusion emptied a partition group")
    return in1, in0, n1, n0


def wm_scores(logits: np.ndarray, key: PartitionKey, k: int):
    """Group-mean scores (s0, s1) for a batch of logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    in1, in0, n1, n0 = _group_members(logits, key, k)
    s1 = (logits * in1).sum(axis=1) / n1
    s0 = (logits * in0).sum(axis=1) / n0
    return s0, s1


def _sigmoid(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def wm_probs(logits: np.ndarray, key: PartitionKey, k: int):
    """(p0, p1) for one logit vector; p0 + p1 = 1."""
    s0, s1 = wm_scores(np.asarray(logits).reshape(1, -1), key, k)
    p1 = float(_sigmoid(s1 - s0)[0])
    return 1.0 - p1, p1


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def wm_loss_and_grad(logits: np.ndarray, wm_labels: np.ndarray,
                     key: PartitionKey, k: int):
    """Mean binary CE of the watermark task and its gradient wrt logits.

    Matches binary_cross_entropy_from_probs chained through wm_probs, but
    computed in the logit domain so saturated probabilities stay stable.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(wm_labels, dtype=np.float64).ravel()
    n = logits.shape[0]
    if y.shape[0] != n:
        raise DimensionError("wm_labels length does not match batch")
    in1, in0, n1, n0 = _group_members(logits, key, k)
    s1 = (logits * in1).sum(axis=1) / n1
    s0 = (logits * in0).sum(axis=1) / n0
    d = s1 - s0
    loss = float(np.mean(y * _softplus(-d) + (1.0 - y) * _softplus(d)))
    dd = (_sigmoid(d) - y) / n
    dlogits = dd[:, None] * (in1 / n1[:, None] - in0 / n0[:, None])
    return loss, dlogits


def predict_wm_from_logits(logits: np.ndarray, key: PartitionKey, k: int) -> np.ndarray:
    """Binary watermark predictions; a tie (s1 == s0) predicts 0."""
    s0, s1 = wm_scores(logits, key, k)
    return (s1 > s0).astype(np.int64)


def predict_wm(model, trigger, key: PartitionKey, k: int) -> np.ndarray:
    logits = model.forward(trigger.inputs)
    return predict_wm_from_logits(logits, key, k)


@dataclass
class EmbedConfig:
    """Training and embedding hyperparameters.

    ``delta`` weights the watermark loss (0 disables it and reproduces
    clean training bit-for-bit).  ``exclude_top_k`` must leave at least one
    logit in each partition group, i.e. k <= ceil(K/2) - 1.  The learning
    rate follows a fixed step schedule: base for the first half of the
    epochs, base/10 for the next quarter, base/100 for the rest.  After
    embedding, a short fine-tune on the main task at ``post_ft_lr`` repairs
    embedding damage.
    """

    delta: float = 0.25
    exclude_top_k: int = 3
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.05
    post_ft_lr: float = 1e-5
    post_ft_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: tuple = (512,)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self, K: int):
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if not 1 <= self.exclude_top_k <= math.ceil(K / 2) - 1:
            raise ConfigError("exclude_top_k must be in [1, ceil(K/2) - 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.post_ft_epochs > 0 and not self.post_ft_lr < self.base_lr:
            raise ConfigError("post_ft_lr must be well below base_lr")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("bad momentum or weight_decay")

    def arch(self, d: int, K: int) -> tuple:
        return (d, *self.hidden, K)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedConfig":
        dd = dict(d)
        if "hidden" in dd:
            dd["hidden"] = tuple(dd["hidden"])
        return cls(**dd)


def lr_multiplier(epoch: int, total: int) -> float:
    frac = epoch / total
    if frac < 0.5:
        return 1.0
    if frac < 0.75:
        return 0.1
    return 0.01


@dataclass
class EmbedResult:
    model: nn.ModelParams
    curve: list = field(default_factory=list)  # per-epoch dict rows


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _train_phase(model, cfg: EmbedConfig, data: Dataset, epochs, lr_for_epoch,
                 shuffle_rng, aux=None, aux_rng=None, curve=None, epoch_offset=0,
                 accw_eval=None):
    """Shared epoch loop for clean, watermark, and baseline training.

    ``aux`` is None, ("iwe", trigger, key, k, delta) or ("ood", oodset,
    delta).  Main batches sweep a fresh permutation each epoch; aux batches
    are drawn with replacement from an independent stream.
    """
    state = nn.OptimizerState.for_model(model, cfg.base_lr, cfg.momentum,
                                        cfg.weight_decay)
    x_train, y_train = data.train_x, data.train_y
    for epoch in range(epochs):
        state.learning_rate = lr_for_epoch(epoch)
        sum_main, sum_wm, n_batches = 0.0, 0.0, 0
        for idx in _epoch_batches(len(y_train), cfg.batch_size, shuffle_rng):
            logits, acts = nn.forward_trace(model, x_train[idx])
            loss_main, dlogits = nn.cross_entropy(logits, y_train[idx])
            grads = nn.backprop(model, acts, dlogits)
            loss_wm = 0.0
            if aux is not None and aux[-1] != 0.0:
                if aux[0] == "iwe":
                    _, trig, pkey, k, delta = aux
                    pick = aux_rng.integers(0, len(trig), size=cfg.batch_size)
                    wlogits, wacts = nn.forward_trace(model, trig.inputs[pick])
                    loss_wm, wdlogits = wm_loss_and_grad(
                        wlogits, trig.wm_labels[pick], pkey, k)
                else:
                    _, ood, delta = aux
                    pick = aux_rng.integers(0, len(ood), size=cfg.batch_size)
                    wlogits, wacts = nn.forward_trace(model, ood.inputs[pick])
                    loss_wm, wdlogits = nn.cross_entropy(wlogits, ood.labels[pick])
                wgrads = nn.backprop(model, wacts, wdlogits)
                for gw, ww in zip(grads[0], wgrads[0]):
                    gw += delta * ww
                for gb, wb in zip(grads[1], wgrads[1]):
                    gb += delta * wb
            nn.sgd_step(model, grads, state)
            sum_main += loss_main
            sum_wm += loss_wm
            n_batches += 1
        if curve is not None:
            row = {"epoch": epoch_offset + epoch,
                   "loss_main": sum_main / n_batches,
                   "loss_wm": sum_wm / n_batches,
                   "acc": _eval_acc(model, data),
                   "acc_w": accw_eval(model) if accw_eval else float("nan")}
            curve.append(row)
    return model


def _eval_acc(model, data: Dataset) -> float:
    pred = model.forward(data.test_x).argmax(axis=1)
    return float(np.mean(pred == data.test_y))


def _check_trigger_binding(data: Dataset, trigger: TriggerSet):
    m = trigger.n_pairs
    if trigger.base_indices.max(initial=0) >= len(data.train_y):
        raise ConfigError("trigger base indices outside the train split")
    if not np.array_equal(trigger.inputs[:m], data.train_x[trigger.base_indices]):
        raise ConfigError("trigger base rows do not match the dataset train split")


def _run_embedding(data: Dataset, cfg: EmbedConfig, seed: int, aux,
                   record_curve: bool, accw_eval=None) -> EmbedResult:
    model = nn.init_model(cfg.arch(data.d, data.K), seed)
    shuffle_rng = generator(seed, "shuffle")
    aux_rng = generator(seed, "auxbatch")
    curve: list | None = [] if record_curve else None
    _train_phase(model, cfg, data, cfg.epochs,
                 lambda e: cfg.base_lr * lr_multiplier(e, cfg.epochs),
                 shuffle_rng, aux=aux, aux_rng=aux_rng, curve=curve,
                 accw_eval=accw_eval)
    if cfg.post_ft_epochs > 0:
        _train_phase(model, cfg, data, cfg.post_ft_epochs,
                     lambda e: cfg.post_ft_lr, shuffle_rng, curve=curve,
                     epoch_offset=cfg.epochs, accw_eval=accw_eval)
    model.check_finite()
    return EmbedResult(model, curve if curve is not None else [])


def train_clean(data: Dataset, cfg: EmbedConfig, seed: int,
                record_curve: bool = False) -> EmbedResult:
    """Main-task-only training; the delta = 0 degenerate of embed_iwe."""
    cfg.validate(data.K)
    return _run_embedding(data, cfg, seed, aux=None, record_curve=record_curve)


def embed_iwe(data: Dataset, trigger: TriggerSet, key: PartitionKey,
              cfg: EmbedConfig, seed: int, record_curve: bool = True) -> EmbedResult:
    """Joint main + watermark training, then the low-lr repair fine-tune."""
    cfg.validate(data.K)
    if key.K != data.K:
        raise ConfigError("partition key does not match dataset classes")
    _check_trigger_binding(data, trigger)
    aux = None if cfg.delta == 0 else ("iwe", trigger, key, cfg.exclude_top_k, cfg.delta)

    def accw_eval(model):
        pred = predict_wm(model, trigger, key, cfg.exclude_top_k)
        return float(np.mean(pred == trigger.wm_labels))

    return _run_embedding(data, cfg, seed, aux, record_curve, accw_eval)


def embed_ood_baseline(data: Dataset, ood: OODTriggerSet, delta: float,
                       cfg: EmbedConfig, seed: int, record_curve: bool = True) -> EmbedResult:
    """Classic backdoor baseline: K-way CE on an out-of-distribution trigger."""
    cfg.validate(data.K)
    if ood.labels.min(initial=0) < 0 or ood.labels.max(initial=0) >= data.K:
        raise ConfigError("OOD labels outside [0, K)")
    aux = None if delta == 0 else ("ood", ood, delta)

    def accw_eval(model):
        pred = model.forward(ood.inputs).argmax(axis=1)
        return float(np.mean(pred == ood.labels))

    return _run_embedding(data, cfg, seed, aux, record_curve, accw_eval)
