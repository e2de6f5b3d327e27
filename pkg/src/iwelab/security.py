"""Closed-form guessing-odds calculators and empirical separability probes.

The calculators use exact big-integer binomials and rational arithmetic,
converted to float only for display, so the K = 100 bound (below 1e-28)
comes out exact rather than as overflow noise.

The separability probe stands in for the distinguishing classifier in the
out-of-distribution failure argument: a logistic probe (single linear
layer plus sigmoid, same training machinery as the main models) is fitted
to tell two input sets apart and reports held-out AUC.  A supplied model
additionally yields an activation-overlap score, the cosine similarity of
the mean last-hidden activations of the two sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nn
from .errors import ConfigError
from .rng import child_seed, generator


@dataclass
class GuessingOdds:
    """Exact forgery odds for (trigger set, partition key) guessing."""

    K: int
    K_prime: int
    n_aug: int
    p1: float
    p2: float
    p_success: float
    p1_exact: str
    p2_exact: str
    p_success_exact: str

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def partition_count(K: int) -> int:
    """Number of possible partition keys, C(K, ceil(K/2))."""
    return math.comb(K, math.ceil(K / 2))


def guessing_odds(K: int, K_prime: int, n_aug: int) -> GuessingOdds:
    """P1 = K'/K * 1/N_aug, P2 = 1/C(K, ceil(K/2)), P_success = P1*P2."""
    if not 1 <= K_prime < K:
        raise ConfigError("need 1 <= K' < K")
    if n_aug < 1:
        raise ConfigError("n_aug must be >= 1")
    p1 = Fraction(K_prime, K) * Fraction(1, n_aug)
    p2 = Fraction(1, partition_count(K))
    ps = p1 * p2
    return GuessingOdds(K, K_prime, n_aug, float(p1), float(p2), float(ps),
                        f"{p1.numerator}/{p1.denominator}",
                        f"{p2.numerator}/{p2.denominator}",
                        f"{ps.numerator}/{ps.denominator}")


@dataclass
class NoiseCancellationRow:
    K: int
    sigma: float
    predicted_var: float
    empirical_var: float
    std_error: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def noise_cancellation_curve(Ks, sigma: float, trials: int, kind: str = "gaussian",
                             seed: int = 0) -> list:
    """Monte-Carlo check of the group-mean noise variance law 2 sigma^2 / K.

    Each trial averages K/2 iid noise draws (one partition group); the
    empirical variance of that mean is compared to the prediction.  The
    reported standard error uses the empirical fourth moment, so the
    3-standard-error acceptance band is valid for uniform noise too.
    """
    if trials < 1000:
        raise ConfigError("need at least 1000 trials")
    if kind not in ("gaussian", "uniform"):
        raise ConfigError(f"unknown noise kind {kind!r}")
    rows = []
    for K in Ks:
        group = math.ceil(K / 2)
        rng = generator(seed, "noise-curve", K, kind)
        if sigma == 0:
            means = np.zeros(trials)
        elif kind == "gaussian":
            means = sigma * rng.standard_normal((trials, group)).mean(axis=1)
        else:
            half = math.sqrt(3.0) * sigma
            means = rng.uniform(-half, half, size=(trials, group)).mean(axis=1)
        centered = means - means.mean()
        m2 = float((centered ** 2).mean())
        m4 = float((centered ** 4).mean())
        n = trials
        var_of_var = max((m4 - m2 ** 2 * (n - 3) / (n - 1)) / n, 0.0)
        rows.append(NoiseCancellationRow(
            K=int(K), sigma=sigma,
            predicted_var=sigma ** 2 / group,
            empirical_var=m2 * n / (n - 1),
            std_error=math.sqrt(var_of_var)))
    return rows


def auc_score(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Rank AUC (Mann-Whitney) with ties counted half."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    both = np.concatenate([pos, neg])
    order = np.argsort(both, kind="stable")
    ranks = np.empty_like(both)
    # midranks for ties
    sorted_vals = both[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


@dataclass
class SeparabilityReport:
    auc: float
    activation_overlap: float | None

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def separability_probe(normal: np.ndarray, other: np.ndarray, seed: int,
                       model=None, epochs: int = 120, lr: float = 0.2) -> SeparabilityReport:
    """Train a logistic probe to distinguish two input sets; held-out AUC.

    Each set is shuffled and split in half; the probe trains on the first
    halves and the AUC is computed on the second.  The AUC is oriented to
    be >= 0.5.  With ``model`` given, also reports the cosine similarity
    between the mean last-hidden activations of the two full sets.
    """
    normal = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    other = np.atleast_2d(np.asarray(other, dtype=np.float64))
    if len(normal) < 50 or len(other) < 50:
        raise ConfigError("separability probe needs >= 50 samples per side")
    rng = generator(seed, "probe-split")
    normal = normal[rng.permutation(len(normal))]
    other = other[rng.permutation(len(other))]
    h0, h1 = len(normal) // 2, len(other) // 2
    x_tr = np.concatenate([normal[:h0], other[:h1]])
    y_tr = np.concatenate([np.zeros(h0), np.ones(h1)])
    x_te_neg, x_te_pos = normal[h0:], other[h1:]

    # standardize on the train halves; keeps the logistic fit well-scaled
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd == 0] = 1.0

    probe = nn.init_model((normal.shape[1], 1), child_seed(seed, "probe-init"))
    state = nn.OptimizerState.for_model(probe, lr, momentum=0.9, weight_decay=0.0)
    batch_rng = generator(seed, "probe-batches")
    zx = (x_tr - mu) / sd
    for _ in range(epochs):
        perm = batch_rng.permutation(len(y_tr))
        for start in range(0, len(y_tr), 64):
            idx = perm[start:start + 64]
            z, acts = nn.forward_trace(probe, zx[idx])
            p = 1.0 / (1.0 + np.exp(-z[:, 0]))
            dz = ((p - y_tr[idx]) / len(idx))[:, None]
            nn.sgd_step(probe, nn.backprop(probe, acts, dz), state)

    s_neg = probe.forward((x_te_neg - mu) / sd)[:, 0]
    s_pos = probe.forward((x_te_pos - mu) / sd)[:, 0]
    a = auc_score(s_pos, s_neg)
    a = max(a, 1.0 - a)

    overlap = None
    if model is not None:
        m_norm = nn.hidden_activations(model, normal).mean(axis=0)
        m_oth = nn.hidden_activations(model, other).mean(axis=0)
        denom = np.linalg.norm(m_norm) * np.linalg.norm(m_oth)
        overlap = float(m_norm @ m_oth / denom) if denom > 0 else 0.0
    return SeparabilityReport(float(a), overlap)
