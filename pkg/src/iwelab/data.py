"""Procedural datasets, augmentation operators, and trigger-set construction.

Two dataset families ship with the lab:

* ``gaussians``: K isotropic clusters in R^d.  Cluster means sit on a fixed
  radius-3 shell (drawn once per seed); samples add isotropic noise with
  std ``spread``.  The default spread of 1.0 puts the nearest-true-mean
  (Bayes) accuracy near 0.95 for K=10, d=8.
* ``patches``: 8x8 grayscale shape templates (d=64) with additive jitter,
  so rotation and color adjustment keep their image meaning.

Trigger sets pair a subset of normal training rows (watermark label 0)
with their augmented versions (label 1).  The augmented row is computed
bit-exactly from its base row, which the tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import generator

GAUSSIAN_SHELL_RADIUS = 3.0
ADVERSARY_FRACTION = 0.2


@dataclass
class Dataset:
    """All splits of one procedural dataset.

    ``adversary_idx`` indexes into the train split; the remaining rows are
    the owner-only split.  Attackers get exactly those rows, never the test
    split.
    """

    kind: str
    K: int
    d: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    adversary_idx: np.ndarray
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.bincount(self.train_y, minlength=self.K)
        if (counts == 0).any():
            raise ConfigError("every class must appear in the train split")
        a = np.sort(self.adversary_idx)
        if a.size != round(ADVERSARY_FRACTION * len(self.train_y)):
            raise ConfigError("adversary split must be 20% of train")
        if a.size and (a[0] < 0 or a[-1] >= len(self.train_y) or np.unique(a).size != a.size):
            raise ConfigError("adversary indices must be unique train indices")

    @property
    def adversary_x(self) -> np.ndarray:
        return self.train_x[self.adversary_idx]

    @property
    def adversary_y(self) -> np.ndarray:
        return self.train_y[self.adversary_idx]

    @property
    def owner_idx(self) -> np.ndarray:
        mask = np.ones(len(self.train_y), dtype=bool)
        mask[self.adversary_idx] = False
        return np.nonzero(mask)[0]

    def split(self, tag: str):
        if tag == "train":
            return self.train_x, self.train_y
        if tag == "test":
            return self.test_x, self.test_y
        if tag == "adversary":
            return self.adversary_x, self.adversary_y
        raise ConfigError(f"unknown split {tag!r}")


def _adversary_indices(n_train: int, rng: np.random.Generator) -> np.ndarray:
    n_adv = round(ADVERSARY_FRACTION * n_train)
    return np.sort(rng.choice(n_train, size=n_adv, replace=False)).astype(np.int64)


def gen_gaussians(seed: int, K: int = 10, d: int = 8, n_per_class: int = 200,
                  spread: float = 1.0, n_test_per_class: int | None = None) -> Dataset:
    """Gaussian-cluster dataset, deterministic per seed."""
    if d < 2 or K < 2:
        raise ConfigError("gaussians need d >= 2 and K >= 2")
    if n_per_class < 2:
        raise ConfigError("n_per_class must be >= 2")
    if spread < 0:
        raise ConfigError("spread must be >= 0")
    if n_test_per_class is None:
        n_test_per_class = n_per_class
    rng_means = generator(seed, "means")
    dirs = rng_means.standard_normal((K, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = GAUSSIAN_SHELL_RADIUS * dirs

    def draw(n_cls, stream):
        rng = generator(seed, stream)
        xs, ys = [], []
        for c in range(K):
            xs.append(means[c] + spread * rng.standard_normal((n_cls, d)))
            ys.append(np.full(n_cls, c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = draw(n_per_class, "train")
    test_x, test_y = draw(n_test_per_class, "test")
    adv = _adversary_indices(len(train_y), generator(seed, "adversary"))
    return Dataset("gaussians", K, d, train_x, train_y, test_x, test_y, adv,
                   seed, {"spread": spread, "n_per_class": n_per_class,
                          "n_test_per_class": n_test_per_class, "means": means})


def _patch_templates() -> np.ndarray:
    """Twelve 8x8 shape templates with intensities in [0, 1]."""
    t = np.zeros((12, 8, 8))
    t[0, 2:4, :] = 1.0                    # horizontal bar, upper
    t[1, :, 2:4] = 1.0                    # vertical bar, left
    t[2][np.eye(8, dtype=bool)] = 1.0     # main diagonal
    t[3, 3:5, :] = 1.0                    # cross
    t[3, :, 3:5] = 1.0
    t[4, 0:3, 0:3] = 1.0                  # corner block, top-left
    t[5, 5:8, 5:8] = 1.0                  # corner block, bottom-right
    t[6, 1:7, 1:7] = 1.0                  # ring
    t[6, 3:5, 3:5] = 0.0
    t[7, 2:6, 2:6] = 1.0                  # center block
    t[8, 0, :] = t[8, 7, :] = 1.0         # frame
    t[8, :, 0] = t[8, :, 7] = 1.0
    t[9][np.fliplr(np.eye(8)).astype(bool)] = 1.0  # anti-diagonal
    t[10, 6:8, :] = 1.0                   # horizontal bar, lower
    t[11, :, 6:8] = 1.0                   # vertical bar, right
    return t


def gen_patches(seed: int, K: int = 10, n_per_class: int = 200,
                jitter: float = 0.1, n_test_per_class: int | None = None) -> Dataset:
    """Procedural 8x8 grayscale shapes, flattened to d=64."""
    templates = _patch_templates()
    if K > len(templates):
        raise ConfigError(f"patches support at most K={len(templates)} classes")
    if K < 2 or n_per_class < 1:
        raise ConfigError("patches need K >= 2 and n_per_class >= 1")
    if n_test_per_class is None:
        n_test_per_class = n_per_class
    flat = templates[:K].reshape(K, 64)

    def draw(n_cls, stream):
        rng = generator(seed, stream)
        xs, ys = [], []
        for c in range(K):
            noise = rng.uniform(-jitter, jitter, size=(n_cls, 64)) if jitter > 0 else 0.0
            xs.append(np.clip(flat[c] + noise, 0.0, 1.0))
            ys.append(np.full(n_cls, c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    train_x, train_y = draw(n_per_class, "train")
    test_x, test_y = draw(n_test_per_class, "test")
    adv = _adversary_indices(len(train_y), generator(seed, "adversary"))
    return Dataset("patches", K, 64, train_x, train_y, test_x, test_y, adv,
                   seed, {"jitter": jitter, "n_per_class": n_per_class,
                          "n_test_per_class": n_test_per_class})


@dataclass
class AugmentationSpec:
    """One of the two augmentation operators.

    rotation: angle ``theta`` acting on the ordered coordinate pair
    ``plane`` (identity elsewhere).  With ``grid=True`` the input is an
    8x8 image and theta must be a multiple of pi/2, applied as an exact
    grid rotation.

    color: y = gamma2*(x - mean(x)) + mean(x), then y = 0.5 + gamma3*(y - 0.5),
    then y + gamma1, in that fixed order.  With ``clamp=True`` the result is
    clipped to [0, 1] (image-valued data); gaussian inputs stay unclamped.
    """

    kind: str = "rotation"
    theta: float = math.pi / 2
    plane: tuple = (0, 1)
    gamma1: float = 0.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    grid: bool = False
    clamp: bool = False

    def __post_init__(self):
        self.plane = tuple(int(i) for i in self.plane)
        if self.kind not in ("rotation", "color"):
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if self.kind == "rotation" and not self.grid:
            i, j = self.plane
            if i == j:
                raise ConfigError("rotation plane indices must be distinct")
        if self.kind == "color" and (self.gamma2 <= 0 or self.gamma3 <= 0):
            raise ConfigError("contrast/deviation scales must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "theta": self.theta, "plane": list(self.plane),
                "gamma1": self.gamma1, "gamma2": self.gamma2, "gamma3": self.gamma3,
                "grid": self.grid, "clamp": self.clamp}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(kind=d.get("kind", "rotation"), theta=d.get("theta", math.pi / 2),
                   plane=tuple(d.get("plane", (0, 1))), gamma1=d.get("gamma1", 0.0),
                   gamma2=d.get("gamma2", 1.0), gamma3=d.get("gamma3", 1.0),
                   grid=d.get("grid", False), clamp=d.get("clamp", False))


def rotate(x: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Rotate one d-vector (or a batch) per the spec."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x).copy()
    if spec.grid:
        if x.shape[1] != 64:
            raise DimensionError("grid rotation expects d=64 (8x8)")
        quarter = spec.theta / (math.pi / 2)
        if abs(quarter - round(quarter)) > 1e-9:
            raise ConfigError("patch rotation angle must be a multiple of pi/2")
        k = int(round(quarter)) % 4
        imgs = x.reshape(-1, 8, 8)
        out = np.rot90(imgs, k=k, axes=(1, 2)).reshape(-1, 64).copy()
    else:
        i, j = spec.plane
        if i >= x.shape[1] or j >= x.shape[1]:
            raise DimensionError("rotation plane outside input dimension")
        c, s = math.cos(spec.theta), math.sin(spec.theta)
        xi, xj = x[:, i].copy(), x[:, j].copy()
        out = x
        out[:, i] = c * xi - s * xj
        out[:, j] = s * xi + c * xj
    return out[0] if single else out


def color_adjust(x: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Contrast around the per-sample mean, deviation around 0.5, brightness."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    m = x.mean(axis=1, keepdims=True)
    y = spec.gamma2 * (x - m) + m
    y = 0.5 + spec.gamma3 * (y - 0.5)
    y = y + spec.gamma1
    if spec.clamp:
        y = np.clip(y, 0.0, 1.0)
    return y[0] if single else y


def augment(x: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    return rotate(x, spec) if spec.kind == "rotation" else color_adjust(x, spec)


@dataclass
class TriggerSet:
    """The secret credit: base rows labeled 0, their augmented pairs labeled 1."""

    inputs: np.ndarray
    wm_labels: np.ndarray
    source_classes: tuple
    spec: AugmentationSpec
    base_indices: np.ndarray

    def __post_init__(self):
        n = len(self.wm_labels)
        m = n // 2
        if n != 2 * m or (self.wm_labels[:m] != 0).any() or (self.wm_labels[m:] != 1).any():
            raise ConfigError("trigger set must be balanced, bases first")

    def __len__(self) -> int:
        return len(self.wm_labels)

    @property
    def n_pairs(self) -> int:
        return len(self.wm_labels) // 2


def build_trigger_set(data: Dataset, classes, fraction: float,
                      spec: AugmentationSpec, seed: int) -> TriggerSet:
    """Draw base rows from the chosen classes and append their augmentations."""
    classes = tuple(sorted(int(c) for c in classes))
    if not classes or any(c < 0 or c >= data.K for c in classes):
        raise ConfigError("trigger classes must exist in the dataset")
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    rng = generator(seed, "trigger")
    picks = []
    for c in classes:
        idx = np.nonzero(data.train_y == c)[0]
        take = int(round(fraction * len(idx)))
        picks.append(rng.choice(idx, size=take, replace=False))
    base_idx = np.sort(np.concatenate(picks)).astype(np.int64)
    if len(base_idx) < 2:
        raise ConfigError("trigger set needs at least 2 base samples")
    base = data.train_x[base_idx]
    aug = augment(base, spec)
    inputs = np.concatenate([base, aug])
    labels = np.concatenate([np.zeros(len(base_idx), dtype=np.int64),
                             np.ones(len(base_idx), dtype=np.int64)])
    return TriggerSet(inputs, labels, classes, spec, base_idx)


@dataclass(frozen=True)
class PartitionKey:
    """Secret ceil(K/2)-subset of class indices; the complement is implied."""

    K: int
    indices: tuple

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        object.__setattr__(self, "indices", idx)
        if len(idx) != math.ceil(self.K / 2):
            raise ConfigError("partition key must have ceil(K/2) indices")
        if len(set(idx)) != len(idx) or idx[0] < 0 or idx[-1] >= self.K:
            raise ConfigError("partition key indices must be distinct and < K")

    @property
    def complement(self) -> tuple:
        return tuple(i for i in range(self.K) if i not in set(self.indices))

    def mask(self) -> np.ndarray:
        m = np.zeros(self.K, dtype=bool)
        m[list(self.indices)] = True
        return m


def make_partition_key(K: int, seed: int) -> PartitionKey:
    """Uniformly random ceil(K/2)-subset of {0..K-1}."""
    if K < 4:
        raise ConfigError("partition keys need K >= 4")
    rng = generator(seed, "key")
    idx = rng.choice(K, size=math.ceil(K / 2), replace=False)
    return PartitionKey(K, tuple(int(i) for i in idx))


@dataclass
class OODTriggerSet:
    """Classic far-from-support trigger with random main-task labels."""

    inputs: np.ndarray
    labels: np.ndarray
    K: int

    def __len__(self) -> int:
        return len(self.labels)


def build_ood_trigger_set(seed: int, m: int, d: int, K: int,
                          offset: float = 13.0, side: float = 1.0) -> OODTriggerSet:
    """Uniform hypercube of edge ``side`` centered ``offset`` away from the origin.

    The default offset of 13 = shell radius 3 + 10 spreads keeps these
    inputs disjoint from the default gaussian support.
    """
    if m < 2:
        raise ConfigError("OOD trigger needs m >= 2")
    rng = generator(seed, "ood")
    center = np.full(d, offset / math.sqrt(d))
    inputs = center + rng.uniform(-side / 2, side / 2, size=(m, d))
    labels = rng.integers(0, K, size=m).astype(np.int64)
    if m >= 16 and np.unique(labels).size < 2:
        raise ConfigError("degenerate OOD labels, change the seed")
    return OODTriggerSet(inputs, labels, K)
