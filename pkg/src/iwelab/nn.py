"""Minimal dense network: forward pass, exact backprop, SGD with momentum.

Everything is float64.  A model is a plain container of per-layer weight
matrices (out x in) and bias vectors; hidden layers use relu, the output
layer is the identity, so ``forward`` returns raw logits.  The layout is
deliberately small and deterministic: training a model twice with the same
seed and config yields bit-identical parameters (on a single backend).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .errors import DimensionError, NumericError
from .rng import generator

LOG_CLAMP = 1e-12  # probability floor inside log terms


@dataclass
class ModelParams:
    """Layer weights/biases plus the architecture descriptor.

    ``arch`` lists layer widths input..output; weight ``i`` has shape
    (arch[i+1], arch[i]).  The output width is the number of main-task
    classes and carries all logits.
    """

    arch: tuple
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        self.arch = tuple(int(a) for a in self.arch)
        if self.activation != "relu":
            raise DimensionError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.arch) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("parameter count does not match arch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.arch[i + 1], self.arch[i])
            if w.shape != want or b.shape != (self.arch[i + 1],):
                raise DimensionError(f"layer {i}: got {w.shape}/{b.shape}, want {want}")

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    @property
    def n_classes(self) -> int:
        return self.arch[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def check_finite(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError("non-finite model parameters")

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        return forward(self, inputs)


def init_model(arch, seed: int, activation: str = "relu") -> ModelParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = generator(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(arch), weights, biases, activation)


def _as_batch(inputs: np.ndarray, dim: int) -> np.ndarray:
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"inputs have shape {x.shape}, model expects (n, {dim})")
    return x


def forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (n, K)."""
    x = _as_batch(inputs, model.input_dim)
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = kernels.affine(x, w, b)
        if i < n_layers - 1:
            x = kernels.relu(x)
    if not np.isfinite(x).all():
        raise NumericError("non-finite logits in forward pass")
    return x


def forward_trace(model: ModelParams, inputs: np.ndarray):
    """(logits, per-layer post-activation list) for backprop and probes."""
    x = _as_batch(inputs, model.input_dim)
    acts = [x]
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = kernels.affine(x, w, b)
        if i < n_layers - 1:
            x = kernels.relu(x)
        acts.append(x)
    return acts[-1], acts


def hidden_activations(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Post-relu activations of the last hidden layer (n, width)."""
    if len(model.weights) < 2:
        raise DimensionError("model has no hidden layer")
    _, acts = forward_trace(model, inputs)
    return acts[-2]


def backprop(model: ModelParams, acts, dlogits: np.ndarray):
    """Parameter gradients given d(loss)/d(logits).

    ``acts`` is the activation list from ``forward_trace`` on the same
    batch.  Returns (dweights, dbiases) matching the model layout.
    """
    n_layers = len(model.weights)
    dweights = [None] * n_layers
    dbiases = [None] * n_layers
    delta = np.ascontiguousarray(dlogits)
    for i in range(n_layers - 1, -1, -1):
        dx, dw, db = kernels.affine_bwd(acts[i], model.weights[i], delta, need_dx=i > 0)
        dweights[i], dbiases[i] = dw, db
        if i > 0:
            delta = kernels.relu_bwd(acts[i], dx)
    return dweights, dbiases


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt logits.

    Gradient rows sum to zero (softmax Jacobian).  Raises on non-finite
    logits or out-of-range labels.
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError("labels length does not match batch")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DimensionError("labels out of range")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits in cross_entropy")
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, LOG_CLAMP))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def soft_cross_entropy(logits: np.ndarray, target_probs: np.ndarray, tau: float = 1.0):
    """Mean CE between softmax(logits/tau) and a fixed target distribution.

    Used by the distillation pairing loss; gradient wrt logits is
    (softmax(logits/tau) - target) / (tau * n).
    """
    logits = np.atleast_2d(logits)
    n = logits.shape[0]
    p = softmax(logits / tau)
    loss = float(np.mean(-(target_probs * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=1)))
    grad = (p - target_probs) / (tau * n)
    return loss, grad


def binary_cross_entropy_from_probs(p1: np.ndarray, labels: np.ndarray):
    """Mean binary CE given class-1 probabilities, plus d(loss)/d(p1).

    Probabilities at exactly 0 or 1 are clamped to LOG_CLAMP inside the
    log terms, so a perfect prediction yields loss <= ~1e-12 instead of
    an infinity.  The returned gradient is wrt p1; callers chain it
    through whatever construction produced p1.
    """
    p1 = np.asarray(p1, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p1.shape != y.shape:
        raise DimensionError("p1 and labels must have equal length")
    if not np.isfinite(p1).all() or (p1 < 0).any() or (p1 > 1).any():
        raise NumericError("p1 must be finite probabilities in [0, 1]")
    n = p1.shape[0]
    pc = np.clip(p1, LOG_CLAMP, 1.0 - LOG_CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return loss, grad


@dataclass
class OptimizerState:
    """SGD with momentum and (coupled) weight decay.

    Step rule: v = momentum*v + g + weight_decay*p; p -= lr*v.
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    vel_weights: list = field(default_factory=list)
    vel_biases: list = field(default_factory=list)

    @classmethod
    def for_model(cls, model: ModelParams, learning_rate: float,
                  momentum: float = 0.9, weight_decay: float = 5e-4):
        st = cls(learning_rate, momentum, weight_decay)
        st.vel_weights = [np.zeros_like(w) for w in model.weights]
        st.vel_biases = [np.zeros_like(b) for b in model.biases]
        return st

    def check_shapes(self, model: ModelParams):
        ok = all(v.shape == w.shape for v, w in zip(self.vel_weights, model.weights)) and \
            all(v.shape == b.shape for v, b in zip(self.vel_biases, model.biases))
        if not ok or len(self.vel_weights) != len(model.weights):
            raise DimensionError("optimizer state does not mirror model shapes")


def sgd_step(model: ModelParams, grads, state: OptimizerState):
    """One in-place update; aborts with NumericError on non-finite grads."""
    dweights, dbiases = grads
    state.check_shapes(model)
    for i in range(len(model.weights)):
        if not (np.isfinite(dweights[i]).all() and np.isfinite(dbiases[i]).all()):
            raise NumericError(f"non-finite gradient at layer {i}")
        kernels.sgd_update(model.weights[i], np.ascontiguousarray(dweights[i]),
                           state.vel_weights[i], state.learning_rate,
                           state.momentum, state.weight_decay)
        kernels.sgd_update(model.biases[i], np.ascontiguousarray(dbiases[i]),
                           state.vel_biases[i], state.learning_rate,
                           state.momentum, state.weight_decay)
    return model, state


def l2_distance(a: ModelParams, b: ModelParams) -> float:
    """Euclidean norm over all concatenated parameters."""
    if a.arch != b.arch:
        raise DimensionError(f"arch mismatch: {a.arch} vs {b.arch}")
    total = 0.0
    for wa, wb in zip(a.weights, b.weights):
        total += float(((wa - wb) ** 2).sum())
    for ba, bb in zip(a.biases, b.biases):
        total += float(((ba - bb) ** 2).sum())
    return float(np.sqrt(total))
