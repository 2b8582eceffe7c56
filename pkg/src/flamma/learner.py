"""Small numpy models with exact gradients and decay-scaled mini-batch SGD.

Parameters are always a flat float64 vector. Layouts:

* ``logistic``: ``W`` (num_classes x input_dim, row-major), then bias (num_classes).
* ``mlp``: ``W1`` (hidden x input_dim), ``b1``, ``W2`` (num_classes x hidden), ``b2``;
  ReLU hidden layer.
* ``quadratic``: ``w`` itself, same dimension as ``quadratic_target``.

For ``quadratic`` the batch features act as zero-mean gradient perturbations:
the loss is ``0.5*||w - b||^2 - <w - b, mean(x)>``, so a batch whose features
average to zero gives exactly ``0.5*||w - b||^2`` while mini-batches give a
stochastic gradient ``w - b - mean(x_batch)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

KINDS = ("logistic", "mlp", "quadratic")

SeedLike = Union[int, Sequence[int]]
StepHook = Callable[[np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_dim: int = 32
    quadratic_target: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1 or self.num_classes < 1 or self.hidden_dim < 1:
            raise ValueError("model dimensions must be positive")
        if self.kind == "quadratic":
            if self.quadratic_target is None:
                raise ValueError("quadratic model needs a quadratic_target")
            target = np.asarray(self.quadratic_target, dtype=float).ravel()
            if target.size != self.input_dim:
                raise ValueError(
                    f"quadratic_target has {target.size} entries, input_dim is {self.input_dim}"
                )
            object.__setattr__(self, "quadratic_target", target)

    @property
    def num_params(self) -> int:
        d, k, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic":
            return k * d + k
        if self.kind == "mlp":
            return h * d + h + k * h + k
        return d


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])


def init_params(spec: ModelSpec, seed: SeedLike = 0) -> np.ndarray:
    """Zeros for logistic and quadratic; Glorot-uniform weights and zero biases for the MLP."""
    if spec.kind != "mlp":
        return np.zeros(spec.num_params)
    rng = np.random.default_rng(seed)
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    lim1 = np.sqrt(6.0 / (d + h))
    lim2 = np.sqrt(6.0 / (h + k))
    w1 = rng.uniform(-lim1, lim1, size=h * d)
    w2 = rng.uniform(-lim2, lim2, size=k * h)
    return np.concatenate([w1, np.zeros(h), w2, np.zeros(k)])


def _check(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size != spec.num_params:
        raise ValueError(f"parameter vector has shape {w.shape}, {spec.kind} needs ({spec.num_params},)")
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}")
    if spec.kind != "quadratic" and len(batch) == 0:
        raise ValueError("empty batch")
    if spec.kind != "quadratic" and len(batch) and (batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes):
        raise ValueError("labels out of range")
    return w


def _unpack_mlp(spec: ModelSpec, w: np.ndarray):
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    i = 0
    w1 = w[i : i + h * d].reshape(h, d); i += h * d
    b1 = w[i : i + h]; i += h
    w2 = w[i : i + k * h].reshape(k, h); i += k * h
    b2 = w[i : i + k]
    return w1, b1, w2, b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _cross_entropy(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # -log softmax(z)[y] as m + log1p(expm1(-m) + s), m = max(z - z_y) >= 0; keeps
    # full relative precision when the loss is tiny (confident, correct predictions)
    d = z - z[np.arange(len(z)), labels][:, None]
    m = d.max(axis=1)
    e = np.exp(d - m[:, None])
    e[np.arange(len(z)), labels] = 0.0
    return m + np.log1p(np.expm1(-m) + e.sum(axis=1))


def logits(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "logistic":
        k, d = spec.num_classes, spec.input_dim
        return x @ w[: k * d].reshape(k, d).T + w[k * d :]
    if spec.kind == "mlp":
        w1, b1, w2, b2 = _unpack_mlp(spec, w)
        return np.maximum(x @ w1.T + b1, 0.0) @ w2.T + b2
    raise ValueError("quadratic model has no logits")


def _quad_offset(batch: Batch, dim: int) -> np.ndarray:
    return batch.features.mean(axis=0) if len(batch) else np.zeros(dim)


def loss(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean cross-entropy, or the perturbed quadratic for ``kind='quadratic'``."""
    w = _check(spec, w, batch)
    if spec.kind == "quadratic":
        diff = w - spec.quadratic_target
        return float(0.5 * diff @ diff - diff @ _quad_offset(batch, spec.input_dim))
    return float(_cross_entropy(logits(spec, w, batch.features), batch.labels).mean())


def gradient(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    w = _check(spec, w, batch)
    if spec.kind == "quadratic":
        return w - spec.quadratic_target - _quad_offset(batch, spec.input_dim)

    x, n = batch.features, len(batch)
    onehot = np.zeros((n, spec.num_classes))
    onehot[np.arange(n), batch.labels] = 1.0

    if spec.kind == "logistic":
        delta = (np.exp(_log_softmax(logits(spec, w, x))) - onehot) / n
        return np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])

    w1, b1, w2, b2 = _unpack_mlp(spec, w)
    pre = x @ w1.T + b1
    hid = np.maximum(pre, 0.0)
    z = hid @ w2.T + b2
    delta = (np.exp(_log_softmax(z)) - onehot) / n
    g_w2 = delta.T @ hid
    g_b2 = delta.sum(axis=0)
    back = (delta @ w2) * (pre > 0)
    g_w1 = back.T @ x
    g_b1 = back.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def finite_diff_gradient(spec: ModelSpec, w, batch: Batch, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    w = np.array(w, dtype=float)
    out = np.empty_like(w)
    for j in range(w.size):
        orig = w[j]
        w[j] = orig + h
        up = loss(spec, w, batch)
        w[j] = orig - h
        down = loss(spec, w, batch)
        w[j] = orig
        out[j] = (up - down) / (2 * h)
    return out


def _as_seed(seed: SeedLike) -> list[int]:
    return [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]


def local_train(
    spec: ModelSpec,
    w0,
    data: Batch,
    epochs: int,
    lr: float,
    gamma: float = 1.0,
    batch_size: int = 32,
    prox_mu: float = 0.0,
    prox_anchor=None,
    seed: SeedLike = 0,
    on_step: Optional[StepHook] = None,
) -> np.ndarray:
    """Run ``epochs`` shuffled passes of mini-batch SGD on a private copy of ``w0``.

    Each step is ``w <- w - (lr*gamma) * (grad + prox_mu*(w - prox_anchor))``.
    The shuffle for epoch ``e`` is drawn from ``seed + (e,)``, so identical
    seeds give identical results. ``on_step(w, stochastic_grad)`` is called
    before every update when given.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if prox_mu < 0:
        raise ValueError("prox_mu must be non-negative")
    if prox_mu > 0 and prox_anchor is None:
        raise ValueError("prox_mu > 0 requires prox_anchor")

    w = np.array(w0, dtype=float)
    if epochs == 0:
        return w
    if len(data) == 0:
        raise ValueError("local training data is empty")
    anchor = None if prox_mu == 0 else np.asarray(prox_anchor, dtype=float)
    step = lr * gamma
    base = _as_seed(seed)
    n = len(data)
    for e in range(epochs):
        order = np.random.default_rng(base + [e]).permutation(n)
        for start in range(0, n, batch_size):
            g = gradient(spec, w, data.subset(order[start : start + batch_size]))
            if on_step is not None:
                on_step(w, g)
            if anchor is not None:
                g = g + prox_mu * (w - anchor)
            w = w - step * g
    return w


def predict(spec: ModelSpec, w, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return np.argmax(logits(spec, np.asarray(w, dtype=float), np.asarray(x, dtype=float)), axis=1)
