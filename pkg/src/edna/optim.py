"""Losses, hand-derived gradients, optimizers and schedulers (float64 throughout)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import OptimError
from .model import LinearClassifier, MLPClassifier, ModelAbstract

__all__ = [
    "softmax", "softmax_rows", "cross_entropy", "cross_entropy_grad", "SoftmaxLogitsLoss",
    "weighted_total", "LossSpec", "parameter_gradients",
    "sgd_step", "OptimizerState", "adam_step", "Optimizer", "make_sgd", "make_adam",
    "SchedulerState", "scheduler_step", "make_scheduler",
    "LambdaPolicy", "lambda_scheduler_step",
]


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise OptimError("softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Sequence[float] | np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a single vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise OptimError("softmax expects a vector; use softmax_rows for matrices")
    return softmax_rows(z)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise OptimError("logits must be B x C and labels length B")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise OptimError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.shape[0]), labels]
    return float(np.mean(log_z - picked))


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    grad = softmax_rows(logits)
    grad[np.arange(labels.shape[0]), labels] -= 1.0
    return grad / labels.shape[0]


class SoftmaxLogitsLoss:
    """Softmax cross-entropy on logits; returns ``(value, dL/dlogits)``."""

    name = "SoftmaxLogitsLoss"

    def __init__(self, **kwargs):
        if kwargs:
            raise OptimError(f"SoftmaxLogitsLoss takes no arguments, got {sorted(kwargs)}")

    def __call__(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        return cross_entropy(logits, labels), cross_entropy_grad(logits, labels)


def weighted_total(values: Sequence[float], lambdas: Sequence[float]) -> float:
    if len(values) != len(lambdas) or not values:
        raise OptimError("weighted_total needs equal, nonzero numbers of values and weights")
    return float(sum(l * v for v, l in zip(values, lambdas)))


@dataclass(frozen=True)
class LossSpec:
    losses: tuple[str, ...]
    lambdas: tuple[float, ...]
    label: str

    def __post_init__(self):
        if len(self.losses) != len(self.lambdas):
            raise OptimError("one lambda per loss is required")
        if not all(math.isfinite(l) for l in self.lambdas):
            raise OptimError("lambdas must be finite")


def parameter_gradients(model: ModelAbstract, x: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of the loss w.r.t. the model parameters, in flattening order.

    ``x`` must be the input that reached ``forward_impl``. Models other than the
    built-ins must provide ``backward(x, dlogits)`` returning a mapping of
    per-parameter gradients or a flat vector.
    """
    p = model.parameters
    if isinstance(model, MLPClassifier):
        z1 = x @ p["W1"] + p["b1"]
        h = np.maximum(z1, 0.0)
        d_hidden = (dlogits @ p["W2"].T) * (z1 > 0)
        grads = {"W1": x.T @ d_hidden, "b1": d_hidden.sum(axis=0),
                 "W2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}
    elif isinstance(model, LinearClassifier):
        grads = {"W": x.T @ dlogits, "b": dlogits.sum(axis=0)}
    elif hasattr(model, "backward"):
        grads = model.backward(x, dlogits)
        if not isinstance(grads, Mapping):
            flat = np.asarray(grads, dtype=np.float64).reshape(-1)
            if flat.shape[0] != p.size:
                raise OptimError("backward returned a vector of the wrong length")
            return flat
    else:
        raise OptimError(f"{type(model).__name__} has no gradient routine; define backward()")
    return np.concatenate([np.asarray(grads[name], dtype=np.float64).ravel() for name in p])


# -------------------------------------------------------------- optimizers


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * grads


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    base_lr: float
    current_lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("SGD", "Adam"):
            raise OptimError(f"unknown optimizer kind {self.kind!r}")
        if not self.base_lr > 0:
            raise OptimError("base_lr must be > 0")
        if self.m.shape != self.v.shape:
            raise OptimError("moment vectors differ in length")

    @classmethod
    def fresh(cls, kind: str, n_params: int, base_lr: float, **hyper) -> "OptimizerState":
        return cls(kind, float(base_lr), float(base_lr), np.zeros(n_params), np.zeros(n_params),
                   0, **{k: float(v) for k, v in hyper.items()})

    def to_manifest(self) -> dict[str, Any]:
        return {"kind": self.kind, "base_lr": self.base_lr, "current_lr": self.current_lr,
                "t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_manifest(cls, meta: Mapping[str, Any], m: np.ndarray, v: np.ndarray) -> "OptimizerState":
        return cls(meta["kind"], meta["base_lr"], meta["current_lr"], m, v, meta["t"],
                   meta["beta1"], meta["beta2"], meta["eps"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, OptimizerState):
            return NotImplemented
        return (self.to_manifest() == other.to_manifest() and np.array_equal(self.m, other.m)
                and np.array_equal(self.v, other.v))


def adam_step(state: OptimizerState, grads: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update; returns the parameter delta and new state."""
    if state.kind != "Adam":
        raise OptimError("adam_step needs an Adam state")
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise OptimError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    delta = -state.current_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return delta, replace(state, m=m, v=v, t=t)


class Optimizer:
    """Owns an OptimizerState and applies updates to a flat parameter vector."""

    def __init__(self, state: OptimizerState):
        self.state = state

    @property
    def lr(self) -> float:
        return self.state.current_lr

    def set_lr(self, lr: float) -> None:
        self.state = replace(self.state, current_lr=float(lr))

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.state.kind == "Adam":
            delta, self.state = adam_step(self.state, grads)
            return params + delta
        if not np.all(np.isfinite(grads)):
            raise OptimError("non-finite gradient")
        self.state = replace(self.state, t=self.state.t + 1)
        return sgd_step(params, grads, self.state.current_lr)


def make_sgd(n_params: int, base_lr: float, **kwargs) -> Optimizer:
    if kwargs:
        raise OptimError(f"SGD takes no OPTIMIZER_KWARGS, got {sorted(kwargs)}")
    return Optimizer(OptimizerState.fresh("SGD", n_params, base_lr))


def make_adam(n_params: int, base_lr: float, **kwargs) -> Optimizer:
    allowed = {"beta1", "beta2", "eps"}
    if set(kwargs) - allowed:
        raise OptimError(f"Adam accepts only {sorted(allowed)}")
    return Optimizer(OptimizerState.fresh("Adam", n_params, base_lr, **kwargs))


# -------------------------------------------------------------- schedulers


@dataclass(frozen=True)
class SchedulerState:
    kind: str = "constant"
    gamma: float = 1.0
    step_size: int = 1
    epoch_counter: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "exponential"):
            raise OptimError(f"unknown scheduler {self.kind!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise OptimError("gamma must lie in (0, 1]")
        if self.step_size < 1:
            raise OptimError("step_size must be >= 1")

    def advanced(self) -> "SchedulerState":
        return replace(self, epoch_counter=self.epoch_counter + 1)


def scheduler_step(s: SchedulerState, base_lr: float) -> float:
    """Learning rate for epoch ``s.epoch_counter``."""
    e = s.epoch_counter
    if s.kind == "constant":
        return base_lr
    if s.kind == "step_decay":
        return base_lr * s.gamma ** (e // s.step_size)
    return base_lr * s.gamma ** e


def make_scheduler(kind: str, gamma: float = 1.0, step_size: int = 1) -> SchedulerState:
    return SchedulerState(kind, float(gamma), int(step_size))


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str = "constant"
    decay: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "exponential"):
            raise OptimError(f"unknown loss-weight policy {self.kind!r}")
        if not 0.0 < self.decay <= 1.0:
            raise OptimError("decay must lie in (0, 1]")


def lambda_scheduler_step(lambdas: Sequence[float], policy: LambdaPolicy) -> list[float]:
    if policy.kind == "constant":
        return [float(l) for l in lambdas]
    return [float(l) * policy.decay for l in lambdas]
