"""Metric API (build, update, aggregate) and the built-in metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import MetricError
from .registry import ComponentKind, Registry

__all__ = [
    "accuracy", "weighted_f1", "kl_divergence", "MetricSpec", "MetricSeries", "BaseMetric",
    "Accuracy", "WeightedF1", "KLDivergence", "build_metric", "series_to_csv", "series_from_csv",
]


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != y.shape:
        raise MetricError("predictions and labels differ in length")
    if p.size == 0:
        raise MetricError("metrics need at least one prediction")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(p == y))


def weighted_f1(preds, labels, num_classes: int) -> float:
    """Support-weighted mean of per-class F1; empty ratios count as 0."""
    p, y = _pair(preds, labels)
    if min(p.min(), y.min()) < 0 or max(p.max(), y.max()) >= num_classes:
        raise MetricError(f"class ids must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y, p), 1)
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    support = confusion.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(np.sum(support / y.size * f1))


def kl_divergence(p, q, atol: float = 1e-9) -> float:
    """Natural-log KL(p || q) for probability vectors.

    Raises when q has a zero where p does not, rather than returning infinity.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape or p.size == 0:
        raise MetricError("p and q must be non-empty vectors of equal length")
    for name, v in (("p", p), ("q", q)):
        if not np.all(np.isfinite(v)) or v.min() < 0:
            raise MetricError(f"{name} must be finite and non-negative")
        if abs(v.sum() - 1.0) > atol:
            raise MetricError(f"{name} sums to {v.sum()!r}, not 1")
    support = p > 0
    if np.any(q[support] == 0):
        raise MetricError("KL divergence undefined: q is zero where p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


@dataclass(frozen=True)
class MetricSpec:
    metric_name: str
    metric_type: str = ""
    args: Mapping[str, Any] = field(default_factory=dict)


class MetricSeries:
    """Append-only ``(epoch, step, value)`` records."""

    def __init__(self, records=()):
        self._records: list[tuple[int, int, float]] = []
        for r in records:
            self.append(*r)

    def append(self, epoch: int, step: int, value: float) -> None:
        if self._records and (epoch, step) < self._records[-1][:2]:
            raise MetricError("metric records must be appended in (epoch, step) order")
        self._records.append((int(epoch), int(step), float(value)))

    @property
    def records(self) -> tuple[tuple[int, int, float], ...]:
        return tuple(self._records)

    def values(self) -> list[float]:
        return [r[2] for r in self._records]

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricSeries) and self.records == other.records


class BaseMetric:
    """Subclasses implement ``compute(**inputs) -> float``."""

    def __init__(self, metric_name: str, metric_type: str = "", metric_args=None):
        self.metric_name = metric_name
        self.metric_type = metric_type
        self.metric_args = dict(metric_args or {})
        self.results: MetricSeries | None = None
        self._step = 0

    def build_module(self, **kwargs) -> None:
        self.results = MetricSeries()

    def compute(self, **inputs) -> float:
        raise NotImplementedError

    def update(self, epoch: int = 0, step: int | None = None, **inputs) -> float:
        if self.results is None:
            raise MetricError(f"metric {self.metric_name!r} updated before build")
        value = float(self.compute(**{**self.metric_args, **inputs}))
        if step is None:
            step = self._step
        self._step = step + 1
        self.results.append(epoch, step, value)
        return value

    def series(self) -> MetricSeries:
        if self.results is None:
            raise MetricError(f"metric {self.metric_name!r} not built")
        return MetricSeries(self.results.records)

    def aggregate(self, kind: str = "mean") -> float:
        values = self.series().values()
        if kind not in ("mean", "last"):
            raise MetricError(f"unknown aggregate {kind!r}")
        if not values:
            raise MetricError(f"metric {self.metric_name!r} has no values")
        return values[-1] if kind == "last" else float(math.fsum(values) / len(values))


class Accuracy(BaseMetric):
    def compute(self, preds=None, labels=None, **_):
        return accuracy(preds, labels)


class WeightedF1(BaseMetric):
    def compute(self, preds=None, labels=None, num_classes=None, **_):
        if num_classes is None:
            raise MetricError("WeightedF1 needs num_classes")
        return weighted_f1(preds, labels, int(num_classes))


class KLDivergence(BaseMetric):
    """KL(p || q). Without explicit ``p``/``q`` it compares the label histogram
    with the mean predicted distribution ``probs``."""

    def compute(self, p=None, q=None, labels=None, probs=None, num_classes=None, **_):
        if p is None or q is None:
            if labels is None or probs is None:
                raise MetricError("KLDivergence needs p and q, or labels and probs")
            probs = np.asarray(probs, dtype=np.float64)
            n = int(num_classes or probs.shape[1])
            p = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n) / len(labels)
            q = probs.mean(axis=0)
            q = q / q.sum()
        return kl_divergence(p, q)


def build_metric(spec: MetricSpec, metric_class: str, registry: Registry) -> BaseMetric:
    reg = registry.resolve(ComponentKind.METRIC, metric_class)
    metric = reg.factory(spec.metric_name, spec.metric_type, dict(spec.args))
    metric.build_module()
    return metric


def series_to_csv(series: MetricSeries) -> bytes:
    return "".join(f"{e},{s},{v!r}\n" for e, s, v in series.records).encode("utf-8")


def series_from_csv(data: bytes) -> MetricSeries:
    out = MetricSeries()
    for line in data.decode("utf-8").splitlines():
        if line.strip():
            e, s, v = line.split(",")
            out.append(int(e), int(s), float(v))
    return out
