"""The built-in component tier."""

from __future__ import annotations

import functools

from .data import TransformDataset, StreamSource, csv_file, inline, synthetic_gaussian
from .metrics import Accuracy, KLDivergence, WeightedF1
from .model import LinearClassifier, MLPClassifier
from .optim import SoftmaxLogitsLoss, make_adam, make_scheduler, make_sgd
from .plugins import FeaturePredicate, LogitConfidence
from .registry import ComponentKind as K, Registry
from .storage import InMemoryBackend, LocalFileBackend

__all__ = ["default_registry", "install_builtins"]


def upstream(records=(), label_name=None, n_classes=None):
    """Records handed over by an upstream chain stage."""
    return inline(records, label_name=label_name, n_classes=n_classes)


def stream_directory(path, poll_interval=1.0):
    return StreamSource(path, float(poll_interval))


def install_builtins(registry: Registry) -> Registry:
    from .core.deploy import BaseDeploy, FilterDeploy
    from .trainer import BaseTrainer, ClassificationTrainer

    entries = [
        (K.MODEL, LinearClassifier, None),
        (K.MODEL, MLPClassifier, None),
        (K.TRAINER, BaseTrainer, None),
        (K.TRAINER, ClassificationTrainer, None),
        (K.DEPLOYMENT, BaseDeploy, None),
        (K.DEPLOYMENT, FilterDeploy, None),
        (K.PLUGIN, LogitConfidence, None),
        (K.PLUGIN, FeaturePredicate, None),
        (K.METRIC, Accuracy, None),
        (K.METRIC, WeightedF1, None),
        (K.METRIC, KLDivergence, None),
        (K.STORAGE, LocalFileBackend, "local_file"),
        (K.STORAGE, InMemoryBackend, "in_memory"),
        (K.CRAWLER, synthetic_gaussian, None),
        (K.CRAWLER, csv_file, None),
        (K.CRAWLER, inline, None),
        (K.CRAWLER, upstream, None),
        (K.CRAWLER, stream_directory, None),
        (K.DATASET, TransformDataset, None),
        (K.LOSS, SoftmaxLogitsLoss, None),
        (K.OPTIMIZER, make_sgd, "SGD"),
        (K.OPTIMIZER, make_adam, "Adam"),
    ]
    for kind, factory, name in entries:
        registry.add(kind, factory, name=name, tier="built_in")
    for kind in ("constant", "step_decay", "exponential"):
        registry.add(K.SCHEDULER, functools.partial(make_scheduler, kind), name=kind, tier="built_in")
    return registry


def default_registry() -> Registry:
    """A fresh, unfrozen registry holding only the built-ins."""
    return install_builtins(Registry())
