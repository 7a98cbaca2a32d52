"""apply / train / deploy, plus the stateful ``EdnaML`` front end."""

from __future__ import annotations

import importlib.util
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..builtins import default_registry
from ..decorators import MARK
from ..errors import ConfigError, TrainingError
from ..plugins import warmup
from ..registry import ComponentKind, Registry
from ..storage import Category
from .connectors import Connector
from .deploy import StorageSink, plugin_state_key
from .pipeline import PipelinePlan, apply

logger = logging.getLogger("edna.core")

__all__ = ["TrainResult", "train", "deploy", "warmup_plugins", "EdnaML", "load_components"]


@dataclass
class TrainResult:
    trainer: Any
    checkpoints: list[str]
    plugin_keys: list[str]

    @property
    def last_checkpoint(self) -> str | None:
        return self.checkpoints[-1] if self.checkpoints else None


def train(plan: PipelinePlan, epochs: int | None = None, resume_from: str | None = None,
          allow_config_drift: bool = False) -> TrainResult:
    """Train (or resume) the plan's model, then warm up and store its plugins."""
    if plan.mode != "train":
        raise ConfigError(f"train() needs a train-mode plan, got {plan.mode!r}")
    trainer = plan.build_trainer()
    if resume_from:
        trainer.restore_checkpoint(resume_from, allow_config_drift=allow_config_drift)
    trainer.train(epochs)
    plugin_keys = []
    if plan.components.plugins and trainer.global_epoch >= trainer.epochs:
        plugin_keys = warmup_plugins(plan, trainer)
    return TrainResult(trainer, list(trainer.saved_checkpoints), plugin_keys)


def warmup_plugins(plan: PipelinePlan, trainer) -> list[str]:
    """Fit the configured plugins on the training split and store their states."""
    keys = []
    for plugin in plan.build_plugins(trainer.num_classes):
        if not plugin.activated:
            warmup(trainer.model, plugin, trainer.train_eval_set)
        if plugin in trainer.model.plugins:
            trainer.model.plugins.remove(plugin)
        key = plugin_state_key(plan.key, plugin.name)
        plan.storage.primary.put(Category.PLUGIN, key, plugin.serialize())
        keys.append(key)
    plan.storage.backup(Category.PLUGIN, f"{plan.key}/", trainer.global_epoch)
    return keys


def deploy(plan: PipelinePlan, sink: Connector | None = None):
    """Run the configured deployment; without a sink, records go to ARTIFACT storage."""
    if plan.mode != "deploy":
        raise ConfigError(f"deploy() needs a deploy-mode plan, got {plan.mode!r}")
    own = sink is None
    if own:
        sink = StorageSink(plan.storage.primary, f"{plan.key}/deploy/records.log")
    deployment = plan.components.deployment.factory(plan, **plan.config["DEPLOYMENT"]["DEPLOYMENT_ARGS"])
    deployment.run(sink)
    if own:
        sink.close()
    return sink


def load_components(path: str | Path, registry: Registry) -> list[str]:
    """Import a Python file and register every object tagged with an
    ``edna.decorators`` marker; the file is recorded as their source."""
    path = Path(path).resolve()
    name = f"edna_user_{path.stem}"
    spec = importlib.util.spec_from_file_location(name, path)
    if spec is None or spec.loader is None:
        raise ConfigError(f"cannot import {path}")
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)
    added = []
    for obj in vars(module).values():
        mark = getattr(obj, MARK, None)
        if mark is None or getattr(obj, "__module__", None) != name:
            continue
        kind, reg_name = mark
        registry.add(kind, obj, name=reg_name, source=path)
        added.append(reg_name)
    if not added:
        logger.warning("%s defines no tagged components", path)
    return added


class EdnaML:
    """Holds a layer list and a registry; ``apply`` then ``train`` or ``deploy``."""

    def __init__(self, config: str | Path | Mapping[str, Any] | Iterable, *,
                 storage_root: str | Path = "./edna_store", registry: Registry | None = None):
        if isinstance(config, (str, Path, Mapping)):
            config = [config]
        self.layers = list(config)
        self.storage_root = storage_root
        self.registry = registry or default_registry()
        self.plan: PipelinePlan | None = None
        self.result: TrainResult | None = None

    def add(self, component: Any, kind: ComponentKind | str | None = None,
            name: str | None = None) -> None:
        """Register a file of components, or a single class/function with its kind."""
        if isinstance(component, (str, Path)):
            load_components(component, self.registry)
            return
        if kind is None:
            raise ConfigError("add(obj) needs its component kind")
        if not isinstance(kind, ComponentKind):
            kind = ComponentKind[str(kind).upper()]
        self.registry.add(kind, component, name=name, source=True)

    def apply(self, mode: str | None = None) -> PipelinePlan:
        self.plan = apply(self.layers, self.registry, storage_root=self.storage_root, mode=mode)
        return self.plan

    def train(self, epochs: int | None = None) -> TrainResult:
        if self.plan is None:
            raise TrainingError("call apply() before train()")
        self.result = train(self.plan, epochs)
        return self.result

    def deploy(self, sink: Connector | None = None):
        if self.plan is None or self.plan.mode != "deploy":
            self.apply(mode="deploy")
        return deploy(self.plan, sink)
