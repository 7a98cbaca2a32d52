"""Turning a stack of config layers into a resolved, immutable pipeline plan."""

from __future__ import annotations

import inspect
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..builtins import install_builtins
from ..config import (ConfigLayerStack, EffectiveConfig, ExperimentKey, apply_defaults,
                      derive_experiment_key, load_stack, merge_layers, validate)
from ..data import SampleRecord, SampleSet, StreamSource, TransformSpec, split_eval
from ..errors import ConfigError, DataError, ValidationError
from ..metrics import BaseMetric, MetricSpec
from ..model import ModelAbstract, ModelSpec
from ..optim import LambdaPolicy, LossSpec, SchedulerState
from ..plugins import ModelPlugin
from ..registry import ComponentKind as K, Registration, Registry
from ..storage import (LocalFileBackend, StorageBackend, StorageSet, package_provenance,
                       policies_from_config)

logger = logging.getLogger("edna.core")

__all__ = ["Components", "PipelinePlan", "DataBundle", "apply"]


@dataclass(frozen=True)
class Components:
    crawler: Registration
    dataset: Registration
    model: Registration
    trainer: Registration | None
    deployment: Registration | None
    plugins: tuple[tuple[str, Registration, Mapping[str, Any]], ...]
    metrics: tuple[tuple[MetricSpec, Registration], ...]
    losses: tuple[tuple[LossSpec, tuple[Registration, ...], Mapping[str, Any]], ...]
    optimizer: Registration | None
    scheduler: Registration | None


@dataclass(frozen=True)
class DataBundle:
    """``train`` carries the train transforms; the others only the shared ones."""

    full: SampleSet
    train: SampleSet
    eval: SampleSet
    train_eval: SampleSet


@dataclass(frozen=True)
class PipelinePlan:
    config: EffectiveConfig
    stack: ConfigLayerStack
    experiment_key: ExperimentKey
    registry: Registry
    components: Components
    mode: str
    storage: StorageSet
    provenance_key: str
    upstream_records: tuple[SampleRecord, ...] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def key(self) -> str:
        return str(self.experiment_key)

    # -------------------------------------------------------------- data

    def source(self) -> SampleSet | StreamSource:
        """Whatever the crawler produces: a static set or a stream directory."""
        if "source" in self._cache:
            return self._cache["source"]
        dr = self.config["DATAREADER"]
        args = dict(dr["CRAWLER_ARGS"])
        factory = self.components.crawler.factory
        params = inspect.signature(factory).parameters
        label_name = dr["DATASET_ARGS"].get("label_name")
        if label_name and "label_name" in params and "label_name" not in args:
            args["label_name"] = label_name
        if "seed" in params and "seed" not in args:
            args["seed"] = self.config["EXECUTION"]["SEED"]
        if self.components.crawler.name == "upstream":
            if self.upstream_records is None:
                raise DataError("crawler 'upstream' needs records from an upstream stage")
            args["records"] = self.upstream_records
        try:
            result = factory(**args)
        except TypeError as exc:
            raise DataError(f"bad CRAWLER_ARGS for {self.components.crawler.name!r}: {exc}") from exc
        if not isinstance(result, (SampleSet, StreamSource)):
            raise DataError(f"crawler {self.components.crawler.name!r} returned "
                            f"{type(result).__name__}")
        self._cache["source"] = result
        return result

    def transforms(self, train: bool) -> list[TransformSpec]:
        specs = TransformSpec.from_args(self.config["TRANSFORMATION"]["ARGS"])
        if train:
            specs += TransformSpec.from_args(self.config["TRAIN_TRANSFORMATION"]["ARGS"])
        return specs

    def materialize(self, samples: SampleSet, train: bool = False) -> SampleSet:
        args = {k: v for k, v in self.config["DATAREADER"]["DATASET_ARGS"].items()
                if k != "label_name"}
        dataset = self.components.dataset.factory(samples, self.transforms(train), **args)
        return dataset.materialize()

    def data(self) -> DataBundle:
        if "data" in self._cache:
            return self._cache["data"]
        full = self.source()
        if not isinstance(full, SampleSet):
            raise DataError("this operation needs a static data set, not a stream")
        train_raw, eval_raw = split_eval(full, self.config["DATAREADER"]["EVAL_FRACTION"],
                                         self.config["EXECUTION"]["SEED"])
        bundle = DataBundle(
            full=self.materialize(full),
            train=self.materialize(train_raw, train=True),
            eval=self.materialize(eval_raw) if len(eval_raw) else eval_raw,
            train_eval=self.materialize(train_raw),
        )
        self._cache["data"] = bundle
        return bundle

    # ------------------------------------------------------------ builders

    def model_spec(self, shapes: SampleSet | None = None) -> ModelSpec:
        m = self.config["MODEL"]
        kwargs = dict(m["MODEL_KWARGS"])
        if getattr(self.components.model.factory, "infer_shapes", False) and shapes is not None:
            kwargs.setdefault("in_dim", shapes.feature_dim)
            kwargs.setdefault("classes", shapes.num_classes)
        return ModelSpec(m["MODEL_ARCH"], m["MODEL_BASE"], kwargs)

    def build_model(self, shapes: SampleSet | None = None) -> ModelAbstract:
        model = self.components.model.factory(self.model_spec(shapes),
                                              seed=self.config["EXECUTION"]["SEED"])
        if not isinstance(model, ModelAbstract):
            raise ConfigError(f"{self.components.model.name} did not build a ModelAbstract")
        return model

    def build_plugins(self, num_classes: int | None = None) -> list[ModelPlugin]:
        out = []
        for name, reg, kwargs in self.components.plugins:
            kwargs = dict(kwargs)
            if num_classes is not None and "num_classes" in inspect.signature(reg.factory).parameters:
                kwargs.setdefault("num_classes", num_classes)
            out.append(reg.factory(name=name or None, **kwargs))
        return out

    def build_metrics(self) -> list[BaseMetric]:
        out = []
        for spec, reg in self.components.metrics:
            metric = reg.factory(spec.metric_name, spec.metric_type, dict(spec.args))
            metric.build_module()
            out.append(metric)
        return out

    def build_trainer(self):
        if self.components.trainer is None:
            raise ConfigError("plan was applied in deploy mode; it has no trainer")
        cfg = self.config
        data = self.data()
        model = self.build_model(data.full)
        n = model.parameters.size
        opt_cfg = cfg["OPTIMIZER"][0]
        optimizer = self.components.optimizer.factory(n, opt_cfg["BASE_LR"],
                                                      **opt_cfg["OPTIMIZER_KWARGS"])
        sched = cfg["SCHEDULER"]
        scheduler: SchedulerState = self.components.scheduler.factory(sched["GAMMA"],
                                                                      sched["STEP_SIZE"])
        losses = []
        for spec, regs, kwargs in self.components.losses:
            losses.append((spec, [r.factory(**kwargs) for r in regs]))
        ls = cfg["LOSS_SCHEDULER"]
        ex = cfg["EXECUTION"]
        trainer = self.components.trainer.factory(
            model, data.train, data.eval if len(data.eval) else None, losses, optimizer,
            scheduler, LambdaPolicy(ls["POLICY"], ls["DECAY"]),
            epochs=ex["EPOCHS"], batch_size=ex["BATCH_SIZE"], shuffle=ex["SHUFFLE"],
            seed=ex["SEED"], save_frequency=cfg["SAVE"]["SAVE_FREQUENCY"],
            storage=self.storage, experiment_key=self.key, config_hash=cfg.hash,
            metrics=self.build_metrics(), **ex["TRAINER_ARGS"])
        # the eval view of the training split is what plugins warm up on
        trainer.train_eval_set = data.train_eval
        return trainer


def _resolve(registry: Registry, kind: K, name: str, path: str) -> Registration:
    try:
        return registry.resolve(kind, name)
    except Exception as exc:
        raise ValidationError(path, str(exc)) from exc


def _components(cfg: EffectiveConfig, registry: Registry, mode: str) -> Components:
    dr = cfg["DATAREADER"]
    training = mode == "train"
    losses = []
    if training:
        for i, entry in enumerate(cfg["LOSS"]):
            regs = tuple(_resolve(registry, K.LOSS, n, f"LOSS[{i}].LOSSES[{j}]")
                         for j, n in enumerate(entry["LOSSES"]))
            losses.append((LossSpec(tuple(entry["LOSSES"]), tuple(entry["LAMBDA"]), entry["LABEL"]),
                           regs, dict(entry["LOSS_KWARGS"])))
        if len(cfg["OPTIMIZER"]) != 1:
            raise ValidationError("OPTIMIZER", "exactly one optimizer group is supported")
    return Components(
        crawler=_resolve(registry, K.CRAWLER, dr["CRAWLER"], "DATAREADER.CRAWLER"),
        dataset=_resolve(registry, K.DATASET, dr["DATASET"], "DATAREADER.DATASET"),
        model=_resolve(registry, K.MODEL, cfg["MODEL"]["MODEL_ARCH"], "MODEL.MODEL_ARCH"),
        trainer=(_resolve(registry, K.TRAINER, cfg["EXECUTION"]["TRAINER"], "EXECUTION.TRAINER")
                 if training else None),
        deployment=(None if training else _resolve(
            registry, K.DEPLOYMENT, cfg["DEPLOYMENT"]["DEPLOY"], "DEPLOYMENT.DEPLOY")),
        plugins=tuple((p["PLUGIN_NAME"], _resolve(registry, K.PLUGIN, p["PLUGIN"],
                                                  f"MODEL_PLUGIN[{i}].PLUGIN"), p["PLUGIN_KWARGS"])
                      for i, p in enumerate(cfg["MODEL_PLUGIN"])),
        metrics=tuple((MetricSpec(m["METRIC_NAME"], m["METRIC_TYPE"], m["METRIC_ARGS"]),
                       _resolve(registry, K.METRIC, m["METRIC_CLASS"], f"METRICS[{i}].METRIC_CLASS"))
                      for i, m in enumerate(cfg["METRICS"])),
        losses=tuple(losses),
        optimizer=(_resolve(registry, K.OPTIMIZER, cfg["OPTIMIZER"][0]["OPTIMIZER"],
                            "OPTIMIZER[0].OPTIMIZER") if training else None),
        scheduler=(_resolve(registry, K.SCHEDULER, cfg["SCHEDULER"]["LR_SCHEDULER"],
                            "SCHEDULER.LR_SCHEDULER") if training else None),
    )


def _storage(cfg: EffectiveConfig, registry: Registry, root: Path,
             primary: StorageBackend | None) -> StorageSet:
    primary = primary or LocalFileBackend("default", root)
    backends = {}
    for name, entry in cfg["STORAGE"].items():
        if name == primary.name:
            continue
        reg = _resolve(registry, K.STORAGE, entry["TYPE"], f"STORAGE.{name}.TYPE")
        args = dict(entry["STORAGE_ARGS"])
        if "root" in inspect.signature(reg.factory).parameters:
            args.setdefault("root", root / "_backends" / name)
        backends[name] = reg.factory(name=name, **args)
    return StorageSet(primary, backends, policies_from_config(cfg))


def apply(layers: ConfigLayerStack | Iterable[str | Path | Mapping[str, Any]],
          registry: Registry | None = None, *, storage_root: str | Path = "./edna_store",
          storage: StorageBackend | None = None, mode: str | None = None,
          upstream_records: Sequence[SampleRecord] | None = None) -> PipelinePlan:
    """parse, merge, default, validate, freeze, resolve, key, package."""
    stack = layers if isinstance(layers, ConfigLayerStack) else load_stack(layers)
    cfg = validate(apply_defaults(merge_layers(stack)))
    if registry is None:
        registry = install_builtins(Registry())
    elif not registry.frozen and not any(t == "built_in" for t, _ in registry.registrations()):
        install_builtins(registry)
    registry.freeze()
    mode = mode or cfg["EXECUTION"]["MODE"]
    if mode not in ("train", "deploy"):
        raise ValidationError("EXECUTION.MODE", f"unknown mode {mode!r}")
    components = _components(cfg, registry, mode)
    key = derive_experiment_key(cfg)
    store = _storage(cfg, registry, Path(storage_root), storage)
    prov = package_provenance(str(key), stack, cfg, registry, store.primary)
    logger.info("applied %s (%s mode), config %s", key, mode, cfg.hexdigest[:12])
    return PipelinePlan(cfg, stack, key, registry, components, mode, store, prov,
                        None if upstream_records is None else tuple(upstream_records))
