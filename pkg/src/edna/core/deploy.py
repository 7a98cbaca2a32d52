"""Gradient-free serving loops over a static set or a polled stream directory."""

from __future__ import annotations

import logging
import threading
import time
from typing import Any

import numpy as np

from ..data import (SampleRecord, SampleSet, StreamSource, encode_line, poll_stream,
                    record_to_payload)
from ..errors import CheckpointError, PluginError
from ..model import ModelAbstract, set_parameters
from ..optim import softmax_rows
from ..plugins import ModelPlugin, attach
from ..storage import Category, Checkpoint, KeyNotFoundError, read_checkpoint
from .connectors import Connector, ConnectorRecord, to_plain

logger = logging.getLogger("edna.deploy")

__all__ = ["BaseDeploy", "FilterDeploy", "StorageSink", "plugin_state_key"]


def plugin_state_key(experiment_key: str, plugin_name: str) -> str:
    return f"{experiment_key}/plugin/{plugin_name}.bin"


class StorageSink(Connector):
    """Collects records and writes them as one ARTIFACT file on close."""

    kind = "storage"

    def __init__(self, backend, key: str):
        self.backend = backend
        self.key = key
        self.records: list[ConnectorRecord] = []

    def push(self, payload):
        rec = ConnectorRecord(len(self.records), to_plain(payload))
        self.records.append(rec)
        return rec

    def close(self):
        text = "".join(encode_line(r.sequence, r.payload) for r in self.records)
        self.backend.put(Category.ARTIFACT, self.key, text.encode("utf-8"))

    def abort(self, reason):
        logger.error("deploy aborted: %s", reason)


class BaseDeploy:
    """Loads a trained model and its plugins, then emits one record per sample.

    Override :meth:`deploy_step` to change what a batch emits.
    """

    requires_checkpoint = True

    def __init__(self, plan, batch_size: int | None = None, emit_features: bool = False,
                 **kwargs):
        if kwargs:
            raise TypeError(f"unexpected DEPLOYMENT_ARGS {sorted(kwargs)}")
        self.plan = plan
        self.batch_size = int(batch_size or plan.config["EXECUTION"]["BATCH_SIZE"])
        self.emit_features = bool(emit_features)
        self.checkpoint: Checkpoint | None = None
        self.model: ModelAbstract | None = None
        self.emitted = 0
        self.stop_event = threading.Event()

    # ------------------------------------------------------------- setup

    def load(self, shapes: SampleSet | None) -> ModelAbstract:
        plan = self.plan
        key = plan.config["DEPLOYMENT"]["MODEL_CHECKPOINT"]
        model = plan.build_model(shapes)
        owner = plan.key
        if key:
            try:
                self.checkpoint = read_checkpoint(key, plan.storage.primary)
            except KeyNotFoundError:
                raise CheckpointError(f"deployment checkpoint {key!r} not found") from None
            layout = [(n, tuple(s)) for n, s in model.parameters.layout()]
            if [(n, tuple(s)) for n, s in self.checkpoint.param_layout] != layout:
                raise CheckpointError(f"checkpoint {key!r} does not fit {plan.components.model.name} "
                                      f"with MODEL_KWARGS {dict(model.spec.kwargs)}")
            set_parameters(model, self.checkpoint.params)
            owner = self.checkpoint.experiment_key
        elif self.requires_checkpoint:
            raise CheckpointError("DEPLOYMENT.MODEL_CHECKPOINT is empty")
        num_classes = shapes.num_classes if shapes is not None else None
        for plugin in plan.build_plugins(num_classes):
            self._load_plugin_state(plugin, owner)
            if not plugin.activated:
                raise PluginError(f"plugin {plugin.name!r} is not activated; warm it up first")
            attach(model, plugin)
        model.eval()
        self.model = model
        return model

    def _load_plugin_state(self, plugin: ModelPlugin, owner: str) -> None:
        backend = self.plan.storage.primary
        key = plugin_state_key(owner, plugin.name)
        if backend.exists(Category.PLUGIN, key):
            plugin.deserialize(backend.get(Category.PLUGIN, key))
        elif self.checkpoint is not None and plugin.name in self.checkpoint.plugin_states:
            plugin.deserialize(self.checkpoint.plugin_states[plugin.name])

    # --------------------------------------------------------------- loop

    def deploy_step(self, records: list[SampleRecord], x: np.ndarray) -> list[dict[str, Any]]:
        out, plugin_outputs = self.model(x)
        probs = softmax_rows(out.logits)
        preds = np.argmax(probs, axis=1)
        rows = []
        for i in range(len(records)):
            row = {
                "index": self.emitted + i,
                "predicted": int(preds[i]),
                "max_softmax": float(probs[i, preds[i]]),
                "plugins": {name: {k: _row(v, i) for k, v in outs.items()}
                            for name, outs in plugin_outputs.items() if outs},
            }
            if self.emit_features:
                row["features"] = out.features[i]
            rows.append(row)
        return rows

    def _process(self, records: list[SampleRecord], sink: Connector) -> None:
        plan = self.plan
        for start in range(0, len(records), self.batch_size):
            chunk = records[start:start + self.batch_size]
            view = SampleSet.from_records(chunk)
            x = np.stack([r.features for r in plan.materialize(view).records])
            for row in self.deploy_step(chunk, x):
                sink.push(row)
            self.emitted += len(chunk)

    def run(self, sink: Connector) -> int:
        source = self.plan.source()
        if isinstance(source, SampleSet):
            self.load(source)
            self._process(list(source.records), sink)
        else:
            self.load(None)
            self._run_stream(source, sink)
        logger.info("deploy emitted %d records", self.emitted)
        return self.emitted

    def _run_stream(self, src: StreamSource, sink: Connector) -> None:
        try:
            while True:
                # check STOP before polling so files that precede it are served
                stopping = src.stop_requested or self.stop_event.is_set()
                records = poll_stream(src)
                if records:
                    self._process(records, sink)
                if stopping:
                    return
                time.sleep(src.poll_interval)
        except KeyboardInterrupt:
            logger.info("deploy interrupted; stopping")


def _row(value: Any, i: int) -> Any:
    if isinstance(value, np.ndarray) and value.ndim >= 1:
        return value[i]
    return value


class FilterDeploy(BaseDeploy):
    """Passes through the raw records that every plugin's ``keep`` output accepts.

    Runs without a checkpoint; the model only gives plugins a forward pass.
    """

    requires_checkpoint = False

    def deploy_step(self, records, x):
        _, plugin_outputs = self.model(x)
        keep = np.ones(len(records), dtype=bool)
        for outs in plugin_outputs.values():
            if "keep" in outs:
                keep &= np.asarray(outs["keep"], dtype=bool)
        return [record_to_payload(r) for r, k in zip(records, keep) if k]
