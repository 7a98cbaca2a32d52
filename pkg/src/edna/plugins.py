"""Model plugins: forward/epoch hooks, warmup, and the built-in plugins."""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any, Iterable

import numpy as np

from .data import SampleSet, batch_iter
from .errors import CorruptRecordError, PluginError
from .model import ModelAbstract
from .optim import softmax_rows

__all__ = ["ModelPlugin", "LogitConfidence", "FeaturePredicate", "attach", "warmup",
           "serialize_state", "deserialize_state"]

_MAGIC = b"EDNP"
_VERSION = 1


class ModelPlugin:
    """Hooks fired around a model's forward pass and around epochs.

    Subclasses set ``self.epochs`` (warmup passes) and ``self.activated`` in
    ``build_plugin`` and keep learnable state in ``state_params``.
    """

    name = "ModelPlugin"

    def __init__(self, name: str | None = None, **kwargs):
        self.name = name or type(self).name
        self.epochs = 1
        self.activated = False
        warm = kwargs.pop("epochs", None)
        self.kwargs = dict(kwargs)
        self.build_plugin(**kwargs)
        self.build_params(**kwargs)
        if warm is not None:
            if int(warm) < 1:
                raise PluginError("warmup epochs must be >= 1")
            self.epochs = int(warm)

    def build_plugin(self, **kwargs) -> None:
        pass

    def build_params(self, **kwargs) -> None:
        pass

    def pre_forward(self, x, model, **kwargs):
        return x, kwargs

    def post_forward(self, x, logits, feats, sec, model, **kwargs):
        return logits, feats, sec, kwargs, {}

    def pre_epoch(self, model, epoch: int = 0, **kwargs) -> None:
        pass

    def post_epoch(self, model, epoch: int = 0, **kwargs) -> None:
        if epoch + 1 >= self.epochs:
            self.activated = True

    def state_params(self) -> dict[str, Any]:
        return {}

    def load_state_params(self, params: dict[str, Any]) -> None:
        pass

    def state(self) -> dict[str, Any]:
        return {"activated": bool(self.activated), "params": self.state_params()}

    def load_state(self, state: dict[str, Any]) -> None:
        self.load_state_params(state["params"])
        self.activated = bool(state["activated"])

    def serialize(self) -> bytes:
        return serialize_state(self.name, type(self).__name__, self.state())

    def deserialize(self, data: bytes) -> None:
        name, cls_name, state = deserialize_state(data)
        if cls_name != type(self).__name__:
            raise PluginError(f"state belongs to {cls_name}, not {type(self).__name__}")
        self.load_state(state)


def serialize_state(name: str, cls_name: str, state: dict[str, Any]) -> bytes:
    body = json.dumps({"name": name, "class": cls_name, "state": state}, sort_keys=True,
                      separators=(",", ":"), allow_nan=False).encode("utf-8")
    head = _MAGIC + struct.pack("<HI", _VERSION, len(body)) + body
    return head + hashlib.sha256(head).digest()


def deserialize_state(data: bytes) -> tuple[str, str, dict[str, Any]]:
    if len(data) < 10 + 32 or data[:4] != _MAGIC:
        raise CorruptRecordError("plugin state: bad header or truncated")
    version, length = struct.unpack("<HI", data[4:10])
    if version != _VERSION:
        raise CorruptRecordError(f"plugin state: unsupported version {version}")
    if len(data) != 10 + length + 32:
        raise CorruptRecordError("plugin state: length mismatch")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CorruptRecordError("plugin state: digest mismatch")
    obj = json.loads(data[10:10 + length].decode("utf-8"))
    return obj["name"], obj["class"], obj["state"]


class LogitConfidence(ModelPlugin):
    """Per-class mean of the max softmax probability, learned during warmup.

    Once activated, ``post_forward`` reports each row's max softmax
    probability (``logit``) and the learned mean for its predicted class
    (``threshold``). A class never predicted during warmup has threshold 0.
    """

    name = "LogitConfidence"

    def __init__(self, name: str | None = None, num_classes: int = 2, **kwargs):
        super().__init__(name=name, num_classes=num_classes, **kwargs)

    def build_plugin(self, **kwargs):
        self.epochs = 1
        self.activated = False

    def build_params(self, num_classes: int = 2, **kwargs):
        if num_classes < 2:
            raise PluginError("num_classes must be >= 2")
        self.num_classes = int(num_classes)
        self.running_mean = np.zeros(self.num_classes)
        self.counts = np.zeros(self.num_classes, dtype=np.int64)

    def post_forward(self, x, logits, feats, sec, model, **kwargs):
        if logits.shape[1] != self.num_classes:
            raise PluginError(f"{self.name}: got {logits.shape[1]} logit columns, "
                              f"expected {self.num_classes}")
        if not self.activated:
            self.add_to_average(logits)
            return logits, feats, sec, kwargs, {}
        logit, threshold = self.compute_labels(logits)
        return logits, feats, sec, kwargs, {"logit": logit, "threshold": threshold}

    def add_to_average(self, logits: np.ndarray) -> None:
        probs = softmax_rows(logits)
        top = probs.max(axis=1)
        cls = probs.argmax(axis=1)
        for s, c in zip(top, cls):
            self.counts[c] += 1
            self.running_mean[c] += (s - self.running_mean[c]) / self.counts[c]

    def compute_labels(self, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs = softmax_rows(logits)
        return probs.max(axis=1), self.running_mean[probs.argmax(axis=1)]

    def state_params(self):
        return {"num_classes": self.num_classes,
                "running_mean": [float(v) for v in self.running_mean],
                "counts": [int(c) for c in self.counts]}

    def load_state_params(self, params):
        self.num_classes = int(params["num_classes"])
        self.running_mean = np.array(params["running_mean"], dtype=np.float64)
        self.counts = np.array(params["counts"], dtype=np.int64)


class FeaturePredicate(ModelPlugin):
    """Marks rows whose feature ``feature`` lies in ``[minimum, maximum]``.

    Needs no warmup; deployments use the ``keep`` output to filter samples.
    """

    name = "FeaturePredicate"

    def build_plugin(self, feature: int = 0, minimum: float = float("-inf"),
                     maximum: float = float("inf"), **kwargs):
        if kwargs:
            raise PluginError(f"FeaturePredicate got unexpected arguments {sorted(kwargs)}")
        self.feature = int(feature)
        self.minimum = float(minimum)
        self.maximum = float(maximum)
        self.epochs = 1
        self.activated = True

    def post_forward(self, x, logits, feats, sec, model, **kwargs):
        col = x[:, self.feature]
        keep = (col >= self.minimum) & (col <= self.maximum)
        return logits, feats, sec, kwargs, {"keep": keep}

    def state_params(self):
        def finite(v):
            return v if np.isfinite(v) else None
        return {"feature": self.feature, "minimum": finite(self.minimum),
                "maximum": finite(self.maximum)}

    def load_state_params(self, params):
        self.feature = int(params["feature"])
        lo, hi = params["minimum"], params["maximum"]
        self.minimum = float("-inf") if lo is None else float(lo)
        self.maximum = float("inf") if hi is None else float(hi)


def attach(model: ModelAbstract, plugin: ModelPlugin) -> None:
    if any(p.name == plugin.name for p in model.plugins):
        raise PluginError(f"a plugin named {plugin.name!r} is already attached")
    model.plugins.append(plugin)


def warmup(model: ModelAbstract, plugin: ModelPlugin, train_data: SampleSet | Iterable,
           epochs: int | None = None, batch_size: int = 256) -> None:
    """Gradient-free passes over the training data so ``plugin`` can fit itself.

    ``post_epoch`` fires after each pass; the plugin must be active afterwards.
    """
    if plugin.activated:
        raise PluginError(f"plugin {plugin.name!r} is already activated")
    if plugin not in model.plugins:
        attach(model, plugin)
    if isinstance(train_data, SampleSet):
        if len(train_data) == 0:
            raise PluginError("warmup needs training data")
        batches = batch_iter(train_data, batch_size)
    else:
        batches = [b if isinstance(b, np.ndarray) else b.features for b in train_data]
        batches = [np.asarray(b) for b in batches]
        if not batches:
            raise PluginError("warmup needs training data")
    if epochs is not None:
        if int(epochs) < 1:
            raise PluginError("warmup epochs must be >= 1")
        plugin.epochs = int(epochs)
    was_training = model.training
    model.eval()
    try:
        for epoch in range(plugin.epochs):
            plugin.pre_epoch(model, epoch=epoch)
            for batch in batches:
                x = batch if isinstance(batch, np.ndarray) else batch.features
                model.forward(x)
            plugin.post_epoch(model, epoch=epoch)
    finally:
        model.train(was_training)
    if not plugin.activated:
        raise PluginError(f"plugin {plugin.name!r} did not activate after warmup")
