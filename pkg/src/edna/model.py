"""Model contract and the two built-in classifiers.

A model sets up non-learnable attributes first, then its parameters, and
implements ``forward_impl`` returning ``(logits, features, secondary)``.
The public ``forward`` wraps it with the attached plugins' hooks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

import numpy as np

from .errors import ModelError, PluginError
from .registry import ComponentKind, Registry

__all__ = [
    "ModelOutput", "ParameterSet", "ModelSpec", "ModelAbstract", "LinearClassifier",
    "MLPClassifier", "build_model", "get_parameters", "set_parameters", "parameter_digest",
    "glorot_uniform",
]


@dataclass(frozen=True)
class ModelOutput:
    logits: np.ndarray
    features: np.ndarray
    secondary: list = field(default_factory=list)

    def __post_init__(self):
        if self.logits.ndim != 2 or self.features.ndim != 2:
            raise ModelError("logits and features must be 2-d")
        if self.logits.shape[0] != self.features.shape[0]:
            raise ModelError("logits and features disagree on batch size")
        if self.logits.shape[1] < 2:
            raise ModelError("a classifier needs at least two logit columns")

    def __iter__(self) -> Iterator:
        return iter((self.logits, self.features, self.secondary))


class ParameterSet(dict):
    """Ordered name -> float64 array map; the order fixes the flattened layout."""

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.items()]

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def load_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape[0] != self.size:
            raise ModelError(f"parameter vector has length {vector.shape[0]}, expected {self.size}")
        offset = 0
        for name, value in self.items():
            n = value.size
            self[name] = vector[offset:offset + n].reshape(value.shape).copy()
            offset += n


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    base: str = ""
    kwargs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.arch:
            raise ModelError("model arch must be non-empty")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ModelAbstract:
    """Base class for every model.

    Subclasses implement ``model_attributes_setup``, ``model_setup`` and
    ``forward_impl``. Parameters live in ``self.parameters`` and are created
    with :meth:`add_parameter` during ``model_setup``; ``self.rng`` is seeded
    for initialization.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.attributes: dict[str, Any] = {}
        self.parameters = ParameterSet()
        self.plugins: list = []
        self.training = False
        self.last_inputs: np.ndarray | None = None
        self.rng = np.random.default_rng(seed)
        kwargs = dict(spec.kwargs)
        self.model_attributes_setup(**kwargs)
        self.model_setup(**kwargs)
        del self.rng

    def model_attributes_setup(self, **kwargs) -> None:
        pass

    def model_setup(self, **kwargs) -> None:
        pass

    def forward_impl(self, x: np.ndarray, **kwargs):
        raise NotImplementedError

    def add_parameter(self, name: str, value: np.ndarray) -> None:
        if name in self.parameters:
            raise ModelError(f"duplicate parameter {name!r}")
        self.parameters[name] = np.asarray(value, dtype=np.float64).copy()

    def train(self, mode: bool = True) -> "ModelAbstract":
        self.training = mode
        return self

    def eval(self) -> "ModelAbstract":
        return self.train(False)

    @property
    def in_dim(self) -> int | None:
        return self.attributes.get("in_dim")

    def forward(self, x: np.ndarray, **kwargs) -> tuple[ModelOutput, dict[str, dict]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        for plugin in self.plugins:
            try:
                x, kwargs = plugin.pre_forward(x, self, **kwargs)
            except PluginError:
                raise
            except Exception as exc:
                raise PluginError(f"plugin {plugin.name!r} pre_forward failed: {exc}") from exc
        if self.in_dim is not None and x.shape[1] != self.in_dim:
            raise ModelError(f"input has {x.shape[1]} features, model expects {self.in_dim}")
        self.last_inputs = x
        result = self.forward_impl(x, **kwargs)
        out = result if isinstance(result, ModelOutput) else ModelOutput(*result)
        logits, feats, sec = out.logits, out.features, list(out.secondary)
        plugin_outputs: dict[str, dict] = {}
        for plugin in self.plugins:
            try:
                logits, feats, sec, kwargs, extra = plugin.post_forward(
                    x, logits, feats, sec, self, **kwargs)
            except PluginError:
                raise
            except Exception as exc:
                raise PluginError(f"plugin {plugin.name!r} post_forward failed: {exc}") from exc
            plugin_outputs[plugin.name] = dict(extra or {})
        return ModelOutput(logits, feats, sec), plugin_outputs

    __call__ = forward


def _require(kwargs: Mapping[str, Any], names: tuple[str, ...], arch: str) -> None:
    missing = [n for n in names if n not in kwargs]
    if missing:
        raise ModelError(f"{arch} needs MODEL_KWARGS {missing}")


def _reject_unknown(kwargs: Mapping[str, Any], allowed: set[str], arch: str) -> None:
    extra = sorted(set(kwargs) - allowed)
    if extra:
        raise ModelError(f"{arch} got unexpected MODEL_KWARGS {extra}")


class LinearClassifier(ModelAbstract):
    """``logits = x W + b``; the features are the inputs themselves."""

    infer_shapes = True

    def model_attributes_setup(self, **kwargs):
        _require(kwargs, ("in_dim", "classes"), "LinearClassifier")
        _reject_unknown(kwargs, {"in_dim", "classes", "activation"}, "LinearClassifier")
        self.attributes["in_dim"] = int(kwargs["in_dim"])
        self.attributes["classes"] = int(kwargs["classes"])
        if self.attributes["classes"] < 2:
            raise ModelError("classes must be >= 2")

    def model_setup(self, **kwargs):
        d, c = self.attributes["in_dim"], self.attributes["classes"]
        self.add_parameter("W", glorot_uniform(self.rng, d, c))
        self.add_parameter("b", np.zeros(c))

    def forward_impl(self, x, **kwargs):
        p = self.parameters
        return x @ p["W"] + p["b"], x, []


class MLPClassifier(ModelAbstract):
    """One hidden relu layer; the features are the hidden activations."""

    infer_shapes = True

    def model_attributes_setup(self, **kwargs):
        _require(kwargs, ("in_dim", "hidden", "classes"), "MLPClassifier")
        _reject_unknown(kwargs, {"in_dim", "hidden", "classes", "activation"}, "MLPClassifier")
        if kwargs.get("activation", "relu") != "relu":
            raise ModelError("MLPClassifier supports only activation 'relu'")
        for key in ("in_dim", "hidden", "classes"):
            self.attributes[key] = int(kwargs[key])
        if self.attributes["classes"] < 2:
            raise ModelError("classes must be >= 2")

    def model_setup(self, **kwargs):
        d, h, c = (self.attributes[k] for k in ("in_dim", "hidden", "classes"))
        self.add_parameter("W1", glorot_uniform(self.rng, d, h))
        self.add_parameter("b1", np.zeros(h))
        self.add_parameter("W2", glorot_uniform(self.rng, h, c))
        self.add_parameter("b2", np.zeros(c))

    def hidden(self, x: np.ndarray) -> np.ndarray:
        p = self.parameters
        return np.maximum(x @ p["W1"] + p["b1"], 0.0)

    def forward_impl(self, x, **kwargs):
        h = self.hidden(x)
        p = self.parameters
        return h @ p["W2"] + p["b2"], h, []


def build_model(spec: ModelSpec, registry: Registry, seed: int = 0) -> ModelAbstract:
    reg = registry.resolve(ComponentKind.MODEL, spec.arch)
    model = reg.factory(spec, seed=seed)
    if not isinstance(model, ModelAbstract):
        raise ModelError(f"{spec.arch} did not build a ModelAbstract")
    return model


def get_parameters(model: ModelAbstract) -> np.ndarray:
    return model.parameters.flatten()


def set_parameters(model: ModelAbstract, vector: np.ndarray) -> None:
    model.parameters.load_flat(vector)


def parameter_digest(model: ModelAbstract) -> str:
    h = hashlib.sha256()
    for name, value in model.parameters.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()
