"""Layer composition: deep merge with null-as-delete and a strict left fold."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..errors import ConfigError
from .parser import canonical_text, parse_config

__all__ = ["deep_merge", "strip_nulls", "merge_layers", "ConfigLayerStack", "load_stack"]


def strip_nulls(node: Any) -> Any:
    """Return a copy of ``node`` with every null-valued map entry removed."""
    if isinstance(node, dict):
        return {k: strip_nulls(v) for k, v in node.items() if v is not None}
    if isinstance(node, list):
        return [strip_nulls(v) for v in node]
    return node


def deep_merge(base: Mapping[str, Any], overlay: Mapping[str, Any]) -> dict[str, Any]:
    """Merge ``overlay`` onto ``base`` without mutating either.

    Maps merge recursively; scalars and lists in the overlay replace the base
    value wholesale; a null in the overlay deletes the key.
    """
    out = copy.deepcopy(dict(base))
    for key, value in overlay.items():
        if value is None:
            out.pop(key, None)
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = strip_nulls(copy.deepcopy(value))
    return out


@dataclass(frozen=True)
class ConfigLayerStack:
    """Ordered configuration layers, base first.

    ``texts`` keeps each layer's raw text (what provenance bundles store);
    for layers given as literal mappings it is their canonical text.
    """

    layers: tuple[dict[str, Any], ...]
    sources: tuple[str, ...]
    texts: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a layer stack needs at least one layer")
        if len(self.sources) != len(self.layers):
            raise ConfigError("one origin label per layer is required")
        if not self.texts:
            object.__setattr__(self, "texts", tuple(canonical_text(d) for d in self.layers))

    @classmethod
    def from_texts(cls, items: Iterable[tuple[str, str]]) -> "ConfigLayerStack":
        origins, texts, docs = [], [], []
        for origin, text in items:
            docs.append(parse_config(text, origin=origin))
            origins.append(origin)
            texts.append(text)
        return cls(tuple(docs), tuple(origins), tuple(texts))

    def __add__(self, other: "ConfigLayerStack") -> "ConfigLayerStack":
        return ConfigLayerStack(self.layers + other.layers, self.sources + other.sources,
                                self.texts + other.texts)


def load_stack(layers: Iterable[str | Path | Mapping[str, Any]]) -> ConfigLayerStack:
    """Build a stack from file paths and/or literal mappings, in order."""
    items: list[tuple[str, str]] = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Mapping):
            items.append((f"<literal:{i}>", canonical_text(dict(layer))))
        else:
            path = Path(layer)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config layer {path}: {exc}") from exc
            items.append((str(path), text))
    return ConfigLayerStack.from_texts(items)


def merge_layers(stack: ConfigLayerStack) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for layer in stack.layers:
        result = deep_merge(result, layer)
    return strip_nulls(result)
