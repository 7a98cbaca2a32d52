"""Declarative configuration: parse, compose, default-fill, validate, hash."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable, Mapping

from .identity import ABSENT, ExperimentKey, derive_experiment_key, diff
from .merge import ConfigLayerStack, deep_merge, load_stack, merge_layers, strip_nulls
from .parser import canonical_bytes, canonical_text, dump_yaml, parse_config
from .schema import (DEFAULT_SCHEMA, EffectiveConfig, Field, SchemaSpec, apply_defaults,
                     validate)

__all__ = [
    "ABSENT", "ConfigLayerStack", "DEFAULT_SCHEMA", "EffectiveConfig", "ExperimentKey",
    "Field", "SchemaSpec", "apply_defaults", "canonical_bytes", "canonical_text",
    "deep_merge", "derive_experiment_key", "diff", "dump_yaml", "effective_config",
    "load_stack", "merge_layers", "parse_config", "strip_nulls", "validate",
]


def effective_config(layers: ConfigLayerStack | Iterable[str | Path | Mapping[str, Any]],
                     schema: SchemaSpec = DEFAULT_SCHEMA) -> EffectiveConfig:
    """Merge, default-fill and validate a layer stack (or paths/mappings) in one call."""
    stack = layers if isinstance(layers, ConfigLayerStack) else load_stack(layers)
    return validate(apply_defaults(merge_layers(stack), schema), schema)
