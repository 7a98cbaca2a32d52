"""Configuration schema, default filling, and validation."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..errors import ValidationError
from .parser import canonical_bytes, canonical_text

__all__ = [
    "Field",
    "SchemaSpec",
    "EffectiveConfig",
    "DEFAULT_SCHEMA",
    "apply_defaults",
    "validate",
    "REQUIRED",
]

_MISSING = object()
REQUIRED = _MISSING

_SCALARS = ("int", "float", "bool", "str")


@dataclass(frozen=True)
class Field:
    """One schema node.

    ``kind`` is a scalar type, ``map`` (free-form subtree), ``list`` (of
    ``item`` scalars, or anything when ``item`` is None), ``section`` (fixed
    ``children``), ``records`` (list of maps shaped by ``children``) or
    ``table`` (name -> map shaped by ``children``).
    """

    kind: str
    default: Any = _MISSING
    item: str | None = None
    children: Mapping[str, "Field"] = field(default_factory=dict)
    choices: tuple[Any, ...] | None = None
    minimum: float | None = None

    @property
    def required(self) -> bool:
        return self.default is _MISSING and self.kind not in ("section",)


def _f(kind: str, default: Any = _MISSING, **kw) -> Field:
    return Field(kind, default, **kw)


def _section(**children: Field) -> Field:
    return Field("section", children=children)


def _backup() -> Field:
    return _section(BACKUP=_f("bool", False), STORAGE_NAME=_f("str", "default"),
                    FREQUENCY=_f("int", 1, minimum=1))


@dataclass(frozen=True)
class SchemaSpec:
    sections: Mapping[str, Field]

    def default_document(self) -> dict[str, Any]:
        return apply_defaults({}, self)

    def with_defaults(self, overrides: Mapping[str, Any]) -> "SchemaSpec":
        """Copy of this schema whose defaults are replaced by ``overrides`` (dotted paths)."""
        sections = dict(self.sections)
        for dotted, value in overrides.items():
            head, *rest = dotted.split(".")
            sections[head] = _replace_default(sections[head], rest, value, dotted)
        return SchemaSpec(sections)


def _replace_default(node: Field, rest: list[str], value: Any, dotted: str) -> Field:
    if not rest:
        return Field(node.kind, value, node.item, node.children, node.choices, node.minimum)
    if node.kind not in ("section", "records", "table") or rest[0] not in node.children:
        raise ValidationError(dotted, "no such schema field")
    children = dict(node.children)
    children[rest[0]] = _replace_default(children[rest[0]], rest[1:], value, dotted)
    return Field(node.kind, node.default, node.item, children, node.choices, node.minimum)


_LOSS_ITEM = {
    "LOSSES": _f("list", item="str"),
    "LAMBDA": _f("list", [1.0], item="float"),
    "LABEL": _f("str", ""),
    "LOSS_KWARGS": _f("map", {}),
}
_OPTIMIZER_ITEM = {
    "OPTIMIZER": _f("str", "SGD"),
    "BASE_LR": _f("float", 1e-2, minimum=0.0),
    "OPTIMIZER_KWARGS": _f("map", {}),
}

DEFAULT_SCHEMA = SchemaSpec({
    "EXECUTION": _section(
        MODE=_f("str", "train", choices=("train", "deploy")),
        EPOCHS=_f("int", 10, minimum=0),
        BATCH_SIZE=_f("int", 32, minimum=1),
        SEED=_f("int", 42),
        SHUFFLE=_f("bool", True),
        TRAINER=_f("str", "ClassificationTrainer"),
        TRAINER_ARGS=_f("map", {}),
    ),
    "DATAREADER": _section(
        DATAREADER=_f("str", "Datareader"),
        CRAWLER=_f("str", "synthetic_gaussian"),
        CRAWLER_ARGS=_f("map", {}),
        DATASET=_f("str", "TransformDataset"),
        DATASET_ARGS=_f("map", {}),
        GENERATOR_ARGS=_f("map", {}),
        EVAL_FRACTION=_f("float", 0.2, minimum=0.0),
        QUEUE_CAPACITY=_f("int", 64, minimum=1),
    ),
    "SAVE": _section(
        MODEL_VERSION=_f("int", 1, minimum=1),
        MODEL_CORE_NAME=_f("str", "model"),
        MODEL_BACKBONE=_f("str", "base"),
        MODEL_QUALIFIER=_f("str", "all"),
        BACKUP=_f("bool", False),
        SAVE_FREQUENCY=_f("int", 5, minimum=1),
        CONFIG_BACKUP=_backup(),
        LOG_BACKUP=_backup(),
        MODEL_BACKUP=_backup(),
        ARTIFACTS_BACKUP=_backup(),
        PLUGIN_BACKUP=_backup(),
        METRICS_BACKUP=_backup(),
    ),
    "STORAGE": Field("table", {}, children={
        "TYPE": _f("str", "local_file"),
        "STORAGE_ARGS": _f("map", {}),
    }),
    "TRANSFORMATION": _section(ARGS=_f("map", {})),
    "TRAIN_TRANSFORMATION": _section(ARGS=_f("map", {})),
    "MODEL": _section(
        BUILDER=_f("str", "ednaml_model_builder"),
        MODEL_ARCH=_f("str"),
        MODEL_BASE=_f("str", ""),
        MODEL_KWARGS=_f("map", {}),
    ),
    "LOSS": Field("records", [{"LOSSES": ["SoftmaxLogitsLoss"], "LAMBDA": [1.0]}],
                  children=_LOSS_ITEM),
    "OPTIMIZER": Field("records", [{"OPTIMIZER": "SGD", "BASE_LR": 1e-2}],
                       children=_OPTIMIZER_ITEM),
    "SCHEDULER": _section(
        LR_SCHEDULER=_f("str", "constant", choices=("constant", "step_decay", "exponential")),
        GAMMA=_f("float", 0.1),
        STEP_SIZE=_f("int", 1, minimum=1),
    ),
    "LOSS_SCHEDULER": _section(
        POLICY=_f("str", "constant", choices=("constant", "exponential")),
        DECAY=_f("float", 1.0),
    ),
    "MODEL_PLUGIN": Field("records", [], children={
        "PLUGIN": _f("str"),
        "PLUGIN_NAME": _f("str", ""),
        "PLUGIN_KWARGS": _f("map", {}),
    }),
    "METRICS": Field("records", [], children={
        "METRIC_NAME": _f("str"),
        "METRIC_CLASS": _f("str"),
        "METRIC_TYPE": _f("str", ""),
        "METRIC_ARGS": _f("map", {}),
    }),
    "DEPLOYMENT": _section(
        DEPLOY=_f("str", "BaseDeploy"),
        MODEL_CHECKPOINT=_f("str", ""),
        DEPLOYMENT_ARGS=_f("map", {}),
    ),
})


def _fill(node: Field, value: Any) -> Any:
    if node.kind == "section":
        value = dict(value) if isinstance(value, dict) else value
        if not isinstance(value, dict):
            return value
        for name, child in node.children.items():
            if name in value:
                value[name] = _fill(child, value[name])
            elif child.kind == "section":
                value[name] = _fill(child, {})
            elif child.default is not _MISSING:
                value[name] = _fill(child, copy.deepcopy(child.default))
        return value
    if node.kind == "records" and isinstance(value, list):
        item = _section(**node.children)
        return [_fill(item, v) if isinstance(v, dict) else v for v in value]
    if node.kind == "table" and isinstance(value, dict):
        item = _section(**node.children)
        return {k: _fill(item, v) if isinstance(v, dict) else v for k, v in value.items()}
    return value


def apply_defaults(doc: Mapping[str, Any], schema: SchemaSpec = DEFAULT_SCHEMA) -> dict[str, Any]:
    """Fill every absent schema field with its default; present values are kept."""
    out = copy.deepcopy(dict(doc))
    for name, sect in schema.sections.items():
        if name in out:
            out[name] = _fill(sect, out[name])
        elif sect.kind == "section":
            out[name] = _fill(sect, {})
        elif sect.default is not _MISSING:
            out[name] = _fill(sect, copy.deepcopy(sect.default))
    return out


def _type_name(value: Any) -> str:
    if value is None:
        return "null"
    return {bool: "bool", int: "int", float: "float", str: "str", dict: "map",
            list: "list"}.get(type(value), type(value).__name__)


def _check_scalar(kind: str, value: Any, path: str) -> Any:
    if kind == "int" and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
        if not math.isfinite(value):
            raise ValidationError(path, "real must be finite")
        return float(value)
    if kind == "bool" and isinstance(value, bool):
        return value
    if kind == "str" and isinstance(value, str):
        return value
    raise ValidationError(path, f"expected {kind}, got {_type_name(value)} {value!r}")


def _check_free(value: Any, path: str) -> None:
    if value is None:
        raise ValidationError(path, "null values are not allowed after merging")
    if isinstance(value, float) and not math.isfinite(value):
        raise ValidationError(path, "real must be finite")
    if isinstance(value, dict):
        for k, v in value.items():
            _check_free(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _check_free(v, f"{path}[{i}]")


def _check(node: Field, value: Any, path: str) -> Any:
    if node.kind in _SCALARS:
        value = _check_scalar(node.kind, value, path)
        if node.choices is not None and value not in node.choices:
            raise ValidationError(path, f"must be one of {list(node.choices)}, got {value!r}")
        if node.minimum is not None and value < node.minimum:
            raise ValidationError(path, f"must be >= {node.minimum}, got {value!r}")
        return value
    if node.kind == "map":
        if not isinstance(value, dict):
            raise ValidationError(path, f"expected map, got {_type_name(value)}")
        _check_free(value, path)
        return value
    if node.kind == "list":
        if not isinstance(value, list):
            raise ValidationError(path, f"expected list, got {_type_name(value)}")
        if node.item is None:
            _check_free(value, path)
            return value
        return [_check_scalar(node.item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if node.kind in ("section", "records", "table"):
        if node.kind == "records":
            if not isinstance(value, list):
                raise ValidationError(path, f"expected list of maps, got {_type_name(value)}")
            item = _section(**node.children)
            return [_check(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
        if not isinstance(value, dict):
            raise ValidationError(path, f"expected map, got {_type_name(value)}")
        if node.kind == "table":
            item = _section(**node.children)
            return {k: _check(item, v, f"{path}.{k}") for k, v in value.items()}
        for key in value:
            if key not in node.children:
                raise ValidationError(f"{path}.{key}", "unknown field")
        out = {}
        for name, child in node.children.items():
            sub = f"{path}.{name}"
            if name not in value:
                if child.kind == "section":
                    out[name] = _check(child, {}, sub)
                    continue
                raise ValidationError(sub, "missing required field")
            out[name] = _check(child, value[name], sub)
        return out
    raise AssertionError(node.kind)


def _semantic_checks(doc: dict[str, Any]) -> None:
    for i, loss in enumerate(doc.get("LOSS", [])):
        if len(loss["LOSSES"]) != len(loss["LAMBDA"]):
            raise ValidationError(f"LOSS[{i}].LAMBDA",
                                  "needs exactly one weight per entry of LOSSES")
        if not loss["LOSSES"]:
            raise ValidationError(f"LOSS[{i}].LOSSES", "at least one loss is required")
    for i, opt in enumerate(doc.get("OPTIMIZER", [])):
        if opt["BASE_LR"] <= 0:
            raise ValidationError(f"OPTIMIZER[{i}].BASE_LR", "must be > 0")
    sched = doc.get("SCHEDULER")
    if sched and not 0.0 < sched["GAMMA"] <= 1.0:
        raise ValidationError("SCHEDULER.GAMMA", "must lie in (0, 1]")
    lsched = doc.get("LOSS_SCHEDULER")
    if lsched and not 0.0 < lsched["DECAY"] <= 1.0:
        raise ValidationError("LOSS_SCHEDULER.DECAY", "must lie in (0, 1]")
    frac = doc.get("DATAREADER", {}).get("EVAL_FRACTION", 0.0)
    if not 0.0 <= frac < 1.0:
        raise ValidationError("DATAREADER.EVAL_FRACTION", "must lie in [0, 1)")


@dataclass(frozen=True)
class EffectiveConfig:
    """Merged, default-filled, validated configuration and its SHA-256 hash."""

    doc: Mapping[str, Any]
    hash: bytes

    @property
    def hexdigest(self) -> str:
        return self.hash.hex()

    @property
    def canonical_text(self) -> str:
        return canonical_text(self.doc)

    def __getitem__(self, section: str) -> Any:
        return self.doc[section]

    def get(self, dotted: str, default: Any = None) -> Any:
        node: Any = self.doc
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node


def validate(doc: Mapping[str, Any], schema: SchemaSpec = DEFAULT_SCHEMA) -> EffectiveConfig:
    """Check ``doc`` against ``schema`` and return it with a canonical hash.

    Errors name the dotted path of the offending field.
    """
    if not isinstance(doc, Mapping):
        raise ValidationError("<root>", "document root must be a map")
    for name in doc:
        if name not in schema.sections:
            raise ValidationError(name, "unknown section")
    checked: dict[str, Any] = {}
    for name, sect in schema.sections.items():
        if name not in doc:
            if sect.kind == "section":
                checked[name] = _check(sect, {}, name)
                continue
            if sect.required:
                raise ValidationError(name, "missing required section")
            continue
        checked[name] = _check(sect, doc[name], name)
    _semantic_checks(checked)
    digest = hashlib.sha256(canonical_bytes(checked)).digest()
    return EffectiveConfig(checked, digest)
