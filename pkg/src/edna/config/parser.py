"""Reading and writing configuration text.

The accepted language is a YAML subset: block and flow maps, lists, and
scalars resolved with a small fixed grammar (decimal integers, reals with an
optional exponent, ``true``/``false``, ``null``/``~``, strings). Anchors,
aliases, and multi-document streams are rejected.
"""

from __future__ import annotations

import json
import math
import re
from typing import Any

import yaml

from ..errors import ConfigSyntaxError

__all__ = ["parse_config", "canonical_text", "canonical_bytes", "dump_yaml"]

_BOOL = re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$")
_NULL = re.compile(r"^(?:~|null|Null|NULL|)$")
_INT = re.compile(r"^[-+]?[0-9]+$")
_FLOAT = re.compile(r"^[-+]?(?:\.[0-9]+|[0-9]+(?:\.[0-9]*)?)(?:[eE][-+]?[0-9]+)?$")


class _SubsetLoader(yaml.SafeLoader):
    def compose_node(self, parent, index):
        if self.check_event(yaml.AliasEvent):
            event = self.peek_event()
            raise ConfigSyntaxError("aliases are not supported", *_mark(event.start_mark))
        event = self.peek_event()
        if getattr(event, "anchor", None) is not None:
            raise ConfigSyntaxError("anchors are not supported", *_mark(event.start_mark))
        return super().compose_node(parent, index)

    def construct_mapping(self, node, deep=False):
        if not isinstance(node, yaml.MappingNode):
            return super().construct_mapping(node, deep=deep)
        out: dict[str, Any] = {}
        for key_node, value_node in node.value:
            if key_node.tag == "tag:yaml.org,2002:merge":
                raise ConfigSyntaxError("merge keys are not supported", *_mark(key_node.start_mark))
            key = self.construct_object(key_node, deep=True)
            if not isinstance(key, str) or not key:
                raise ConfigSyntaxError(f"map keys must be non-empty strings, got {key!r}",
                                        *_mark(key_node.start_mark))
            if key in out:
                raise ConfigSyntaxError(f"duplicate key {key!r}", *_mark(key_node.start_mark))
            out[key] = self.construct_object(value_node, deep=True)
        return out


def _mark(mark) -> tuple[int | None, int | None]:
    if mark is None:
        return None, None
    return mark.line + 1, mark.column + 1


_SubsetLoader.yaml_implicit_resolvers = {}
_SubsetLoader.add_implicit_resolver("tag:yaml.org,2002:bool", _BOOL, list("tTfF"))
_SubsetLoader.add_implicit_resolver("tag:yaml.org,2002:null", _NULL, ["~", "n", "N", ""])
_SubsetLoader.add_implicit_resolver("tag:yaml.org,2002:int", _INT, list("-+0123456789"))
_SubsetLoader.add_implicit_resolver("tag:yaml.org,2002:float", _FLOAT, list("-+0123456789."))


def _construct_int(loader, node):
    value = loader.construct_scalar(node)
    if not _INT.match(value):
        raise ConfigSyntaxError(f"invalid integer {value!r}", *_mark(node.start_mark))
    return int(value)


def _construct_float(loader, node):
    value = loader.construct_scalar(node)
    if not _FLOAT.match(value):
        raise ConfigSyntaxError(f"invalid real {value!r}", *_mark(node.start_mark))
    return float(value)


def _construct_bool(loader, node):
    return loader.construct_scalar(node).lower() == "true"


_SubsetLoader.add_constructor("tag:yaml.org,2002:int", _construct_int)
_SubsetLoader.add_constructor("tag:yaml.org,2002:float", _construct_float)
_SubsetLoader.add_constructor("tag:yaml.org,2002:bool", _construct_bool)
_SubsetLoader.add_constructor("tag:yaml.org,2002:map", _SubsetLoader.construct_mapping)
for _tag in ("timestamp", "binary", "set", "omap", "pairs"):
    _SubsetLoader.yaml_constructors.pop(f"tag:yaml.org,2002:{_tag}", None)


def parse_config(text: str, origin: str | None = None) -> dict[str, Any]:
    """Parse configuration text into a plain dict tree.

    Raises ConfigSyntaxError (with 1-based line/column where known) for
    malformed text or a root that is not a map. Empty text yields ``{}``.
    """
    loader = _SubsetLoader(text)
    try:
        doc = loader.get_single_data()
    except ConfigSyntaxError as exc:
        raise ConfigSyntaxError(exc.message, exc.line, exc.column, origin) from None
    except yaml.MarkedYAMLError as exc:
        line, col = _mark(exc.problem_mark or exc.context_mark)
        msg = exc.problem or str(exc)
        raise ConfigSyntaxError(msg, line, col, origin) from None
    except yaml.YAMLError as exc:
        raise ConfigSyntaxError(str(exc), origin=origin) from None
    finally:
        loader.dispose()
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigSyntaxError(f"document root must be a map, got {type(doc).__name__}",
                                1, 1, origin)
    return doc


def _check_finite(node: Any, path: str = "") -> None:
    if isinstance(node, float) and not math.isfinite(node):
        raise ValueError(f"non-finite real at {path or '<root>'}")
    if isinstance(node, dict):
        for k, v in node.items():
            _check_finite(v, f"{path}.{k}" if path else k)
    elif isinstance(node, list):
        for i, v in enumerate(node):
            _check_finite(v, f"{path}[{i}]")


def canonical_text(doc: Any) -> str:
    """Single-line canonical form: sorted keys, shortest round-trip reals.

    The output is JSON, which the parser above accepts, so canonical text is
    itself a valid configuration document.
    """
    _check_finite(doc)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def canonical_bytes(doc: Any) -> bytes:
    return canonical_text(doc).encode("utf-8")


def _scalar(value: Any) -> str:
    if value is None:
        return "null"
    return json.dumps(value, ensure_ascii=False, allow_nan=False)


def _emit(node: Any, indent: int, out: list[str]) -> None:
    pad = "  " * indent
    if isinstance(node, dict):
        for key in sorted(node):
            value = node[key]
            bare = re.match(r"^[A-Za-z_][A-Za-z0-9_.-]*$", key) and not (
                _BOOL.match(key) or _NULL.match(key))
            k = key if bare else _scalar(key)
            if isinstance(value, dict) and value:
                out.append(f"{pad}{k}:")
                _emit(value, indent + 1, out)
            elif isinstance(value, list) and value:
                out.append(f"{pad}{k}:")
                _emit(value, indent + 1, out)
            else:
                out.append(f"{pad}{k}: {_inline(value)}")
    else:
        for item in node:
            if isinstance(item, (dict, list)) and item:
                sub: list[str] = []
                _emit(item, 0, sub)
                out.append(f"{pad}- {sub[0]}")
                out.extend(f"{pad}  {line}" for line in sub[1:])
            else:
                out.append(f"{pad}- {_inline(item)}")


def _inline(value: Any) -> str:
    if isinstance(value, dict):
        return "{}"
    if isinstance(value, list):
        return "[]"
    return _scalar(value)


def dump_yaml(doc: dict[str, Any]) -> str:
    """Readable block-style rendering with sorted keys; parses back to ``doc``."""
    if not doc:
        return "{}\n"
    lines: list[str] = []
    _emit(doc, 0, lines)
    return "\n".join(lines) + "\n"
