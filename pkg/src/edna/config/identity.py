"""Experiment identity and configuration diffs."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Iterator

from ..errors import ValidationError
from .schema import EffectiveConfig

__all__ = ["ExperimentKey", "derive_experiment_key", "diff", "ABSENT"]

_BAD = re.compile(r"[\s/\\]")


class _Absent:
    def __repr__(self) -> str:
        return "<absent>"

    def __reduce__(self):
        return "ABSENT"


ABSENT = _Absent()


@dataclass(frozen=True)
class ExperimentKey:
    core_name: str
    version: int
    backbone: str
    qualifier: str

    def __post_init__(self):
        for name in ("core_name", "backbone", "qualifier"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValidationError(f"SAVE.{_FIELD[name]}", "must be a non-empty string")
            if _BAD.search(value):
                raise ValidationError(f"SAVE.{_FIELD[name]}",
                                      f"may not contain whitespace or path separators: {value!r}")
        if isinstance(self.version, bool) or not isinstance(self.version, int) or self.version < 1:
            raise ValidationError("SAVE.MODEL_VERSION", "must be an integer >= 1")

    def __str__(self) -> str:
        return f"{self.core_name}-v{self.version}-{self.backbone}-{self.qualifier}"


_FIELD = {"core_name": "MODEL_CORE_NAME", "backbone": "MODEL_BACKBONE",
          "qualifier": "MODEL_QUALIFIER"}


def derive_experiment_key(cfg: EffectiveConfig) -> ExperimentKey:
    save = cfg.doc.get("SAVE")
    if not isinstance(save, dict):
        raise ValidationError("SAVE", "section missing")
    for field in ("MODEL_CORE_NAME", "MODEL_VERSION", "MODEL_BACKBONE", "MODEL_QUALIFIER"):
        if field not in save:
            raise ValidationError(f"SAVE.{field}", "missing")
    return ExperimentKey(save["MODEL_CORE_NAME"], save["MODEL_VERSION"],
                         save["MODEL_BACKBONE"], save["MODEL_QUALIFIER"])


def _leaves(node: Any, parts: tuple) -> Iterator[tuple[tuple, Any]]:
    if isinstance(node, dict) and node:
        for k, v in node.items():
            yield from _leaves(v, parts + (k,))
    elif isinstance(node, list) and node:
        for i, v in enumerate(node):
            yield from _leaves(v, parts + (i,))
    else:
        yield parts, node


def _render(parts: tuple) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
    return out


def _sort_key(parts: tuple) -> tuple:
    return tuple((1, p, "") if isinstance(p, int) else (0, 0, p) for p in parts)


def diff(a: EffectiveConfig, b: EffectiveConfig) -> list[tuple[str, Any, Any]]:
    """Path-sorted ``(path, old, new)`` changes from ``a`` to ``b``.

    Removed or added leaves use ``ABSENT`` on the missing side.
    """
    if a.hash == b.hash:
        return []
    left = dict(_leaves(dict(a.doc), ()))
    right = dict(_leaves(dict(b.doc), ()))
    changes = []
    for parts in sorted(set(left) | set(right), key=_sort_key):
        old = left.get(parts, ABSENT)
        new = right.get(parts, ABSENT)
        if type(old) is not type(new) or old != new:
            changes.append((_render(parts), old, new))
    return changes
