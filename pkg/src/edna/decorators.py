"""Marker decorators for component files loaded with ``EdnaML.add(path)``.

The decorators only tag the object; registration happens when the file is
loaded, so the registry records the file as the component's source.
"""

from __future__ import annotations

from typing import Any, Callable

from .registry import ComponentKind

__all__ = ["MARK", "register", "register_model", "register_trainer", "register_deployment",
           "register_plugin", "register_metric", "register_storage", "register_crawler",
           "register_dataset", "register_loss"]

MARK = "__edna_component__"


def register(kind: ComponentKind, name: str | None = None) -> Callable[[Any], Any]:
    def tag(obj):
        setattr(obj, MARK, (kind, name or obj.__name__))
        return obj
    return tag


def _shortcut(kind: ComponentKind):
    def deco(obj=None, *, name: str | None = None):
        if obj is None:
            return register(kind, name)
        return register(kind, name)(obj)
    deco.__name__ = f"register_{kind.value}"
    return deco


register_model = _shortcut(ComponentKind.MODEL)
register_trainer = _shortcut(ComponentKind.TRAINER)
register_deployment = _shortcut(ComponentKind.DEPLOYMENT)
register_plugin = _shortcut(ComponentKind.PLUGIN)
register_metric = _shortcut(ComponentKind.METRIC)
register_storage = _shortcut(ComponentKind.STORAGE)
register_crawler = _shortcut(ComponentKind.CRAWLER)
register_dataset = _shortcut(ComponentKind.DATASET)
register_loss = _shortcut(ComponentKind.LOSS)
