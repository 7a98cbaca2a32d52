"""Two-tier component registry.

User registrations shadow built-ins of the same kind and name. Registrations
may declare the source file that defines them; ``snapshot_sources`` hashes
those files again so provenance bundles can capture the exact code used.
"""

from __future__ import annotations

import enum
import hashlib
import inspect
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

from .errors import (ComponentNotFoundError, DigestMismatchError, DuplicateRegistrationError,
                     FrozenRegistryError, RegistryError)

__all__ = ["ComponentKind", "Registration", "SourceDescriptor", "Registry", "file_digest"]


class ComponentKind(enum.Enum):
    MODEL = "model"
    TRAINER = "trainer"
    DEPLOYMENT = "deployment"
    PLUGIN = "plugin"
    METRIC = "metric"
    STORAGE = "storage"
    CRAWLER = "crawler"
    DATASET = "dataset"
    LOSS = "loss"
    OPTIMIZER = "optimizer"
    SCHEDULER = "scheduler"


def file_digest(path: str | Path) -> bytes:
    return hashlib.sha256(Path(path).read_bytes()).digest()


@dataclass(frozen=True)
class SourceDescriptor:
    path: str
    digest: bytes


@dataclass(frozen=True)
class Registration:
    kind: ComponentKind
    name: str
    factory: Callable[..., Any]
    source: SourceDescriptor | None = None

    def __post_init__(self):
        if not isinstance(self.kind, ComponentKind):
            raise RegistryError(f"unknown component kind {self.kind!r}")
        if not self.name:
            raise RegistryError("registration name must be non-empty")


class Registry:
    def __init__(self):
        self._tiers: dict[str, dict[tuple[ComponentKind, str], Registration]] = {
            "user": {},
            "built_in": {},
        }
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def register(self, reg: Registration, tier: str = "user") -> Registration:
        if self._frozen:
            raise FrozenRegistryError(f"registry is frozen; cannot add {reg.kind.name} {reg.name!r}")
        if tier not in self._tiers:
            raise RegistryError(f"unknown tier {tier!r}")
        table = self._tiers[tier]
        key = (reg.kind, reg.name)
        if key in table:
            raise DuplicateRegistrationError(
                f"{reg.kind.name} {reg.name!r} already registered in the {tier} tier")
        if reg.source is not None and file_digest(reg.source.path) != reg.source.digest:
            raise DigestMismatchError(f"source digest does not match {reg.source.path}")
        table[key] = reg
        return reg

    def add(self, kind: ComponentKind, factory: Callable[..., Any], name: str | None = None,
            source: str | Path | bool | None = None, tier: str = "user") -> Registration:
        """Register ``factory``; ``source=True`` records the file that defines it."""
        if source is True:
            source = inspect.getsourcefile(factory)
            if source is None:
                raise RegistryError(f"cannot locate the source file of {factory!r}")
        descriptor = None
        if source:
            path = Path(source).resolve()
            descriptor = SourceDescriptor(str(path), file_digest(path))
        return self.register(Registration(kind, name or factory.__name__, factory, descriptor), tier)

    def decorator(self, kind: ComponentKind, name: str | None = None, source: Any = True,
                  tier: str = "user"):
        """Class decorator form of :meth:`add`."""
        def wrap(obj):
            self.add(kind, obj, name=name, source=source, tier=tier)
            return obj
        return wrap

    def resolve(self, kind: ComponentKind, name: str) -> Registration:
        for tier in ("user", "built_in"):
            reg = self._tiers[tier].get((kind, name))
            if reg is not None:
                return reg
        raise ComponentNotFoundError(kind, name, self.names(kind))

    def names(self, kind: ComponentKind) -> list[str]:
        return sorted({n for tier in self._tiers.values() for (k, n) in tier if k is kind})

    def freeze(self) -> None:
        self._frozen = True

    def registrations(self) -> Iterator[tuple[str, Registration]]:
        for tier, table in self._tiers.items():
            for reg in table.values():
                yield tier, reg

    def snapshot_sources(self) -> list[tuple[ComponentKind, str, str, bytes]]:
        """``(kind, name, path, digest)`` per registration with a source file.

        Each file is re-hashed; a change since registration raises
        DigestMismatchError and a missing file raises FileNotFoundError.
        """
        out = []
        for _tier, reg in self.registrations():
            if reg.source is None:
                continue
            path = Path(reg.source.path)
            if not path.is_file():
                raise FileNotFoundError(f"source of {reg.kind.name} {reg.name!r} is gone: {path}")
            if file_digest(path) != reg.source.digest:
                raise DigestMismatchError(
                    f"source of {reg.kind.name} {reg.name!r} changed since registration: {path}")
            out.append((reg.kind, reg.name, str(path), reg.source.digest))
        out.sort(key=lambda e: (e[0].value, e[1], e[2]))
        return out

    def copy(self) -> "Registry":
        """Unfrozen copy with the same registrations."""
        new = Registry()
        for tier, table in self._tiers.items():
            new._tiers[tier] = dict(table)
        return new
