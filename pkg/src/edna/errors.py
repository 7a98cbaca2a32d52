"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class EdnaError(Exception):
    """Base class for all engine errors."""


class ConfigError(EdnaError):
    """Raised for any problem with configuration layers."""


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 origin: str | None = None):
        self.message = message
        self.line = line
        self.column = column
        self.origin = origin
        where = ""
        if origin:
            where += f"{origin}:"
        if line is not None:
            where += f"{line}:{column}:"
        super().__init__(f"{where} {message}".strip())


class ValidationError(ConfigError):
    """Schema violation. ``path`` names the offending field, e.g. ``EXECUTION.EPOCHS``."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class RegistryError(EdnaError):
    pass


class FrozenRegistryError(RegistryError):
    pass


class DuplicateRegistrationError(RegistryError):
    pass


class ComponentNotFoundError(RegistryError):
    def __init__(self, kind, name: str, available: list[str]):
        self.kind = kind
        self.name = name
        self.available = available
        listing = ", ".join(available) or "<none>"
        super().__init__(f"no {kind.name} named {name!r}; available: {listing}")


class DigestMismatchError(EdnaError):
    """A stored digest does not match the bytes it claims to describe."""


class CorruptRecordError(EdnaError):
    """Serialized bytes failed a structural or digest check."""


class StorageError(EdnaError):
    pass


class KeyNotFoundError(StorageError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class DataError(EdnaError):
    pass


class ModelError(EdnaError):
    pass


class PluginError(EdnaError):
    pass


class MetricError(EdnaError):
    pass


class OptimError(EdnaError):
    pass


class TrainingError(EdnaError):
    pass


class CheckpointError(EdnaError):
    pass


class ConfigDriftError(CheckpointError):
    """Checkpoint was produced by a run with a different effective configuration."""


class ConnectorClosedError(EdnaError):
    pass


class UpstreamFailedError(EdnaError):
    pass


class ChainError(EdnaError):
    pass
