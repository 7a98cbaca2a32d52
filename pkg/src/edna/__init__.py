"""A small declarative ML pipeline engine on numpy."""

from .storage import ENGINE_VERSION as __version__

from .builtins import default_registry
from .core import EdnaML, apply, deploy, run_chain, train
from .registry import ComponentKind, Registry

__all__ = ["__version__", "ComponentKind", "EdnaML", "Registry", "apply", "default_registry",
           "deploy", "run_chain", "train"]
