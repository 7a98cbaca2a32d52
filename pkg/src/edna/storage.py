"""Storage backends, backup policies, checkpoints and provenance bundles.

Checkpoint byte layout (all integers little-endian)::

    b"EDNA" | u16 format version | u32 manifest length | manifest (UTF-8 JSON)
    | float64 tensor payloads in table-of-contents order | SHA-256 of all prior bytes
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .config import ConfigLayerStack, EffectiveConfig, canonical_text, effective_config
from .errors import (CorruptRecordError, DigestMismatchError, KeyNotFoundError, StorageError,
                     ValidationError)
from .optim import OptimizerState, SchedulerState
from .registry import Registry

__all__ = [
    "Category", "StorageBackend", "LocalFileBackend", "InMemoryBackend", "BackupPolicy",
    "should_save", "policies_from_config", "StorageSet", "Checkpoint", "checkpoint_key",
    "encode_checkpoint", "decode_checkpoint", "write_checkpoint", "read_checkpoint",
    "ProvenanceBundle", "package_provenance", "load_provenance", "verify_provenance",
]

ENGINE_VERSION = "0.1.0"


class Category(enum.Enum):
    CONFIG = "config"
    LOG = "log"
    MODEL = "model"
    ARTIFACT = "artifact"
    PLUGIN = "plugin"
    METRIC = "metric"

    @classmethod
    def parse(cls, text: str | "Category") -> "Category":
        if isinstance(text, Category):
            return text
        try:
            return cls[text.upper()]
        except KeyError:
            raise StorageError(f"unknown storage category {text!r}") from None


def _check_key(key: str) -> None:
    if not key or not isinstance(key, str):
        raise StorageError("storage keys must be non-empty strings")
    parts = key.split("/")
    if ".." in parts or key.startswith("/") or "\\" in key or "" in parts[:-1]:
        raise StorageError(f"illegal storage key {key!r}")


class StorageBackend:
    """Byte store addressed by (category, key); ``/`` separates key levels."""

    kind = "abstract"

    def __init__(self, name: str):
        self.name = name

    def put(self, category: Category, key: str, data: bytes) -> None:
        raise NotImplementedError

    def get(self, category: Category, key: str) -> bytes:
        raise NotImplementedError

    def exists(self, category: Category, key: str) -> bool:
        raise NotImplementedError

    def list(self, category: Category, prefix: str = "") -> list[str]:
        raise NotImplementedError


class InMemoryBackend(StorageBackend):
    kind = "in_memory"

    def __init__(self, name: str = "memory"):
        super().__init__(name)
        self._data: dict[tuple[Category, str], bytes] = {}
        self._lock = threading.Lock()

    def put(self, category, key, data):
        _check_key(key)
        with self._lock:
            self._data[(Category.parse(category), key)] = bytes(data)

    def get(self, category, key):
        _check_key(key)
        try:
            with self._lock:
                return self._data[(Category.parse(category), key)]
        except KeyError:
            raise KeyNotFoundError(f"{self.name}: no {category.name} key {key!r}") from None

    def exists(self, category, key):
        _check_key(key)
        return (Category.parse(category), key) in self._data

    def list(self, category, prefix=""):
        category = Category.parse(category)
        with self._lock:
            return sorted(k for c, k in self._data if c is category and k.startswith(prefix))


class LocalFileBackend(StorageBackend):
    """Files at ``{root}/{category}/{key}``, replaced atomically on write."""

    kind = "local_file"

    def __init__(self, name: str = "default", root: str | Path = "./edna_store"):
        super().__init__(name)
        self.root = Path(root)

    def path_for(self, category: Category, key: str) -> Path:
        _check_key(key)
        return self.root / Category.parse(category).value / key

    def put(self, category, key, data):
        path = self.path_for(category, key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as exc:
            raise StorageError(f"{self.name}: cannot write {key!r}: {exc}") from exc

    def get(self, category, key):
        path = self.path_for(category, key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise KeyNotFoundError(f"{self.name}: no {Category.parse(category).name} key {key!r}") from None
        except OSError as exc:
            raise StorageError(f"{self.name}: cannot read {key!r}: {exc}") from exc

    def exists(self, category, key):
        return self.path_for(category, key).is_file()

    def list(self, category, prefix=""):
        base = self.root / Category.parse(category).value
        if not base.is_dir():
            return []
        keys = []
        for path in base.rglob("*"):
            if path.is_file() and not path.name.startswith(".tmp-"):
                key = path.relative_to(base).as_posix()
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)


# ---------------------------------------------------------------- policies


@dataclass(frozen=True)
class BackupPolicy:
    category: Category
    backend_name: str
    enabled: bool = False
    frequency: int = 1

    def __post_init__(self):
        if self.frequency < 1:
            raise StorageError("backup frequency must be >= 1")


def should_save(policy: BackupPolicy, epoch: int) -> bool:
    return policy.enabled and epoch >= 1 and epoch % policy.frequency == 0


_BACKUP_SECTIONS = {
    Category.CONFIG: "CONFIG_BACKUP",
    Category.LOG: "LOG_BACKUP",
    Category.MODEL: "MODEL_BACKUP",
    Category.ARTIFACT: "ARTIFACTS_BACKUP",
    Category.PLUGIN: "PLUGIN_BACKUP",
    Category.METRIC: "METRICS_BACKUP",
}


def policies_from_config(cfg: EffectiveConfig) -> dict[Category, BackupPolicy]:
    save = cfg["SAVE"]
    out = {}
    for category, section in _BACKUP_SECTIONS.items():
        sect = save[section]
        enabled = sect["BACKUP"] or (category is Category.MODEL and save["BACKUP"])
        out[category] = BackupPolicy(category, sect["STORAGE_NAME"], enabled, sect["FREQUENCY"])
    return out


class StorageSet:
    """The primary backend plus named backup backends and their policies."""

    def __init__(self, primary: StorageBackend, backends: Mapping[str, StorageBackend] | None = None,
                 policies: Mapping[Category, BackupPolicy] | None = None):
        self.primary = primary
        self.backends = {primary.name: primary, **dict(backends or {})}
        self.policies = dict(policies or {})
        for policy in self.policies.values():
            if policy.enabled and policy.backend_name not in self.backends:
                raise ValidationError(
                    f"SAVE.{_BACKUP_SECTIONS[policy.category]}.STORAGE_NAME",
                    f"no storage named {policy.backend_name!r}; configured: {sorted(self.backends)}")

    def backup(self, category: Category, prefix: str, epoch: int) -> list[str]:
        """Copy ``prefix`` keys of ``category`` to the policy's backend when due."""
        policy = self.policies.get(category)
        if policy is None or not should_save(policy, epoch):
            return []
        target = self.backends[policy.backend_name]
        if target is self.primary:
            return []
        keys = self.primary.list(category, prefix)
        for key in keys:
            target.put(category, key, self.primary.get(category, key))
        return keys


# -------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"EDNA"
_CKPT_VERSION = 1


def checkpoint_key(experiment_key: str, epoch: int) -> str:
    return f"{experiment_key}/model/epoch{int(epoch)}.ckpt"


@dataclass
class Checkpoint:
    experiment_key: str
    epoch: int
    params: np.ndarray
    param_layout: list[tuple[str, tuple[int, ...]]]
    optimizer_state: OptimizerState
    scheduler_state: SchedulerState
    lambda_state: dict[str, Any]
    rng_state: dict[str, Any]
    config_hash: bytes
    counters: dict[str, Any] = field(default_factory=dict)
    plugin_states: dict[str, bytes] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.experiment_key == other.experiment_key and self.epoch == other.epoch
                and np.array_equal(self.params, other.params)
                and [(n, tuple(s)) for n, s in self.param_layout]
                == [(n, tuple(s)) for n, s in other.param_layout]
                and self.optimizer_state == other.optimizer_state
                and self.scheduler_state == other.scheduler_state
                and self.lambda_state == other.lambda_state and self.rng_state == other.rng_state
                and self.config_hash == other.config_hash and self.counters == other.counters
                and self.plugin_states == other.plugin_states)


def _tensor_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = []
    offset = 0
    for name, shape in ckpt.param_layout:
        n = int(np.prod(shape)) if shape else 1
        tensors.append((f"param/{name}", ckpt.params[offset:offset + n].reshape(shape)))
        offset += n
    if offset != ckpt.params.shape[0]:
        raise CorruptRecordError("parameter layout does not cover the parameter vector")
    tensors.append(("optimizer/m", ckpt.optimizer_state.m))
    tensors.append(("optimizer/v", ckpt.optimizer_state.v))
    toc, pos = [], 0
    for name, arr in tensors:
        nbytes = arr.size * 8
        toc.append({"name": name, "shape": list(arr.shape), "offset": pos, "nbytes": nbytes})
        pos += nbytes
    sched = ckpt.scheduler_state
    manifest = {
        "experiment_key": ckpt.experiment_key,
        "epoch": int(ckpt.epoch),
        "config_hash": ckpt.config_hash.hex(),
        "counters": ckpt.counters,
        "optimizer": ckpt.optimizer_state.to_manifest(),
        "scheduler": {"kind": sched.kind, "gamma": sched.gamma, "step_size": sched.step_size,
                      "epoch_counter": sched.epoch_counter},
        "lambdas": ckpt.lambda_state,
        "rng": ckpt.rng_state,
        "plugins": {k: v.hex() for k, v in sorted(ckpt.plugin_states.items())},
        "tensors": toc,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    head = _CKPT_MAGIC + struct.pack("<HI", _CKPT_VERSION, len(body)) + body
    blob = head + b"".join(_tensor_bytes(a) for _, a in tensors)
    return blob + hashlib.sha256(blob).digest()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 10 + 32 or data[:4] != _CKPT_MAGIC:
        raise CorruptRecordError("not a checkpoint (bad magic or truncated)")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CorruptRecordError("checkpoint digest mismatch")
    version, mlen = struct.unpack("<HI", data[4:10])
    if version != _CKPT_VERSION:
        raise CorruptRecordError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(data[10:10 + mlen].decode("utf-8"))
    except ValueError as exc:
        raise CorruptRecordError(f"checkpoint manifest unreadable: {exc}") from None
    payload = data[10 + mlen:-32]
    tensors = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CorruptRecordError(f"tensor {entry['name']} truncated")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(
            entry["shape"])
    layout = [(e["name"][len("param/"):], tuple(e["shape"])) for e in manifest["tensors"]
              if e["name"].startswith("param/")]
    params = (np.concatenate([tensors["param/" + n].ravel() for n, _ in layout])
              if layout else np.zeros(0))
    s = manifest["scheduler"]
    return Checkpoint(
        experiment_key=manifest["experiment_key"],
        epoch=manifest["epoch"],
        params=params,
        param_layout=layout,
        optimizer_state=OptimizerState.from_manifest(manifest["optimizer"], tensors["optimizer/m"],
                                                     tensors["optimizer/v"]),
        scheduler_state=SchedulerState(s["kind"], s["gamma"], s["step_size"], s["epoch_counter"]),
        lambda_state=manifest["lambdas"],
        rng_state=manifest["rng"],
        config_hash=bytes.fromhex(manifest["config_hash"]),
        counters=manifest["counters"],
        plugin_states={k: bytes.fromhex(v) for k, v in manifest["plugins"].items()},
    )


def write_checkpoint(ckpt: Checkpoint, backend: StorageBackend) -> str:
    key = checkpoint_key(ckpt.experiment_key, ckpt.epoch)
    backend.put(Category.MODEL, key, encode_checkpoint(ckpt))
    return key


def read_checkpoint(key: str, backend: StorageBackend) -> Checkpoint:
    return decode_checkpoint(backend.get(Category.MODEL, key))


# --------------------------------------------------------------- provenance


@dataclass(frozen=True)
class ProvenanceBundle:
    effective_config: str
    layer_files: tuple[tuple[str, str], ...]
    component_sources: tuple[tuple[str, str, str, bytes, bytes], ...]
    engine_version: str
    seed: int
    config_hash: bytes


def _sha(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def package_provenance(experiment_key: str, stack: ConfigLayerStack, cfg: EffectiveConfig,
                       registry: Registry, backend: StorageBackend) -> str:
    """Write the config layers, effective config and custom sources; return the bundle key."""
    prefix = f"{experiment_key}/provenance/"
    sources = []
    for i, (kind, name, path, digest) in enumerate(registry.snapshot_sources()):
        data = Path(path).read_bytes()
        if _sha(data) != digest:
            raise DigestMismatchError(f"source {path} changed while packaging")
        stored = f"sources/{i:03d}-{kind.value}-{name}-{Path(path).name}"
        backend.put(Category.CONFIG, prefix + stored, data)
        sources.append({"kind": kind.value, "name": name, "path": path,
                        "digest": digest.hex(), "file": stored})
    layers = []
    for i, (origin, text) in enumerate(zip(stack.sources, stack.texts)):
        stored = f"layers/{i:03d}.yml"
        data = text.encode("utf-8")
        backend.put(Category.CONFIG, prefix + stored, data)
        layers.append({"origin": origin, "file": stored, "digest": _sha(data).hex()})
    effective = cfg.canonical_text.encode("utf-8")
    backend.put(Category.CONFIG, prefix + "effective.json", effective)
    manifest = {
        "engine_version": ENGINE_VERSION,
        "seed": cfg["EXECUTION"]["SEED"],
        "config_hash": cfg.hexdigest,
        "experiment_key": experiment_key,
        "layers": layers,
        "sources": sources,
    }
    backend.put(Category.CONFIG, prefix + "bundle.json",
                json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8"))
    return prefix


def load_provenance(backend: StorageBackend, key: str) -> ProvenanceBundle:
    """Read a bundle back, checking every stored digest."""
    prefix = key if key.endswith("/") else key + "/"
    manifest = json.loads(backend.get(Category.CONFIG, prefix + "bundle.json"))
    layers = []
    for entry in manifest["layers"]:
        data = backend.get(Category.CONFIG, prefix + entry["file"])
        if _sha(data).hex() != entry["digest"]:
            raise DigestMismatchError(f"layer {entry['origin']} does not match its digest")
        layers.append((entry["origin"], data.decode("utf-8")))
    sources = []
    for entry in manifest["sources"]:
        data = backend.get(Category.CONFIG, prefix + entry["file"])
        if _sha(data).hex() != entry["digest"]:
            raise DigestMismatchError(
                f"source of {entry['kind']} {entry['name']!r} does not match its digest")
        sources.append((entry["kind"], entry["name"], entry["path"], bytes.fromhex(entry["digest"]),
                        data))
    effective = backend.get(Category.CONFIG, prefix + "effective.json").decode("utf-8")
    bundle = ProvenanceBundle(effective, tuple(layers), tuple(sources), manifest["engine_version"],
                              manifest["seed"], bytes.fromhex(manifest["config_hash"]))
    if _sha(effective.encode("utf-8")) != bundle.config_hash:
        raise DigestMismatchError("effective config does not match the bundle's config hash")
    return bundle


def verify_provenance(bundle: ProvenanceBundle) -> EffectiveConfig:
    """Re-merge the bundle's layers and confirm they reproduce its config hash."""
    cfg = effective_config(ConfigLayerStack.from_texts(bundle.layer_files))
    if cfg.hash != bundle.config_hash:
        raise DigestMismatchError("re-merged layers do not reproduce the bundle's config hash")
    return cfg
