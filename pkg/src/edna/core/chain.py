"""Pipelines of pipelines: stages wired by connectors, each with its own config stack."""

from __future__ import annotations

import logging
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..builtins import default_registry
from ..config import ConfigLayerStack, canonical_text, load_stack, parse_config
from ..data import is_record_payload, payload_to_record
from ..errors import ChainError, UpstreamFailedError
from ..registry import Registry
from .connectors import END, Connector, ConnectorRecord, FileHandoffConnector, InProcessQueue, to_plain
from .facade import deploy, train
from .pipeline import apply

logger = logging.getLogger("edna.chain")

__all__ = ["Trigger", "StageSpec", "ChainManifest", "StageStatus", "load_chain_manifest",
           "run_chain"]


@dataclass(frozen=True)
class Trigger:
    kind: str = "once"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("once", "periodic", "on_upstream_batch"):
            raise ChainError(f"unknown trigger {self.kind!r}")
        if self.kind == "periodic" and not self.value > 0:
            raise ChainError("periodic trigger needs a positive number of seconds")
        if self.kind == "on_upstream_batch" and (self.value < 1 or int(self.value) != self.value):
            raise ChainError("on_upstream_batch needs a positive integer record count")

    @classmethod
    def parse(cls, raw: Any) -> "Trigger":
        if raw is None or raw == "once":
            return cls()
        if isinstance(raw, Mapping) and len(raw) == 1:
            (name, value), = raw.items()
            kind = {"PERIODIC": "periodic", "ON_UPSTREAM_BATCH": "on_upstream_batch"}.get(name)
            if kind and isinstance(value, (int, float)) and not isinstance(value, bool):
                return cls(kind, float(value))
        raise ChainError(f"bad TRIGGER {raw!r}; use once, {{PERIODIC: s}} or "
                         f"{{ON_UPSTREAM_BATCH: n}}")


@dataclass(frozen=True)
class StageSpec:
    name: str
    configs: tuple[Path, ...]
    mode: str
    trigger: Trigger = Trigger()
    upstream: str | None = None
    runs: int = 1


@dataclass(frozen=True)
class ChainManifest:
    stages: tuple[StageSpec, ...]
    connector: str = "in_process_queue"
    capacity: int = 64

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if not names:
            raise ChainError("a chain needs at least one stage")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ChainError(f"duplicate stage names {dupes}")
        for s in self.stages:
            if s.upstream is not None and s.upstream not in names:
                raise ChainError(f"stage {s.name!r} names unknown upstream {s.upstream!r}")
        if self.connector not in ("in_process_queue", "file_handoff"):
            raise ChainError(f"unknown connector {self.connector!r}")
        self.order()

    def stage(self, name: str) -> StageSpec:
        return next(s for s in self.stages if s.name == name)

    def downstream(self, name: str) -> list[StageSpec]:
        return [s for s in self.stages if s.upstream == name]

    def order(self) -> list[StageSpec]:
        """Stages with every upstream before its dependents; raises on a cycle."""
        upstream = {s.name: s.upstream for s in self.stages}
        for s in self.stages:
            seen = [s.name]
            node = upstream[s.name]
            while node is not None:
                if node in seen:
                    cycle = " -> ".join(seen[seen.index(node):] + [node])
                    raise ChainError(f"stage upstream references form a cycle: {cycle}")
                seen.append(node)
                node = upstream[node]
        depth: dict[str, int] = {}

        def d(name):
            if name not in depth:
                depth[name] = 0 if upstream[name] is None else d(upstream[name]) + 1
            return depth[name]

        index = {s.name: i for i, s in enumerate(self.stages)}
        return sorted(self.stages, key=lambda s: (d(s.name), index[s.name]))


def _stage(raw: Mapping[str, Any], base: Path, i: int) -> StageSpec:
    if not isinstance(raw, Mapping) or "NAME" not in raw:
        raise ChainError(f"CHAIN.STAGES[{i}] needs a NAME")
    configs = raw.get("CONFIG", [])
    if isinstance(configs, str):
        configs = [configs]
    if not configs:
        raise ChainError(f"stage {raw['NAME']!r} lists no CONFIG files")
    mode = raw.get("MODE", "train")
    if mode not in ("train", "deploy"):
        raise ChainError(f"stage {raw['NAME']!r}: MODE must be train or deploy")
    return StageSpec(str(raw["NAME"]), tuple(base / c for c in configs), mode,
                     Trigger.parse(raw.get("TRIGGER")), raw.get("UPSTREAM"), int(raw.get("RUNS", 1)))


def load_chain_manifest(source: str | Path | Mapping[str, Any],
                        base_dir: str | Path | None = None) -> ChainManifest:
    """Read a manifest; config paths are relative to the manifest's directory."""
    if isinstance(source, Mapping):
        doc, base = source, Path(base_dir or ".")
    else:
        path = Path(source)
        doc = parse_config(path.read_text(encoding="utf-8"), origin=str(path))
        base = Path(base_dir) if base_dir else path.parent
    chain = doc.get("CHAIN")
    if not isinstance(chain, Mapping) or not isinstance(chain.get("STAGES"), list):
        raise ChainError("manifest needs a CHAIN map with a STAGES list")
    stages = tuple(_stage(raw, base, i) for i, raw in enumerate(chain["STAGES"]))
    return ChainManifest(stages, chain.get("CONNECTOR", "in_process_queue"),
                         int(chain.get("CAPACITY", 64)))


@dataclass
class StageStatus:
    name: str
    state: str = "pending"
    runs: int = 0
    error: str | None = None
    records: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.state == "succeeded"


class _Fanout(Connector):
    """The producer side of a stage: one connector per dependent, plus a local copy."""

    def __init__(self, targets: list[Connector], keep: bool):
        self.targets = targets
        self.keep = keep
        self.records: list[dict[str, Any]] = []
        self._next = 0

    def push(self, payload):
        payload = to_plain(payload)
        rec = ConnectorRecord(self._next, payload)
        self._next += 1
        if self.keep:
            self.records.append(payload)
        for t in self.targets:
            t.push(payload)
        return rec

    def close(self):
        for t in self.targets:
            t.close()

    def abort(self, reason):
        for t in self.targets:
            t.abort(reason)


class _StageRunner(threading.Thread):
    def __init__(self, spec: StageSpec, inbox: Connector | None, outbox: _Fanout,
                 registry: Registry | None, storage_root: Path, status: StageStatus):
        super().__init__(name=f"edna-stage-{spec.name}", daemon=True)
        self.spec = spec
        self.inbox = inbox
        self.outbox = outbox
        self.registry = registry
        self.storage_root = storage_root
        self.status = status

    def run(self):
        self.status.state = "running"
        try:
            if self.inbox is None:
                self._run_sourceless()
            else:
                self._run_consumer()
        except UpstreamFailedError as exc:
            self.status.state = "skipped"
            self.status.error = f"upstream {self.spec.upstream!r} failed: {exc}"
            self.outbox.abort(f"stage {self.spec.name!r} skipped")
            logger.error("stage %s skipped: %s", self.spec.name, self.status.error)
            return
        except Exception as exc:  # reported through the status, never swallowed silently
            self.status.state = "failed"
            self.status.error = f"{type(exc).__name__}: {exc}"
            self.outbox.abort(f"stage {self.spec.name!r} failed: {exc}")
            logger.exception("stage %s failed", self.spec.name)
            return
        self.outbox.close()
        self.status.state = "succeeded"

    def _run_sourceless(self):
        runs = self.spec.runs if self.spec.trigger.kind == "periodic" else 1
        for i in range(runs):
            if i:
                time.sleep(self.spec.trigger.value)
            self._execute([])

    def _run_consumer(self):
        trig = self.spec.trigger
        buffer: list[dict[str, Any]] = []
        if trig.kind == "once":
            while (rec := self.inbox.pull()) is not END:
                buffer.append(rec.payload)
            self._execute(buffer)
            return
        deadline = time.monotonic() + trig.value if trig.kind == "periodic" else None
        while True:
            timeout = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            rec = self.inbox.pull(timeout)
            if rec is END:
                break
            if rec is not None:
                buffer.append(rec.payload)
            if trig.kind == "on_upstream_batch" and len(buffer) >= int(trig.value):
                self._execute(buffer)
                buffer = []
            if deadline is not None and time.monotonic() >= deadline:
                if buffer:
                    self._execute(buffer)
                    buffer = []
                deadline = time.monotonic() + trig.value
        if buffer:
            self._execute(buffer)

    def _execute(self, payloads: list[dict[str, Any]]):
        spec = self.spec
        records = [payload_to_record(p) for p in payloads if is_record_payload(p)]
        checkpoints = [p["checkpoint"] for p in payloads if isinstance(p, dict) and "checkpoint" in p]
        stack = load_stack(spec.configs)
        if checkpoints:
            layer = {"DEPLOYMENT": {"MODEL_CHECKPOINT": checkpoints[-1]}}
            stack = stack + ConfigLayerStack.from_texts([(f"upstream:{spec.upstream}",
                                                          canonical_text(layer))])
        registry = self.registry.copy() if self.registry is not None else default_registry()
        plan = apply(stack, registry, storage_root=self.storage_root, mode=spec.mode,
                     upstream_records=records if records else None)
        if records and plan.components.crawler.name != "upstream":
            logger.warning("stage %s ignores %d upstream records (crawler is %s)",
                           spec.name, len(records), plan.components.crawler.name)
        if spec.mode == "train":
            result = train(plan)
            if result.last_checkpoint is None:
                raise ChainError(f"stage {spec.name!r} wrote no checkpoint; make SAVE_FREQUENCY "
                                 f"divide EXECUTION.EPOCHS")
            self.outbox.push({"checkpoint": result.last_checkpoint, "experiment_key": plan.key,
                              "plugins": result.plugin_keys})
        else:
            deploy(plan, sink=self.outbox)
        self.status.runs += 1


def run_chain(manifest: ChainManifest | str | Path, registry: Registry | None = None, *,
              storage_root: str | Path = "./edna_store", timeout: float | None = None
              ) -> dict[str, StageStatus]:
    """Run every stage in its own thread; returns the per-stage statuses."""
    if not isinstance(manifest, ChainManifest):
        manifest = load_chain_manifest(manifest)
    root = Path(storage_root)
    order = manifest.order()
    inboxes: dict[str, Connector] = {}
    for spec in order:
        if spec.upstream is None:
            continue
        if manifest.connector == "file_handoff":
            directory = root / "_connectors" / f"{spec.upstream}--{spec.name}"
            if directory.exists():
                shutil.rmtree(directory)
            inboxes[spec.name] = FileHandoffConnector(directory)
        else:
            inboxes[spec.name] = InProcessQueue(manifest.capacity)
    statuses = {s.name: StageStatus(s.name) for s in manifest.stages}
    runners = []
    for spec in order:
        dependents = manifest.downstream(spec.name)
        outbox = _Fanout([inboxes[d.name] for d in dependents], keep=not dependents)
        runners.append(_StageRunner(spec, inboxes.get(spec.name), outbox, registry, root,
                                    statuses[spec.name]))
    for r in runners:
        r.start()
    deadline = None if timeout is None else time.monotonic() + timeout
    for r in runners:
        r.join(None if deadline is None else max(deadline - time.monotonic(), 0.0))
        if r.is_alive():
            raise ChainError(f"stage {r.spec.name!r} did not finish within {timeout}s")
        r.status.records = r.outbox.records
    return statuses
