"""Single-producer, single-consumer record channels between pipeline stages."""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..data import SampleRecord, decode_line, encode_line, record_to_payload
from ..errors import ConnectorClosedError, UpstreamFailedError

__all__ = ["END", "ConnectorRecord", "Connector", "InProcessQueue", "FileHandoffConnector",
           "to_plain", "make_connector"]


class _End:
    def __repr__(self) -> str:
        return "END"


END = _End()


@dataclass(frozen=True)
class ConnectorRecord:
    sequence: int
    payload: dict[str, Any]


def to_plain(obj: Any) -> Any:
    """Convert numpy values and sample records into JSON-ready Python objects."""
    if isinstance(obj, SampleRecord):
        return record_to_payload(obj)
    if isinstance(obj, Mapping):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


class Connector:
    """push/close/abort on the producer side, pull on the consumer side."""

    kind = "abstract"

    def push(self, payload: Any) -> ConnectorRecord:
        raise NotImplementedError

    def pull(self, timeout: float | None = None) -> ConnectorRecord | _End | None:
        """Next record, END once closed and drained, or None on timeout."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def abort(self, reason: str) -> None:
        """Mark the producer as failed; the consumer's next pull raises."""
        raise NotImplementedError

    def drain(self, timeout: float | None = None) -> list[ConnectorRecord]:
        out = []
        while True:
            rec = self.pull(timeout)
            if rec is END or rec is None:
                return out
            out.append(rec)


class _Failure:
    def __init__(self, reason: str):
        self.reason = reason


class InProcessQueue(Connector):
    """Bounded FIFO; push blocks while full, pull blocks while empty."""

    kind = "in_process_queue"

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._lock = threading.Lock()
        self._next = 0
        self._closed = False
        self._ended = False
        self._failure: str | None = None

    def push(self, payload):
        with self._lock:
            if self._closed:
                raise ConnectorClosedError("push after close")
            rec = ConnectorRecord(self._next, to_plain(payload))
            self._next += 1
        self._q.put(rec)
        return rec

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self._q.put(END)

    def abort(self, reason):
        with self._lock:
            self._closed = True
        self._q.put(_Failure(reason))

    def pull(self, timeout=None):
        if self._ended:
            return END
        if self._failure is not None:
            raise UpstreamFailedError(self._failure)
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is END:
            self._ended = True
        elif isinstance(item, _Failure):
            self._failure = item.reason
            raise UpstreamFailedError(item.reason)
        return item


class FileHandoffConnector(Connector):
    """Records as lines in numbered segment files under ``directory``.

    Works across processes: one process pushes, another pulls. The producer
    appends whole lines and flushes after each; a ``CLOSED`` file holding the
    record count marks the end, a ``FAILED`` file an aborted producer.
    """

    kind = "file_handoff"

    def __init__(self, directory: str | Path, segment_size: int = 1000, poll_interval: float = 0.02):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.segment_size = int(segment_size)
        self.poll_interval = poll_interval
        self._lock = threading.Lock()
        self._next = 0
        self._closed = False
        self._handle = None
        # reader position
        self._segment = 0
        self._offset = 0
        self._expected = 0
        self._ended = False

    def _segment_path(self, i: int) -> Path:
        return self.directory / f"segment-{i:06d}.log"

    def push(self, payload):
        with self._lock:
            if self._closed or (self.directory / "CLOSED").exists():
                raise ConnectorClosedError("push after close")
            rec = ConnectorRecord(self._next, to_plain(payload))
            if self._next % self.segment_size == 0:
                if self._handle is not None:
                    self._handle.close()
                path = self._segment_path(self._next // self.segment_size)
                if path.exists():
                    raise ConnectorClosedError(f"{path} already exists; one producer per directory")
                self._handle = open(path, "a", encoding="utf-8")
            self._handle.write(encode_line(rec.sequence, rec.payload))
            self._handle.flush()
            self._next += 1
        return rec

    def _finish(self, name: str, text: str) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            if self._handle is not None:
                self._handle.close()
                self._handle = None
            tmp = self.directory / f".{name}.tmp"
            tmp.write_text(text, encoding="utf-8")
            os.replace(tmp, self.directory / name)

    def close(self):
        self._finish("CLOSED", str(self._next))

    def abort(self, reason):
        self._finish("FAILED", reason)

    def _read_one(self) -> ConnectorRecord | None:
        path = self._segment_path(self._segment)
        if not path.exists():
            return None
        with open(path, "rb") as fh:
            fh.seek(self._offset)
            line = fh.readline()
        if not line.endswith(b"\n"):
            return None  # nothing new, or a line still being written
        self._offset += len(line)
        seq, payload = decode_line(line.decode("utf-8"))
        if seq != self._expected:
            raise UpstreamFailedError(f"sequence gap: expected {self._expected}, got {seq}")
        self._expected += 1
        if self._expected % self.segment_size == 0:
            self._segment += 1
            self._offset = 0
        return ConnectorRecord(seq, payload)

    def pull(self, timeout=None):
        if self._ended:
            return END
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            rec = self._read_one()
            if rec is not None:
                return rec
            failed = self.directory / "FAILED"
            if failed.exists():
                raise UpstreamFailedError(failed.read_text(encoding="utf-8"))
            closed = self.directory / "CLOSED"
            if closed.exists():
                rec = self._read_one()
                if rec is not None:
                    return rec
                if int(closed.read_text(encoding="utf-8")) == self._expected:
                    self._ended = True
                    return END
            if deadline is not None and time.monotonic() >= deadline:
                return None
            time.sleep(self.poll_interval)


def make_connector(kind: str, *, capacity: int = 64, directory: str | Path | None = None) -> Connector:
    if kind == "in_process_queue":
        return InProcessQueue(capacity)
    if kind == "file_handoff":
        if directory is None:
            raise ValueError("file_handoff needs a directory")
        return FileHandoffConnector(directory)
    raise ValueError(f"unknown connector kind {kind!r}")
