"""Data ingest, per-sample transforms, and deterministic batching."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .registry import ComponentKind, Registry

logger = logging.getLogger(__name__)

__all__ = [
    "SampleRecord", "SampleSet", "Batch", "TransformSpec", "StreamSource", "TransformDataset",
    "crawl", "poll_stream", "transform", "batch_iter", "split_eval",
    "synthetic_gaussian", "csv_file", "inline",
    "encode_line", "decode_line", "record_to_payload", "payload_to_record",
]


class SampleRecord:
    """One sample: a finite float64 feature vector and named integer labels."""

    __slots__ = ("features", "labels")

    def __init__(self, features: Sequence[float] | np.ndarray, labels: Mapping[str, int]):
        x = np.array(features, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise DataError("sample features must be finite")
        if not labels:
            raise DataError("a sample needs at least one label")
        x.setflags(write=False)
        self.features = x
        self.labels = {str(k): int(v) for k, v in labels.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.features, other.features)

    def __hash__(self):
        return hash((self.features.tobytes(), tuple(sorted(self.labels.items()))))

    def __repr__(self) -> str:
        return f"SampleRecord({self.features.tolist()}, {self.labels})"


@dataclass(frozen=True)
class SampleSet:
    records: tuple[SampleRecord, ...]
    feature_dim: int
    class_counts: Mapping[str, int]
    primary_label: str

    def __post_init__(self):
        for i, rec in enumerate(self.records):
            if rec.features.shape[0] != self.feature_dim:
                raise DataError(f"record {i} has {rec.features.shape[0]} features, "
                                f"expected {self.feature_dim}")
            for name, n in self.class_counts.items():
                if name not in rec.labels:
                    raise DataError(f"record {i} lacks label {name!r}")
                if not 0 <= rec.labels[name] < n:
                    raise DataError(f"record {i}: label {name}={rec.labels[name]} outside [0, {n})")
        if self.primary_label not in self.class_counts:
            raise DataError(f"primary label {self.primary_label!r} not among {list(self.class_counts)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return self.class_counts[self.primary_label]

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord], primary_label: str | None = None,
                     class_counts: Mapping[str, int] | None = None,
                     feature_dim: int | None = None) -> "SampleSet":
        records = tuple(records)
        if not records and (feature_dim is None or class_counts is None):
            raise DataError("cannot infer the shape of an empty sample set")
        if feature_dim is None:
            feature_dim = records[0].features.shape[0]
        if class_counts is None:
            names = records[0].labels.keys()
            class_counts = {n: max(2, 1 + max(r.labels[n] for r in records)) for n in names}
        if primary_label is None:
            primary_label = next(iter(class_counts))
        return cls(records, feature_dim, dict(class_counts), primary_label)

    def with_records(self, records: Iterable[SampleRecord]) -> "SampleSet":
        return SampleSet(tuple(records), self.feature_dim, self.class_counts, self.primary_label)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    datalabels: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        b = self.features.shape[0]
        if b < 1 or self.labels.shape != (b,) or any(v.shape != (b,) for v in self.datalabels.values()):
            raise DataError("batch fields disagree on batch size")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self):
        # mirrors `(samples, labels, datalabels) = batch`
        return iter((self.features, self.labels, self.datalabels))


# ---------------------------------------------------------------- crawlers


def synthetic_gaussian(n_samples: int = 100, n_features: int = 2, n_classes: int = 2,
                       class_sep: float = 1.0, seed: int = 0, cluster_std: float = 0.5,
                       label_name: str = "label") -> SampleSet:
    """Isotropic Gaussian blobs, one per class, centred on coordinate axes.

    Class ``c`` is centred at ``class_sep * (1 + c // n_features)`` along axis
    ``c % n_features``. Class sizes differ by at most one and the record order
    is a seeded shuffle.
    """
    if n_classes < 2:
        raise DataError("n_classes must be >= 2")
    if n_samples < 1 or n_features < 1:
        raise DataError("n_samples and n_features must be positive")
    if cluster_std <= 0:
        raise DataError("cluster_std must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    means = np.zeros((n_classes, n_features))
    for c in range(n_classes):
        means[c, c % n_features] = class_sep * (1 + c // n_features)
    x = means[labels] + cluster_std * rng.standard_normal((n_samples, n_features))
    records = tuple(SampleRecord(x[i], {label_name: int(labels[i])}) for i in range(n_samples))
    return SampleSet(records, n_features, {label_name: n_classes}, label_name)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def csv_file(path: str | Path, label_column: str | int = -1, label_name: str = "label",
             n_classes: int | None = None) -> SampleSet:
    """Read numeric CSV rows; one column holds the integer class id.

    A first row with any non-numeric cell is treated as a header. The label
    column is picked by header name or by (possibly negative) index.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(io.StringIO(text))) if r]
    if not rows:
        raise DataError(f"{path}: no rows")
    header = None
    if not all(_is_number(c) for c in rows[0][1]):
        header = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: header but no data rows")
    width = len(header) if header else len(rows[0][1])
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not found in header")
        col = header.index(label_column)
    else:
        col = int(label_column) % width
    records = []
    for lineno, row in rows:
        if len(row) != width:
            raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        try:
            values = [float(c) for j, c in enumerate(row) if j != col]
            label_text = row[col].strip()
            label = int(label_text)
        except ValueError:
            raise DataError(f"{path}: row {lineno} is not numeric: {','.join(row)!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"{path}: row {lineno} has non-finite values")
        records.append(SampleRecord(values, {label_name: label}))
    counts = None if n_classes is None else {label_name: int(n_classes)}
    return SampleSet.from_records(records, label_name, counts)


def inline(records: Iterable[Any], label_name: str | None = None,
           n_classes: int | None = None) -> SampleSet:
    """Records given directly, either as SampleRecord objects or payload maps."""
    recs = [r if isinstance(r, SampleRecord) else payload_to_record(r) for r in records]
    if not recs:
        raise DataError("inline crawler needs at least one record")
    name = label_name or next(iter(recs[0].labels))
    counts = None
    if n_classes is not None:
        counts = {n: (int(n_classes) if n == name else max(2, 1 + max(r.labels[n] for r in recs)))
                  for n in recs[0].labels}
    return SampleSet.from_records(recs, name, counts)


def crawl(crawler_name: str, args: Mapping[str, Any], registry: Registry) -> SampleSet:
    reg = registry.resolve(ComponentKind.CRAWLER, crawler_name)
    try:
        result = reg.factory(**dict(args))
    except TypeError as exc:
        raise DataError(f"bad arguments for crawler {crawler_name!r}: {exc}") from exc
    if not isinstance(result, SampleSet):
        raise DataError(f"crawler {crawler_name!r} returned {type(result).__name__}, not SampleSet")
    return result


# ------------------------------------------------------------ record codec


def record_to_payload(rec: SampleRecord) -> dict[str, Any]:
    return {"features": [float(v) for v in rec.features], "labels": dict(rec.labels)}


def payload_to_record(payload: Mapping[str, Any]) -> SampleRecord:
    try:
        return SampleRecord(payload["features"], payload["labels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"payload is not a sample record: {exc}") from exc


def is_record_payload(payload: Any) -> bool:
    return isinstance(payload, dict) and set(payload) == {"features", "labels"}


def encode_line(sequence: int, payload: Mapping[str, Any]) -> str:
    """``{sequence}\\t{canonical map text}\\n``"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)
    return f"{int(sequence)}\t{text}\n"


def decode_line(line: str) -> tuple[int, dict[str, Any]]:
    seq, sep, body = line.rstrip("\n").partition("\t")
    if not sep:
        raise DataError(f"malformed record line: {line[:60]!r}")
    try:
        payload = json.loads(body)
        sequence = int(seq)
    except ValueError as exc:
        raise DataError(f"malformed record line: {exc}") from None
    if not isinstance(payload, dict):
        raise DataError("record payload must be a map")
    return sequence, payload


# ------------------------------------------------------------------ stream


STOP_FILE = "STOP"


@dataclass
class StreamSource:
    """A directory that receives record files over time."""

    path: Path
    poll_interval: float = 1.0
    seen: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.path = Path(self.path)
        if self.poll_interval <= 0:
            raise DataError("poll_interval must be positive")

    @property
    def stop_requested(self) -> bool:
        return (self.path / STOP_FILE).exists()


def poll_stream(src: StreamSource) -> list[SampleRecord]:
    """Records from files not seen before, in lexicographic file order.

    Files are expected to appear atomically (written elsewhere then renamed
    in). Unreadable files are logged and left unmarked so a later poll can
    retry them.
    """
    if not src.path.is_dir():
        raise DataError(f"stream directory does not exist: {src.path}")
    out: list[SampleRecord] = []
    for entry in sorted(p for p in src.path.iterdir() if p.is_file()):
        name = entry.name
        if name in src.seen or name == STOP_FILE or name.startswith(".") or name.endswith(".tmp"):
            continue
        try:
            lines = entry.read_text(encoding="utf-8").splitlines()
            batch = [payload_to_record(decode_line(line)[1]) for line in lines if line.strip()]
        except (OSError, UnicodeDecodeError, DataError) as exc:
            logger.warning("skipping unreadable stream file %s: %s", entry, exc)
            continue
        src.seen.add(name)
        out.extend(batch)
    return out


# -------------------------------------------------------------- transforms


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normalize", "scale", "identity"):
            raise DataError(f"unknown transform kind {self.kind!r}")
        if self.kind == "normalize":
            if len(self.mean) != len(self.std) or not self.mean:
                raise DataError("normalize needs mean and std of equal, nonzero length")
            if any(s <= 0 for s in self.std):
                raise DataError("normalize std entries must be positive")

    @classmethod
    def from_args(cls, args: Mapping[str, Any]) -> list["TransformSpec"]:
        """Translate a TRANSFORMATION.ARGS map into transform steps.

        ``normalization: [mean, std, ...]`` uses the first two values; any
        further values are ignored. ``mean``/``std`` give per-feature vectors
        and ``scale`` a multiplicative factor. Image-only keys are inert.
        """
        steps: list[TransformSpec] = []
        for key in sorted(args):
            if key not in ("normalization", "mean", "std", "scale"):
                logger.info("transform arg %r has no effect on vector data", key)
        if "normalization" in args:
            norm = list(args["normalization"])
            if len(norm) < 2:
                raise DataError("normalization needs at least [mean, std]")
            if len(norm) > 2:
                logger.info("ignoring extra normalization values %s", norm[2:])
            steps.append(cls("normalize", (float(norm[0]),), (float(norm[1]),)))
        if "mean" in args or "std" in args:
            mean = args.get("mean", 0.0)
            std = args.get("std", 1.0)
            mean = tuple(float(m) for m in (mean if isinstance(mean, list) else [mean]))
            std = tuple(float(s) for s in (std if isinstance(std, list) else [std]))
            steps.append(cls("normalize", mean, std))
        if "scale" in args:
            steps.append(cls("scale", factor=float(args["scale"])))
        return steps


def transform(rec: SampleRecord, spec: TransformSpec) -> SampleRecord:
    if spec.kind == "identity":
        return rec
    x = rec.features
    if spec.kind == "scale":
        return SampleRecord(spec.factor * x, rec.labels)
    mean = np.asarray(spec.mean)
    std = np.asarray(spec.std)
    if mean.shape[0] not in (1, x.shape[0]):
        raise DataError(f"normalize has {mean.shape[0]} entries for {x.shape[0]} features")
    return SampleRecord((x - mean) / std, rec.labels)


class TransformDataset:
    """The per-sample preprocessing stage: applies transform steps in order."""

    def __init__(self, samples: SampleSet, transforms: Sequence[TransformSpec] = ()):
        self.samples = samples
        self.transforms = tuple(transforms)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> SampleRecord:
        rec = self.samples.records[i]
        for spec in self.transforms:
            rec = transform(rec, spec)
        return rec

    def materialize(self) -> SampleSet:
        if not self.transforms:
            return self.samples
        return self.samples.with_records(self[i] for i in range(len(self)))


# ---------------------------------------------------------------- batching


def split_eval(samples: SampleSet, fraction: float, seed: int) -> tuple[SampleSet, SampleSet]:
    """Deterministic train/eval split; the eval part is the first ``round(n*fraction)`` of a seeded permutation."""
    n = len(samples)
    n_eval = int(round(n * fraction))
    if n_eval == 0:
        return samples, samples.with_records(())
    order = np.random.default_rng(np.random.SeedSequence([_seed_word(seed), 0x5EED])).permutation(n)
    eval_idx = sorted(order[:n_eval].tolist())
    train_idx = sorted(order[n_eval:].tolist())
    recs = samples.records
    return (samples.with_records(recs[i] for i in train_idx),
            samples.with_records(recs[i] for i in eval_idx))


def _seed_word(seed: int) -> int:
    return int(seed) % (1 << 63)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([_seed_word(seed), int(epoch)])).permutation(n)


def batch_iter(samples: SampleSet, batch_size: int, shuffle: bool = False, seed: int = 0,
               epoch: int = 0) -> list[Batch]:
    """Split ``samples`` into batches; the last one may be short and is kept.

    With ``shuffle`` the order is a permutation that depends only on
    ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(samples)
    if n == 0:
        raise DataError("cannot batch an empty sample set")
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    recs = samples.records
    primary = samples.primary_label
    others = [k for k in samples.class_counts if k != primary]
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        feats = np.stack([recs[i].features for i in idx])
        labels = np.array([recs[i].labels[primary] for i in idx], dtype=np.int64)
        extra = {k: np.array([recs[i].labels[k] for i in idx], dtype=np.int64) for k in others}
        batches.append(Batch(feats, labels, extra))
    return batches
