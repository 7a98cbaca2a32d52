"""The training loop: gradient accumulation, evaluation, checkpoints, resume."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .data import Batch, SampleSet, batch_iter
from .errors import ConfigDriftError, CheckpointError, TrainingError, DataError
from .metrics import Accuracy, BaseMetric, WeightedF1, series_from_csv, series_to_csv
from .model import ModelAbstract, get_parameters, set_parameters
from .optim import (LambdaPolicy, LossSpec, Optimizer, SchedulerState, lambda_scheduler_step,
                    parameter_gradients, scheduler_step, softmax_rows)
from .storage import (Category, Checkpoint, KeyNotFoundError, StorageSet, checkpoint_key,
                      encode_checkpoint, read_checkpoint, should_save, BackupPolicy)

logger = logging.getLogger("edna.trainer")

__all__ = ["BaseTrainer", "ClassificationTrainer", "TrainerState", "EvaluationReport"]


@dataclass
class TrainerState:
    global_epoch: int = 0
    global_batch: int = 0
    accumulation_count: int = 0
    accumulated_grads: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss_history: dict[str, list[float]] = field(default_factory=dict)
    rng_state: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    weighted_f1: float
    per_epoch: int


@contextlib.contextmanager
def _without_plugins(model: ModelAbstract):
    saved = model.plugins
    model.plugins = []
    try:
        yield
    finally:
        model.plugins = saved


class BaseTrainer:
    """Runs epochs over a training set.

    Extension points: ``setup`` (extra state), ``step`` (loss for one batch; it
    must report dL/dlogits through :meth:`set_loss_gradient` or override
    :meth:`backward`), ``evaluate_impl`` and ``move_to_device``.
    """

    def __init__(self, model: ModelAbstract, train_set: SampleSet, eval_set: SampleSet | None,
                 losses: Sequence[tuple[LossSpec, Sequence[Callable]]], optimizer: Optimizer,
                 scheduler: SchedulerState | None = None, lambda_policy: LambdaPolicy | None = None,
                 *, epochs: int = 1, batch_size: int = 32, shuffle: bool = True, seed: int = 0,
                 accumulation_steps: int = 1, save_frequency: int = 5,
                 storage: StorageSet | None = None, experiment_key: str = "experiment",
                 config_hash: bytes = b"\0" * 32, metrics: Sequence[BaseMetric] = (),
                 **kwargs):
        if accumulation_steps < 1:
            raise TrainingError("accumulation_steps must be >= 1")
        self.model = model
        self.train_set = train_set
        self.eval_set = eval_set
        self.loss_specs = [spec for spec, _ in losses]
        self.loss_fn = [list(fns) for _, fns in losses]
        self.lambdas = [list(spec.lambdas) for spec in self.loss_specs]
        self.optimizer = optimizer
        self.base_lr = optimizer.state.base_lr
        self.scheduler = scheduler or SchedulerState()
        self.lambda_policy = lambda_policy or LambdaPolicy()
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.shuffle = bool(shuffle)
        self.seed = int(seed)
        self.accumulation_steps = int(accumulation_steps)
        self.save_frequency = int(save_frequency)
        self.storage = storage
        self.experiment_key = str(experiment_key)
        self.config_hash = config_hash
        self.num_classes = train_set.num_classes
        self.primary_label = train_set.primary_label

        self.global_epoch = 0
        self.global_batch = 0
        self.accumulation_count = 0
        self.accumulated_grads = np.zeros(model.parameters.size)
        self.losses: dict[str, list[float]] = {}
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.update_count = 0
        self.saved_checkpoints: list[str] = []
        self.reports: list[EvaluationReport] = []
        self.log_lines: list[str] = []
        self._grad_cache: tuple[np.ndarray, np.ndarray] | None = None
        self._boundary: Checkpoint | None = None
        self._boundary_saved = True

        self.metrics: dict[str, BaseMetric] = {}
        for metric in (Accuracy("accuracy"), WeightedF1("weighted_f1"), *metrics):
            if metric.results is None:
                metric.build_module()
            if metric.metric_name in self.metrics:
                raise TrainingError(f"duplicate metric name {metric.metric_name!r}")
            self.metrics[metric.metric_name] = metric
        self.setup(**kwargs)

    # ------------------------------------------------------------ hooks

    def setup(self, **kwargs) -> None:
        if kwargs:
            raise TrainingError(f"unexpected TRAINER_ARGS {sorted(kwargs)}")

    def move_to_device(self, batch: Batch) -> Batch:
        return batch

    def labels_for(self, batch: Batch, label: str) -> np.ndarray:
        if not label or label == self.primary_label:
            return batch.labels
        if label not in batch.datalabels:
            raise TrainingError(f"label {label!r} is not present in the batch; have "
                                f"{[self.primary_label, *batch.datalabels]}")
        return batch.datalabels[label]

    def set_loss_gradient(self, dlogits: np.ndarray) -> None:
        """Record dL/dlogits for the forward pass just made."""
        if self.model.last_inputs is None:
            raise TrainingError("set_loss_gradient called before any forward pass")
        self._grad_cache = (self.model.last_inputs, dlogits)

    def step(self, batch: Batch) -> float:
        output, _ = self.model(batch.features)
        total = 0.0
        dlogits = np.zeros_like(output.logits)
        for spec, fns, lambdas in zip(self.loss_specs, self.loss_fn, self.lambdas):
            labels = self.labels_for(batch, spec.label)
            for name, fn, lam in zip(spec.losses, fns, lambdas):
                value, grad = fn(output.logits, labels)
                self.losses.setdefault(name, []).append(float(value))
                total += lam * value
                dlogits += lam * grad
        self.set_loss_gradient(dlogits)
        return total

    def backward(self) -> np.ndarray:
        if self._grad_cache is None:
            raise TrainingError("step() did not record a loss gradient")
        x, dlogits = self._grad_cache
        self._grad_cache = None
        return parameter_gradients(self.model, x, dlogits)

    def update_gradients(self) -> None:
        params = get_parameters(self.model)
        set_parameters(self.model, self.optimizer.step(params, self.accumulated_grads))
        self.accumulated_grads = np.zeros_like(self.accumulated_grads)
        self.update_count += 1

    def step_schedulers(self) -> None:
        self.scheduler = self.scheduler.advanced()
        self.optimizer.set_lr(scheduler_step(self.scheduler, self.base_lr))

    def step_loss_schedulers(self) -> None:
        self.lambdas = [lambda_scheduler_step(l, self.lambda_policy) for l in self.lambdas]

    # ------------------------------------------------------------- loop

    def epoch_step(self, epoch: int) -> None:
        """Trains the model for one epoch."""
        batches = batch_iter(self.train_set, self.batch_size, self.shuffle, self.seed, epoch)
        for index, batch in enumerate(batches):
            if self.global_batch == 0:
                self._log(f"epoch={epoch} lr={self.optimizer.lr!r}")
            self.model.train()
            batch = self.move_to_device(batch)
            loss = self.step(batch)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {index}")
            loss = loss / self.accumulation_steps
            self.accumulated_grads += self.backward() / self.accumulation_steps
            self.accumulation_count += 1
            if self.accumulation_count % self.accumulation_steps == 0:
                self.update_gradients()
                self.accumulation_count = 0
            self.global_batch += 1
        if self.accumulation_count:
            # partial group at epoch end: apply it rather than leak into the next epoch
            self.update_gradients()
            self.accumulation_count = 0
        self.global_batch = 0
        self.step_schedulers()
        self.step_loss_schedulers()
        for plugin in self.model.plugins:
            plugin.post_epoch(self.model, epoch=epoch)
        self.global_epoch += 1

    def train(self, epochs: int | None = None) -> tuple[ModelAbstract, TrainerState]:
        """Run ``epochs`` epochs (default: whatever remains of the configured total)."""
        if epochs is None:
            epochs = max(self.epochs - self.global_epoch, 0)
        try:
            for _ in range(epochs):
                start = {k: len(v) for k, v in self.losses.items()}
                self.epoch_step(self.global_epoch)
                report = self.evaluate(self._eval_samples())
                self._log_epoch(start, report)
                self._end_of_epoch()
        except KeyboardInterrupt:
            if self._boundary is not None and not self._boundary_saved and self.storage:
                key = self._write(self._boundary)
                logger.warning("interrupted; saved last completed epoch to %s", key)
            raise
        if self.global_epoch < self.epochs and not self._boundary_saved and self.storage:
            # stopped short of the configured total: keep a point to resume from
            self._write(self._boundary)
        return self.model, self.state

    def _eval_samples(self) -> SampleSet:
        if self.eval_set is not None and len(self.eval_set):
            return self.eval_set
        return self.train_set

    def _end_of_epoch(self) -> None:
        epoch = self.global_epoch
        self._boundary = self.make_checkpoint()
        self._boundary_saved = False
        if self.storage is None:
            return
        self._persist_logs_and_metrics()
        if epoch % self.save_frequency == 0:
            self._write(self._boundary)
        for category in Category:
            self.storage.backup(category, f"{self.experiment_key}/", epoch)

    def _write(self, ckpt: Checkpoint) -> str:
        key = checkpoint_key(ckpt.experiment_key, ckpt.epoch)
        self.storage.primary.put(Category.MODEL, key, encode_checkpoint(ckpt))
        self.saved_checkpoints.append(key)
        self._boundary_saved = True
        logger.info("saved checkpoint %s", key)
        return key

    # ------------------------------------------------------- evaluation

    def evaluate_impl(self, samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
        """Logits and primary labels over ``samples``, gradient-free."""
        logits, labels = [], []
        with _without_plugins(self.model):
            for batch in batch_iter(samples, max(self.batch_size, 256)):
                out, _ = self.model(batch.features)
                logits.append(out.logits)
                labels.append(batch.labels)
        return np.concatenate(logits), np.concatenate(labels)

    def evaluate(self, samples: SampleSet | None = None) -> EvaluationReport:
        samples = self.eval_set if samples is None else samples
        if samples is None or len(samples) == 0:
            raise DataError("evaluation split is empty")
        was_training = self.model.training
        self.model.eval()
        try:
            logits, labels = self.evaluate_impl(samples)
        finally:
            self.model.train(was_training)
        preds = np.argmax(logits, axis=1)
        probs = softmax_rows(logits)
        inputs = {"preds": preds, "labels": labels, "probs": probs, "num_classes": self.num_classes}
        values = {name: m.update(epoch=self.global_epoch, **inputs) for name, m in self.metrics.items()}
        report = EvaluationReport(values["accuracy"], values["weighted_f1"], self.global_epoch)
        self.reports.append(report)
        logger.info("\tAccuracy: %.3f%%", 100 * report.accuracy)
        logger.info("\tWeighted F-score: %.3f", report.weighted_f1)
        return report

    # ----------------------------------------------------------- state

    @property
    def state(self) -> TrainerState:
        return TrainerState(self.global_epoch, self.global_batch, self.accumulation_count,
                            self.accumulated_grads.copy(), copy.deepcopy(self.losses),
                            copy.deepcopy(self.rng.bit_generator.state))

    def make_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            experiment_key=self.experiment_key,
            epoch=self.global_epoch,
            params=get_parameters(self.model).copy(),
            param_layout=self.model.parameters.layout(),
            optimizer_state=self.optimizer.state,
            scheduler_state=self.scheduler,
            lambda_state={"lambdas": copy.deepcopy(self.lambdas),
                          "policy": {"kind": self.lambda_policy.kind,
                                     "decay": self.lambda_policy.decay}},
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
            config_hash=self.config_hash,
            counters={"global_epoch": self.global_epoch, "global_batch": self.global_batch,
                      "accumulation_count": self.accumulation_count,
                      "update_count": self.update_count,
                      "loss_history": copy.deepcopy(self.losses)},
            plugin_states={p.name: p.serialize() for p in self.model.plugins},
        )

    def save_checkpoint(self) -> str:
        if self.storage is None:
            raise CheckpointError("no storage configured")
        return self._write(self.make_checkpoint())

    def restore_checkpoint(self, key: str, allow_config_drift: bool = False) -> Checkpoint:
        if self.storage is None:
            raise CheckpointError("no storage configured")
        try:
            ckpt = read_checkpoint(key, self.storage.primary)
        except KeyNotFoundError:
            raise CheckpointError(f"no checkpoint {key!r}") from None
        if ckpt.config_hash != self.config_hash:
            msg = (f"checkpoint {key} was written under config {ckpt.config_hash.hex()[:12]}, "
                   f"current config is {self.config_hash.hex()[:12]}")
            if not allow_config_drift:
                raise ConfigDriftError(msg)
            logger.warning("%s (continuing: config drift allowed)", msg)
        self.load_checkpoint(ckpt)
        return ckpt

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        layout = [(n, tuple(s)) for n, s in self.model.parameters.layout()]
        if [(n, tuple(s)) for n, s in ckpt.param_layout] != layout:
            raise CheckpointError("checkpoint parameter layout does not match the model")
        set_parameters(self.model, ckpt.params)
        self.optimizer.state = ckpt.optimizer_state
        self.scheduler = ckpt.scheduler_state
        self.lambdas = [list(l) for l in ckpt.lambda_state["lambdas"]]
        self.rng.bit_generator.state = ckpt.rng_state
        c = ckpt.counters
        self.global_epoch = int(c["global_epoch"])
        self.global_batch = int(c["global_batch"])
        self.accumulation_count = int(c["accumulation_count"])
        self.update_count = int(c.get("update_count", 0))
        self.losses = {k: list(v) for k, v in c.get("loss_history", {}).items()}
        self.accumulated_grads = np.zeros(self.model.parameters.size)
        for plugin in self.model.plugins:
            if plugin.name in ckpt.plugin_states:
                plugin.deserialize(ckpt.plugin_states[plugin.name])
        self._boundary = ckpt
        self._boundary_saved = True
        if self.storage is not None:
            self._reload_logs_and_metrics()

    # -------------------------------------------------------- logs/metrics

    def _log(self, line: str) -> None:
        logger.info(line)

    def _log_epoch(self, start: Mapping[str, int], report: EvaluationReport) -> None:
        parts = [f"epoch={self.global_epoch}"]
        for name in sorted(self.losses):
            vals = self.losses[name][start.get(name, 0):]
            if vals:
                parts.append(f"loss.{name}={math.fsum(vals) / len(vals)!r}")
        parts.append(f"lr={self.optimizer.lr!r}")
        parts.append(f"acc={report.accuracy!r}")
        parts.append(f"wf1={report.weighted_f1!r}")
        line = " ".join(parts)
        self.log_lines.append(line)
        logger.info(line)

    def _log_key(self) -> str:
        return f"{self.experiment_key}/logs/train.log"

    def _metric_key(self, name: str) -> str:
        return f"{self.experiment_key}/metrics/{name}.csv"

    def _persist_logs_and_metrics(self) -> None:
        primary = self.storage.primary
        primary.put(Category.LOG, self._log_key(),
                    "".join(line + "\n" for line in self.log_lines).encode("utf-8"))
        for name, metric in self.metrics.items():
            primary.put(Category.METRIC, self._metric_key(name), series_to_csv(metric.series()))

    def _reload_logs_and_metrics(self) -> None:
        primary = self.storage.primary
        if primary.exists(Category.LOG, self._log_key()):
            text = primary.get(Category.LOG, self._log_key()).decode("utf-8")
            lines = text.splitlines()
            self.log_lines = [l for l in lines if int(l.split()[0].split("=")[1]) <= self.global_epoch]
        for name, metric in self.metrics.items():
            if primary.exists(Category.METRIC, self._metric_key(name)):
                series = series_from_csv(primary.get(Category.METRIC, self._metric_key(name)))
                metric.build_module()
                for e, s, v in series.records:
                    if e <= self.global_epoch:
                        metric.results.append(e, s, v)
                metric._step = len(metric.results)


class ClassificationTrainer(BaseTrainer):
    """The default trainer; accepts ``accumulation_steps`` via TRAINER_ARGS."""
