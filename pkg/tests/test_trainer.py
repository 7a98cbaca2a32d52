import numpy as np
import pytest

from edna.core import apply, train
from edna.data import batch_iter, synthetic_gaussian
from edna.errors import ConfigDriftError, TrainingError
from edna.model import MLPClassifier, ModelSpec, get_parameters
from edna.optim import LossSpec, SoftmaxLogitsLoss, cross_entropy, make_sgd
from edna.storage import Category, InMemoryBackend, StorageSet, read_checkpoint
from edna.trainer import BaseTrainer, ClassificationTrainer

from conftest import synthetic_layer
from oracles import ref_weighted_f1


def trainer_for(samples, batch_size, k, lr=0.1, seed=0, storage=None, **kw):
    model = MLPClassifier(ModelSpec("MLPClassifier",
                                    kwargs={"in_dim": samples.feature_dim, "hidden": 6, "classes": 2}),
                          seed=seed)
    return ClassificationTrainer(
        model, samples, None, [(LossSpec(("SoftmaxLogitsLoss",), (1.0,), ""), [SoftmaxLogitsLoss()])],
        make_sgd(model.parameters.size, lr), batch_size=batch_size, shuffle=False,
        accumulation_steps=k, storage=storage, **kw)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_accumulation_equals_full_batch(k):
    m = 8
    data = synthetic_gaussian(k * m, 3, 2, 1.0, seed=11)
    acc = trainer_for(data, m, k)
    full = trainer_for(data, k * m, 1)
    acc.epoch_step(0)
    full.epoch_step(0)
    assert acc.update_count == full.update_count == 1
    assert np.max(np.abs(get_parameters(acc.model) - get_parameters(full.model))) < 1e-10


def test_update_counts_and_flush():
    data = synthetic_gaussian(40, 2, 2, 1.0, seed=1)
    t = trainer_for(data, 10, 2)
    t.epoch_step(0)
    assert t.update_count == 2
    assert t.global_batch == 0 and t.accumulation_count == 0
    t5 = trainer_for(synthetic_gaussian(50, 2, 2, 1.0, seed=1), 10, 2)
    t5.epoch_step(0)
    assert t5.update_count == 3  # ceil(5 / 2), the odd batch is flushed
    assert not t5.accumulated_grads.any()


def test_step_value_is_cross_entropy():
    data = synthetic_gaussian(16, 2, 2, 1.0, seed=2)
    t = trainer_for(data, 16, 1)
    (batch,) = batch_iter(data, 16)
    value = t.step(batch)
    assert value == cross_entropy(t.model(batch.features)[0].logits, batch.labels)


def test_nonfinite_loss_is_reported():
    class Broken(BaseTrainer):
        def step(self, batch):
            self.model(batch.features)
            return float("nan")

    data = synthetic_gaussian(8, 2, 2, 1.0, seed=2)
    base = trainer_for(data, 4, 1)
    t = Broken(base.model, data, None, [], base.optimizer, batch_size=4)
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        t.epoch_step(0)


def test_evaluation_is_pure_and_matches_oracle():
    data = synthetic_gaussian(60, 2, 2, 4.0, seed=3)
    t = trainer_for(data, 10, 1, lr=0.5)
    for e in range(5):
        t.epoch_step(e)
    before = get_parameters(t.model).copy()
    opt_before = t.optimizer.state
    rng_before = t.rng.bit_generator.state
    report = t.evaluate(data)
    assert np.array_equal(before, get_parameters(t.model))
    assert t.optimizer.state == opt_before and t.rng.bit_generator.state == rng_before
    assert report.accuracy == 1.0
    logits, labels = t.evaluate_impl(data)
    preds = np.argmax(logits, axis=1)
    assert report.weighted_f1 == ref_weighted_f1(preds.tolist(), labels.tolist(), 2)


def test_empty_eval_split_errors():
    data = synthetic_gaussian(8, 2, 2, 1.0, seed=2)
    with pytest.raises(Exception, match="empty"):
        trainer_for(data, 4, 1).evaluate()


def test_argmax_ties_pick_lowest_class():
    data = synthetic_gaussian(6, 2, 2, 1.0, seed=2)
    t = trainer_for(data, 6, 1)
    t.model.parameters["W2"][:] = 0.0
    t.model.parameters["b2"][:] = 0.0
    logits, _ = t.evaluate_impl(data)
    assert (np.argmax(logits, axis=1) == 0).all()


def test_unknown_trainer_args():
    data = synthetic_gaussian(8, 2, 2, 1.0, seed=2)
    with pytest.raises(TrainingError):
        trainer_for(data, 4, 1, warp_speed=True)


def test_save_frequency(store):
    plan = apply([synthetic_layer(**{"EXECUTION.EPOCHS": 10, "SAVE.SAVE_FREQUENCY": 5})],
                 storage_root=store)
    result = train(plan)
    assert result.checkpoints == [f"{plan.key}/model/epoch5.ckpt", f"{plan.key}/model/epoch10.ckpt"]
    log = plan.storage.primary.get(Category.LOG, f"{plan.key}/logs/train.log").decode()
    assert log.count("\n") == 10 and log.startswith("epoch=1 loss.SoftmaxLogitsLoss=")


def test_resume_in_process_is_bit_identical(store):
    layer = synthetic_layer(**{"EXECUTION.EPOCHS": 5})
    straight = train(apply([layer], storage_root=store / "a"))
    first = train(apply([layer], storage_root=store / "b"), epochs=3)
    assert first.last_checkpoint.endswith("epoch3.ckpt")
    resumed = train(apply([layer], storage_root=store / "b"), resume_from=first.last_checkpoint)
    a = read_checkpoint(straight.last_checkpoint, straight.trainer.storage.primary)
    b = read_checkpoint(resumed.last_checkpoint, resumed.trainer.storage.primary)
    assert a.epoch == b.epoch == 5
    assert a.params.tobytes() == b.params.tobytes()
    assert a.optimizer_state == b.optimizer_state
    assert a.counters["loss_history"] == b.counters["loss_history"]


def test_config_drift(store):
    layer = synthetic_layer()
    first = train(apply([layer], storage_root=store), epochs=1)
    drifted = apply([layer, {"OPTIMIZER": [{"OPTIMIZER": "Adam", "BASE_LR": 5e-2}]}],
                    storage_root=store)
    with pytest.raises(ConfigDriftError):
        train(drifted, resume_from=first.last_checkpoint)
    result = train(drifted, resume_from=first.last_checkpoint, allow_config_drift=True)
    assert result.trainer.global_epoch == 2


def test_interrupt_saves_last_boundary(store):
    layer = synthetic_layer(**{"EXECUTION.EPOCHS": 4, "SAVE.SAVE_FREQUENCY": 4})
    plan = apply([layer], storage_root=store)
    trainer = plan.build_trainer()
    original = trainer.epoch_step

    def flaky(epoch):
        if epoch == 2:
            raise KeyboardInterrupt
        original(epoch)

    trainer.epoch_step = flaky
    with pytest.raises(KeyboardInterrupt):
        trainer.train()
    assert trainer.saved_checkpoints == [f"{plan.key}/model/epoch2.ckpt"]


def test_backup_policy_copies_logs(store):
    layer = synthetic_layer(**{
        "STORAGE": {"mirror": {"TYPE": "in_memory"}},
        "SAVE.LOG_BACKUP": {"BACKUP": True, "STORAGE_NAME": "mirror", "FREQUENCY": 2},
        "EXECUTION.EPOCHS": 3,
    })
    plan = apply([layer], storage_root=store)
    train(plan)
    mirror = plan.storage.backends["mirror"]
    assert mirror.list(Category.LOG) == [f"{plan.key}/logs/train.log"]
    # copied at epoch 2 only, so it holds two lines
    assert mirror.get(Category.LOG, f"{plan.key}/logs/train.log").decode().count("\n") == 2


def test_storage_set_validates_names():
    from edna.errors import ValidationError
    from edna.storage import BackupPolicy
    with pytest.raises(ValidationError, match="nowhere"):
        StorageSet(InMemoryBackend("default"), {},
                   {Category.LOG: BackupPolicy(Category.LOG, "nowhere", True)})
