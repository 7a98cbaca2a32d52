import hashlib
import struct

import numpy as np
import pytest

from edna.builtins import default_registry
from edna.config import effective_config, load_stack
from edna.errors import CorruptRecordError, DigestMismatchError, KeyNotFoundError, StorageError
from edna.optim import OptimizerState, SchedulerState
from edna.registry import ComponentKind
from edna.storage import (BackupPolicy, Category, Checkpoint, InMemoryBackend, LocalFileBackend,
                          decode_checkpoint, encode_checkpoint, load_provenance,
                          package_provenance, read_checkpoint, should_save, verify_provenance,
                          write_checkpoint)

from conftest import CONFIGS


def sample_checkpoint():
    params = np.arange(10, dtype=np.float64) / 7
    opt = OptimizerState.fresh("Adam", 10, 1e-3)
    return Checkpoint(
        experiment_key="toy-v1-base-all", epoch=3, params=params,
        param_layout=[("W", (2, 4)), ("b", (2,))], optimizer_state=opt,
        scheduler_state=SchedulerState("step_decay", 0.5, 2, 3),
        lambda_state={"lambdas": [[1.0]], "policy": {"kind": "constant", "decay": 1.0}},
        rng_state=np.random.PCG64(5).state, config_hash=hashlib.sha256(b"x").digest(),
        counters={"global_epoch": 3}, plugin_states={"p": b"\x00\x01"})


@pytest.mark.parametrize("backend", ["memory", "file"])
def test_backend_contract(backend, tmp_path):
    b = InMemoryBackend() if backend == "memory" else LocalFileBackend(root=tmp_path)
    b.put(Category.LOG, "exp/logs/a.log", b"one")
    b.put(Category.LOG, "exp/logs/a.log", b"two")
    b.put(Category.LOG, "other/x", b"3")
    assert b.get(Category.LOG, "exp/logs/a.log") == b"two"
    assert b.list(Category.LOG, "exp/") == ["exp/logs/a.log"]
    assert b.list(Category.MODEL) == []
    with pytest.raises(KeyNotFoundError):
        b.get(Category.MODEL, "exp/logs/a.log")
    for bad in ("../escape", "/abs", "a//b", "a\\b"):
        with pytest.raises(StorageError):
            b.put(Category.LOG, bad, b"")


def test_local_layout(tmp_path):
    LocalFileBackend(root=tmp_path).put(Category.ARTIFACT, "k/v.bin", b"z")
    assert (tmp_path / "artifact" / "k" / "v.bin").read_bytes() == b"z"
    assert not list(tmp_path.rglob(".tmp-*"))


def test_should_save():
    assert should_save(BackupPolicy(Category.LOG, "d", True, 1), 7)
    five = BackupPolicy(Category.MODEL, "d", True, 5)
    assert should_save(five, 5) and not should_save(five, 4) and not should_save(five, 0)
    assert not should_save(BackupPolicy(Category.LOG, "d", False, 1), 3)


def test_checkpoint_round_trip():
    ckpt = sample_checkpoint()
    blob = encode_checkpoint(ckpt)
    assert blob[:4] == b"EDNA" and struct.unpack("<H", blob[4:6]) == (1,)
    assert decode_checkpoint(blob) == ckpt
    assert encode_checkpoint(decode_checkpoint(blob)) == blob


def test_checkpoint_corruption():
    blob = encode_checkpoint(sample_checkpoint())
    for i in (3, 12, len(blob) - 40, len(blob) - 1):
        bad = bytearray(blob)
        bad[i] ^= 0x10
        with pytest.raises(CorruptRecordError):
            decode_checkpoint(bytes(bad))
    with pytest.raises(CorruptRecordError):
        decode_checkpoint(blob[:-5])


def test_write_read_checkpoint():
    b = InMemoryBackend()
    key = write_checkpoint(sample_checkpoint(), b)
    assert key == "toy-v1-base-all/model/epoch3.ckpt"
    assert read_checkpoint(key, b) == sample_checkpoint()


SOURCE = "from edna.metrics import BaseMetric\n\nclass Custom(BaseMetric):\n    pass\n"


def test_provenance_round_trip_and_tamper(tmp_path):
    src = tmp_path / "custom.py"
    src.write_text(SOURCE)
    ns = {}
    exec(compile(SOURCE, str(src), "exec"), ns)
    reg = default_registry()
    reg.add(ComponentKind.METRIC, ns["Custom"], source=src)
    stack = load_stack([CONFIGS / "mnist_base.yml", CONFIGS / "mnist_v2.yml"])
    cfg = effective_config(stack)
    backend = LocalFileBackend(root=tmp_path / "store")
    key = package_provenance("mnist_resnet-v2-base-all", stack, cfg, reg, backend)
    bundle = load_provenance(backend, key)
    assert bundle.config_hash == cfg.hash and bundle.seed == 42
    assert '"EPOCHS":10' in bundle.effective_config and '"BASE_LR":0.0001' in bundle.effective_config
    assert verify_provenance(bundle).hash == cfg.hash
    stored = backend.path_for(Category.CONFIG, key + "sources/000-metric-Custom-custom.py")
    data = bytearray(stored.read_bytes())
    data[0] ^= 1
    stored.write_bytes(bytes(data))
    with pytest.raises(DigestMismatchError):
        load_provenance(backend, key)


def test_provenance_detects_layer_tamper():
    backend = InMemoryBackend()
    stack = load_stack([CONFIGS / "mnist_base.yml"])
    key = package_provenance("k-v1-b-q", stack, effective_config(stack), default_registry(), backend)
    layer = key + "layers/000.yml"
    backend.put(Category.CONFIG, layer, backend.get(Category.CONFIG, layer) + b"\n# x\n")
    with pytest.raises(DigestMismatchError):
        load_provenance(backend, key)
