import os
import subprocess
import sys
import textwrap
import threading

import numpy as np
import pytest
import yaml

from edna.cli import main
from edna.core import (END, EdnaML, FileHandoffConnector, InProcessQueue, apply, deploy,
                       load_chain_manifest, run_chain, train)
from edna.data import encode_line, record_to_payload, synthetic_gaussian
from edna.errors import (ChainError, ConnectorClosedError, UpstreamFailedError, ValidationError)
from edna.model import parameter_digest, set_parameters
from edna.storage import Category, read_checkpoint

from conftest import CONFIGS, ROOT, synthetic_layer


def trained(store, **overrides):
    layer = synthetic_layer(**{"MODEL_PLUGIN": [{"PLUGIN": "LogitConfidence"}], **overrides})
    return layer, train(apply([layer], storage_root=store))


def deploy_layer(checkpoint, **extra):
    layer = {"EXECUTION": {"MODE": "deploy"}, "OPTIMIZER": [],
             "DEPLOYMENT": {"DEPLOY": "BaseDeploy", "MODEL_CHECKPOINT": checkpoint}}
    for dotted, value in extra.items():
        node = layer
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return layer


def test_apply_is_idempotent(store):
    a = apply([synthetic_layer()], storage_root=store)
    b = apply([synthetic_layer()], storage_root=store)
    assert a.config.hash == b.config.hash and a.key == b.key == "toy-v1-base-all"


def test_apply_rejects_unregistered_model(store):
    with pytest.raises(ValidationError, match="MODEL"):
        apply([synthetic_layer(**{"MODEL.MODEL_ARCH": "NoSuchNet"})], storage_root=store)


def test_facade_flow(store):
    ml = EdnaML([synthetic_layer()], storage_root=store)
    ml.apply()
    result = ml.train()
    assert result.trainer.global_epoch == 2
    assert result.last_checkpoint == "toy-v1-base-all/model/epoch2.ckpt"


def test_deploy_static_set_with_plugin(store):
    layer, result = trained(store)
    plan = apply([layer, deploy_layer(result.last_checkpoint,
                                      **{"DATAREADER.CRAWLER_ARGS.n_samples": 10})],
                 storage_root=store)
    assert plan.components.optimizer is None
    sink = deploy(plan)
    assert [r.sequence for r in sink.records] == list(range(10))
    for r in sink.records:
        outs = r.payload["plugins"]["LogitConfidence"]
        assert set(outs) == {"logit", "threshold"}
        assert outs["logit"] == pytest.approx(r.payload["max_softmax"])
    ckpt = read_checkpoint(result.last_checkpoint, plan.storage.primary)
    probe = plan.build_model(plan.source())
    set_parameters(probe, ckpt.params)
    assert parameter_digest(probe) == parameter_digest(result.trainer.model)
    text = plan.storage.primary.get(Category.ARTIFACT, f"{plan.key}/deploy/records.log").decode()
    assert text.count("\n") == 10


def test_deploy_needs_checkpoint(store):
    plan = apply([synthetic_layer(), deploy_layer("")], storage_root=store)
    with pytest.raises(Exception, match="MODEL_CHECKPOINT"):
        deploy(plan)


def test_stream_deploy_stops_on_stop_file(store, tmp_path):
    layer, result = trained(store)
    stream = tmp_path / "incoming"
    stream.mkdir()
    recs = synthetic_gaussian(7, 2, 2, 2.0, seed=5).records
    (stream / "a.log").write_text("".join(encode_line(i, record_to_payload(r))
                                          for i, r in enumerate(recs)))
    (stream / "STOP").touch()
    over = deploy_layer(result.last_checkpoint, **{
        "DATAREADER.CRAWLER": "stream_directory",
        "DATAREADER.CRAWLER_ARGS": {"path": str(stream), "poll_interval": 0.01, "n_samples": None,
                                    "n_features": None, "n_classes": None, "class_sep": None},
        "MODEL.MODEL_KWARGS": {"in_dim": 2, "hidden": 8, "classes": 2}})
    sink = deploy(apply([layer, over], storage_root=store))
    assert len(sink.records) == 7


# ---------------------------------------------------------------- connectors


def make(kind, tmp_path):
    return InProcessQueue(8) if kind == "queue" else FileHandoffConnector(tmp_path / "c", segment_size=2)


@pytest.mark.parametrize("kind", ["queue", "file"])
def test_connector_order_and_end(kind, tmp_path):
    c = make(kind, tmp_path)
    for i in range(3):
        c.push({"i": i})
    c.close()
    got = [c.pull(1.0) for _ in range(3)]
    assert [(r.sequence, r.payload["i"]) for r in got] == [(0, 0), (1, 1), (2, 2)]
    assert c.pull(1.0) is END and c.pull(1.0) is END
    with pytest.raises(ConnectorClosedError):
        c.push({"i": 9})


@pytest.mark.parametrize("kind", ["queue", "file"])
def test_connector_interleaved(kind, tmp_path):
    c = make(kind, tmp_path)
    seen = []
    for i in range(5):
        c.push({"i": i})
        seen.append(c.pull(1.0).payload["i"])
    assert c.pull(0.05) is None
    assert seen == list(range(5))


@pytest.mark.parametrize("kind", ["queue", "file"])
def test_connector_abort(kind, tmp_path):
    c = make(kind, tmp_path)
    c.push({"i": 0})
    c.abort("boom")
    with pytest.raises(UpstreamFailedError):
        while c.pull(1.0) is not END:
            pass


def test_queue_backpressure():
    q = InProcessQueue(2)
    done = threading.Event()

    def producer():
        for i in range(6):
            q.push(i)
        q.close()
        done.set()

    threading.Thread(target=producer, daemon=True).start()
    assert not done.wait(0.1)
    assert [r.payload for r in q.drain(2.0)] == list(range(6))


def test_file_handoff_across_processes(tmp_path):
    script = textwrap.dedent(f"""
        from edna.core import FileHandoffConnector
        c = FileHandoffConnector({str(tmp_path / "x")!r}, segment_size=3)
        for i in range(10):
            c.push({{"i": i}})
        c.close()
    """)
    reader = FileHandoffConnector(tmp_path / "x", segment_size=3)
    proc = subprocess.Popen([sys.executable, "-c", script])
    got = [r.payload["i"] for r in reader.drain(30.0)]
    assert proc.wait(30) == 0
    assert got == list(range(10))


# --------------------------------------------------------------------- chain


def manifest(stages):
    return {"CHAIN": {"STAGES": stages}}


def test_cycle_rejected_at_load():
    stages = [{"NAME": "a", "CONFIG": ["x.yml"], "UPSTREAM": "b"},
              {"NAME": "b", "CONFIG": ["y.yml"], "UPSTREAM": "a"}]
    with pytest.raises(ChainError, match="cycle"):
        load_chain_manifest(manifest(stages))


@pytest.mark.parametrize("bad", [
    [{"NAME": "a", "CONFIG": ["x.yml"], "UPSTREAM": "ghost"}],
    [{"NAME": "a", "CONFIG": ["x.yml"]}, {"NAME": "a", "CONFIG": ["x.yml"]}],
    [{"NAME": "a", "CONFIG": ["x.yml"], "TRIGGER": {"PERIODIC": 0}}],
    [{"NAME": "a", "CONFIG": []}],
])
def test_bad_manifests(bad):
    with pytest.raises(ChainError):
        load_chain_manifest(manifest(bad))


def write_yaml(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path.name


def test_single_stage_chain(tmp_path):
    name = write_yaml(tmp_path / "t.yml", synthetic_layer())
    m = load_chain_manifest(manifest([{"NAME": "only", "CONFIG": [name]}]), tmp_path)
    status = run_chain(m, storage_root=tmp_path / "store", timeout=60)["only"]
    assert status.ok and status.runs == 1
    assert status.records[0]["checkpoint"] == "toy-v1-base-all/model/epoch2.ckpt"


def test_failure_halts_dependents(tmp_path):
    bad = write_yaml(tmp_path / "bad.yml", synthetic_layer(**{"DATAREADER.CRAWLER_ARGS.n_samples": -1}))
    good = write_yaml(tmp_path / "good.yml", synthetic_layer())
    m = load_chain_manifest(manifest([
        {"NAME": "first", "CONFIG": [bad]},
        {"NAME": "second", "CONFIG": [good], "UPSTREAM": "first"}]), tmp_path)
    statuses = run_chain(m, storage_root=tmp_path / "store", timeout=60)
    assert statuses["first"].state == "failed"
    assert statuses["second"].state == "skipped"


def test_chain_over_file_handoff(tmp_path):
    text = (CONFIGS / "chain" / "chain.yml").read_text().replace("in_process_queue", "file_handoff")
    path = CONFIGS / "chain" / ".handoff-test.yml"
    path.write_text(text)
    try:
        statuses = run_chain(path, storage_root=tmp_path / "store", timeout=120)
    finally:
        path.unlink()
    assert all(s.ok for s in statuses.values()), {n: s.error for n, s in statuses.items()}
    assert len(statuses["serve"].records) == 200


# ----------------------------------------------------------------------- cli


def test_cli_validate_and_plan(capsys):
    assert main(["validate", "-c", str(CONFIGS / "mnist_base.yml"),
                 "-c", str(CONFIGS / "mnist_v2.yml")]) == 0
    out = capsys.readouterr().out
    assert "EPOCHS: 10" in out and "# config hash" in out
    assert main(["plan", "-c", str(CONFIGS / "mnist_base.yml"),
                 "--against", str(CONFIGS / "mnist_base.yml"),
                 "--against", str(CONFIGS / "mnist_v2.yml")]) == 0
    assert "EXECUTION.EPOCHS: 5 -> 10" in capsys.readouterr().out


def test_cli_train_deploy_inspect(tmp_path, capsys):
    cfg = tmp_path / "run.yml"
    cfg.write_text(yaml.safe_dump(synthetic_layer(**{"MODEL_PLUGIN": [{"PLUGIN": "LogitConfidence"}]})))
    root = str(tmp_path / "store")
    assert main(["train", "-c", str(cfg), "--storage-root", root]) == 0
    assert "checkpoint toy-v1-base-all/model/epoch2.ckpt" in capsys.readouterr().out
    assert main(["deploy", "-c", str(cfg), "--storage-root", root,
                 "--checkpoint", "toy-v1-base-all/model/epoch2.ckpt"]) == 0
    assert "120 records" in capsys.readouterr().out
    assert main(["inspect", "--storage-root", root, "--category", "plugin"]) == 0
    assert "toy-v1-base-all/plugin/LogitConfidence.bin" in capsys.readouterr().out


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train", "-c", str(tmp_path / "missing.yml")]) == 1
    bad = tmp_path / "bad.yml"
    bad.write_text("EXECUTION: {EPOCHS: -3}\n")
    assert main(["validate", "-c", str(bad)]) == 1
    assert "edna: error" in capsys.readouterr().err


def test_cli_add_component_file(tmp_path, capsys):
    comp = tmp_path / "mymodels.py"
    comp.write_text(textwrap.dedent("""
        from edna.decorators import register_model
        from edna.model import LinearClassifier

        @register_model
        class TinyNet(LinearClassifier):
            pass
    """))
    cfg = tmp_path / "run.yml"
    cfg.write_text(yaml.safe_dump(synthetic_layer(**{"MODEL.MODEL_ARCH": "TinyNet",
                                                     "MODEL.MODEL_KWARGS": {}})))
    root = tmp_path / "store"
    assert main(["train", "-c", str(cfg), "-a", str(comp), "--storage-root", str(root)]) == 0
    sources = list((root / "config").rglob("*mymodels.py"))
    assert sources and sources[0].read_text() == comp.read_text()


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=str(ROOT / "src"))
    out = subprocess.run([sys.executable, "-m", "edna.cli", "validate", "-c",
                          str(CONFIGS / "mnist_base.yml")], capture_output=True, text=True,
                         env=env, cwd=tmp_path)
    assert out.returncode == 0, out.stderr
