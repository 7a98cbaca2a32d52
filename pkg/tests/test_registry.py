import pytest

from edna.builtins import default_registry
from edna.errors import (ComponentNotFoundError, DigestMismatchError, DuplicateRegistrationError,
                         FrozenRegistryError)
from edna.model import ModelAbstract
from edna.registry import ComponentKind, Registry
from edna.trainer import ClassificationTrainer

MODEL_SRC = '''
from edna.model import ModelAbstract

class CustomResnet(ModelAbstract):
    pass
'''


def _custom(tmp_path):
    path = tmp_path / "model.py"
    path.write_text(MODEL_SRC)
    ns = {}
    exec(compile(MODEL_SRC, str(path), "exec"), ns)
    return path, ns["CustomResnet"]


def test_user_model_resolves(tmp_path):
    path, cls = _custom(tmp_path)
    reg = default_registry()
    reg.add(ComponentKind.MODEL, cls, source=path)
    got = reg.resolve(ComponentKind.MODEL, "CustomResnet")
    assert got.factory is cls and got.source.path == str(path.resolve())


def test_user_tier_shadows_builtin():
    class Mine(ClassificationTrainer):
        pass

    reg = default_registry()
    reg.add(ComponentKind.TRAINER, Mine, name="ClassificationTrainer")
    assert reg.resolve(ComponentKind.TRAINER, "ClassificationTrainer").factory is Mine


def test_unknown_lists_available():
    reg = default_registry()
    with pytest.raises(ComponentNotFoundError) as info:
        reg.resolve(ComponentKind.MODEL, "ClassificationResnet")
    assert "MLPClassifier" in str(info.value) and "ClassificationResnet" in str(info.value)


def test_duplicate_in_same_tier():
    reg = Registry()
    reg.add(ComponentKind.METRIC, dict, name="m")
    with pytest.raises(DuplicateRegistrationError):
        reg.add(ComponentKind.METRIC, list, name="m")


def test_frozen_rejects_additions():
    reg = default_registry()
    reg.freeze()
    with pytest.raises(FrozenRegistryError):
        reg.add(ComponentKind.MODEL, ModelAbstract, name="late")
    assert not reg.copy().frozen


def test_source_changed_after_registration(tmp_path):
    path, cls = _custom(tmp_path)
    reg = Registry()
    reg.add(ComponentKind.MODEL, cls, source=path)
    assert reg.snapshot_sources()[0][1] == "CustomResnet"
    path.write_text(MODEL_SRC + "# edited\n")
    with pytest.raises(DigestMismatchError):
        reg.snapshot_sources()


def test_source_removed(tmp_path):
    path, cls = _custom(tmp_path)
    reg = Registry()
    reg.add(ComponentKind.MODEL, cls, source=path)
    path.unlink()
    with pytest.raises(FileNotFoundError):
        reg.snapshot_sources()


def test_builtins_cover_every_kind():
    reg = default_registry()
    for kind in ComponentKind:
        assert reg.names(kind), kind
    assert reg.snapshot_sources() == []
