import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def synthetic_layer(**overrides):
    """A minimal train-mode layer on two 2-d Gaussian blobs."""
    layer = {
        "EXECUTION": {"EPOCHS": 2, "SEED": 3, "BATCH_SIZE": 16},
        "DATAREADER": {"CRAWLER": "synthetic_gaussian",
                       "CRAWLER_ARGS": {"n_samples": 120, "n_features": 2, "n_classes": 2,
                                        "class_sep": 2.0}},
        "MODEL": {"MODEL_ARCH": "MLPClassifier", "MODEL_KWARGS": {"hidden": 8}},
        "OPTIMIZER": [{"OPTIMIZER": "Adam", "BASE_LR": 1e-2}],
        "SAVE": {"MODEL_CORE_NAME": "toy", "SAVE_FREQUENCY": 1},
    }
    for dotted, value in overrides.items():
        node = layer
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return layer


@pytest.fixture
def store(tmp_path):
    return tmp_path / "store"
