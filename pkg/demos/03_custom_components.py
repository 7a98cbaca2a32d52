"""
Custom components and provenance
================================

Register a model from a user file, train it, and check the packaged bundle.
"""

import tempfile
import textwrap
from pathlib import Path

from edna.core import EdnaML
from edna.storage import load_provenance

work = Path(tempfile.mkdtemp())
models = work / "my_models.py"
models.write_text(textwrap.dedent("""
    import numpy as np

    from edna.decorators import register_model
    from edna.model import LinearClassifier


    @register_model
    class ScaledLinear(LinearClassifier):
        def forward_impl(self, x, **kwargs):
            return super().forward_impl(2.0 * np.asarray(x), **kwargs)
"""))

config = {
    "EXECUTION": {"EPOCHS": 3, "SEED": 1},
    "DATAREADER": {"CRAWLER": "synthetic_gaussian",
                   "CRAWLER_ARGS": {"n_samples": 200, "n_features": 2, "n_classes": 2}},
    "MODEL": {"MODEL_ARCH": "ScaledLinear"},
    "OPTIMIZER": [{"OPTIMIZER": "SGD", "BASE_LR": 0.1}],
    "SAVE": {"MODEL_CORE_NAME": "scaled", "SAVE_FREQUENCY": 1},
}

ml = EdnaML(config, storage_root=work / "store")
ml.add(models)
plan = ml.apply()
result = ml.train()
print(result.last_checkpoint)

# the bundle holds the layers, the effective config and a copy of my_models.py
bundle = load_provenance(plan.storage.primary, plan.provenance_key)
print([name for _, name, *_ in bundle.component_sources], bundle.seed)
