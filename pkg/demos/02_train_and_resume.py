"""
Training, checkpoints and resume
================================

Train a small MLP on Gaussian blobs, stop early, then pick up where it left off.
"""

import tempfile
from pathlib import Path

import numpy as np

from edna.core import apply, train
from edna.storage import read_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
layers = [CONFIGS / "mnist_base.yml", CONFIGS / "synthetic.yml"]
store = Path(tempfile.mkdtemp()) / "store"

plan = apply(layers, storage_root=store)
print("experiment", plan.key)

# three epochs now, SAVE_FREQUENCY is 5 so the early stop writes its own checkpoint
first = train(plan, epochs=3)
print(first.checkpoints)

# a fresh plan from the same layers resumes from that file
second = train(apply(layers, storage_root=store), resume_from=first.last_checkpoint)
print(second.checkpoints, "eval accuracy", second.trainer.reports[-1].accuracy)

# the straight five-epoch run lands on exactly the same parameters
straight = train(apply(layers, storage_root=store.with_name("straight")))
a = read_checkpoint(second.last_checkpoint, second.trainer.storage.primary)
b = read_checkpoint(straight.last_checkpoint, straight.trainer.storage.primary)
print("bit identical:", np.array_equal(a.params, b.params))
