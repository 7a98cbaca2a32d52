"""
Layered configurations
======================

A base file plus a small override file, merged left to right.
"""

from pathlib import Path

from edna.config import diff, effective_config, load_stack, merge_layers

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# the override only touches SAVE; everything else comes from the base
merged = merge_layers(load_stack([CONFIGS / "config_base.yml", CONFIGS / "updated_log.yml"]))
print(merged["SAVE"])

# a full MNIST-style stack validates against the schema and gets a stable hash
base = effective_config(load_stack([CONFIGS / "mnist_base.yml"]))
v2 = effective_config(load_stack([CONFIGS / "mnist_base.yml", CONFIGS / "mnist_v2.yml"]))
print(v2.hexdigest)
for path, old, new in diff(base, v2):
    print(f"{path}: {old!r} -> {new!r}")
