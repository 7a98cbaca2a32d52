"""
A three stage chain
===================

filter -> train -> serve, each stage with its own config layers.
"""

import tempfile
from pathlib import Path

from edna.core import run_chain

manifest = Path(__file__).resolve().parents[1] / "configs" / "chain" / "chain.yml"
statuses = run_chain(manifest, storage_root=Path(tempfile.mkdtemp()) / "store", timeout=120)
for status in statuses.values():
    print(status.name, status.state, status.error or "")

served = statuses["serve"].records
print(len(served), "records, first:", served[0])
