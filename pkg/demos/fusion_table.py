"""Train one model per fusion kind for a seed and print the open-set comparison.

Usage: python demos/fusion_table.py [seed]. Takes about 25 minutes per seed on one CPU core.
"""

import sys

from mmloc.config import ExperimentConfig
from mmloc.data.synthetic import generate_dataset
from mmloc.metrics import format_table
from mmloc.runner import evaluate
from mmloc.training import train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
base = ExperimentConfig(seed=seed)
ds = generate_dataset(base.data, seed)
rows = []
for fusion in ("sketch", "gloss", "concat", "ops"):
    ckpt = train(base.replace(fusion_kind=fusion), ds)
    rows.append(("Ours", fusion, evaluate(ckpt, "open", fusion, ds)))
    if fusion == "ops":
        rows.append(("No attention", fusion, evaluate(ckpt, "open", fusion, ds, bypass=True)))
print(format_table(rows), end="")
