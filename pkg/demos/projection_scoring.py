"""Orthogonal-projection scoring on hand-made vectors.

A proposal vector is scored by how much of it survives projection onto the
span of the query's sketch and gloss vectors.
"""

import numpy as np

from mmloc.scoring import build_projection

rng = np.random.default_rng(0)
d = 16
sketch = rng.normal(size=d)
gloss = rng.normal(size=d)
op = build_projection([sketch, gloss])

candidates = {
    "mix of sketch and gloss": 0.7 * sketch + 0.4 * gloss,
    "sketch direction plus noise": sketch + 0.5 * rng.normal(size=d),
    "gloss direction plus noise": gloss + 0.5 * rng.normal(size=d),
    "unrelated": rng.normal(size=d),
}
for name, r in candidates.items():
    kept = np.linalg.norm(op(r)) / np.linalg.norm(r)
    print(f"{name:28s} fraction kept {kept:.3f}")
