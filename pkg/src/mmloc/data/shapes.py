"""Procedural categories: one outline program each.

Sketches only ever show the outline. Scene instances are filled with a random
color and a random pattern, which sketches never show.
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw


def _ring(n, rx=1.0, ry=1.0, cx=0.0, cy=0.0, a0=0.0, a1=2 * np.pi, endpoint=False):
    t = np.linspace(a0, a1, n, endpoint=endpoint)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _moon():
    a = np.deg2rad(50)
    outer = _ring(24, a0=a, a1=2 * np.pi - a, endpoint=True)
    c = 0.6
    end = outer[0]
    rho = np.hypot(end[0] - c, end[1])
    b = np.arctan2(end[1], end[0] - c)
    inner = _ring(16, rho, rho, c, 0.0, 2 * np.pi - b, b, endpoint=True)
    return np.concatenate([outer, inner[1:-1]])


def _drop():
    arc = _ring(24, 0.7, 0.7, 0.0, 0.3, np.deg2rad(-30), np.deg2rad(210), endpoint=True)
    return np.concatenate([arc, [[0.0, -1.0]]])


def _star(points=5, inner=0.45):
    t = -np.pi / 2 + np.arange(2 * points) * np.pi / points
    r = np.where(np.arange(2 * points) % 2 == 0, 1.0, inner)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _cross(w=0.36):
    return np.array([
        [-w, -1], [w, -1], [w, -w], [1, -w], [1, w], [w, w],
        [w, 1], [-w, 1], [-w, w], [-1, w], [-1, -w], [-w, -w],
    ], dtype=float)


def _heart():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    x = 16 * np.sin(t) ** 3
    y = -(13 * np.cos(t) - 5 * np.cos(2 * t) - 2 * np.cos(3 * t) - np.cos(4 * t))
    v = np.stack([x, y], axis=1)
    v -= (v.max(0) + v.min(0)) / 2
    return v / np.abs(v).max()


def _mushroom():
    cap = _ring(20, 1.0, 0.8, 0.0, 0.05, np.pi, 2 * np.pi, endpoint=True)
    stem = np.array([[0.3, 0.05], [0.3, 0.95], [-0.3, 0.95], [-0.3, 0.05]])
    return np.concatenate([cap, stem])


# outline name -> vertices in [-1, 1]^2 with y pointing down. Order fixes category ids.
OUTLINES = {
    "circle": _ring(32),
    "square": np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float) * 0.85,
    "star": _star(),
    "moon": _moon(),
    "oval": _ring(32, 1.0, 0.55),
    "triangle": np.array([[0, -1], [1, 0.8], [-1, 0.8]], dtype=float),
    "cross": _cross(),
    "drop": _drop(),
    "heart": _heart(),
    "house": np.array([[0, -1], [0.9, -0.2], [0.9, 0.9], [-0.9, 0.9], [-0.9, -0.2]]),
    "arrow": np.array([[1, 0], [0.2, -0.7], [0.2, -0.25], [-1, -0.25], [-1, 0.25], [0.2, 0.25], [0.2, 0.7]]),
    "diamond": np.array([[0, -1], [0.6, 0], [0, 1], [-0.6, 0]], dtype=float),
    "hexagon": _ring(6) * 0.95,
    "tree": np.array([[0, -1], [0.8, 0.35], [0.2, 0.35], [0.2, 1], [-0.2, 1], [-0.2, 0.35], [-0.8, 0.35]]),
    "bolt": np.array([[0.2, -1], [0.65, -1], [0.2, -0.15], [0.6, -0.15], [-0.35, 1], [-0.05, 0.1],
                      [-0.45, 0.1]]),
    "mushroom": _mushroom(),
}

# scene appearance only; sketches never show a fill
PATTERNS = ("solid", "striped")


@dataclass
class CategorySpec:
    id: int
    name: str
    outline: str
    gloss: list = field(default_factory=list)

    @property
    def vertices(self):
        return OUTLINES[self.outline]


def catalogue(n=16):
    if not 1 <= n <= len(OUTLINES):
        raise ValueError(f"between 1 and {len(OUTLINES)} categories are available, asked for {n}")
    out = []
    return [CategorySpec(i, name, name) for i, name in enumerate(list(OUTLINES)[:n])]


def render_sketch(category, jitter=0.3, seed=0, size=64):
    """Outline-only raster in [0, 1] (1 = ink).

    ``jitter == 0`` gives the canonical prototype whatever the seed.
    """
    if not 0.0 <= jitter <= 1.0:
        raise ValueError(f"jitter must lie in [0, 1], got {jitter}")
    verts = np.asarray(category.vertices, dtype=float)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        verts = verts + rng.normal(0.0, 0.06 * jitter, verts.shape)
        theta = rng.normal(0.0, 0.25 * jitter)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        verts = verts @ rot.T * rng.uniform(1 - 0.3 * jitter, 1.0)
        verts = verts + rng.uniform(-0.1, 0.1, 2) * jitter
        width = int(rng.integers(2, 4))
    else:
        width = 2
    pts = (verts * 0.4 + 0.5) * size
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    seq = [tuple(p) for p in pts] + [tuple(pts[0])]
    draw.line(seq, fill=255, width=width, joint="curve")
    return np.asarray(img, dtype=np.float32) / 255.0


def polygon_mask(vertices, box_size, offset, canvas):
    """Boolean mask of the outline polygon scaled into a square of side ``box_size``."""
    pts = (np.asarray(vertices) * 0.5 + 0.5) * (box_size - 1) + np.asarray(offset)
    img = Image.new("L", canvas, 0)
    ImageDraw.Draw(img).polygon([tuple(p) for p in pts], fill=1)
    return np.asarray(img, dtype=bool), pts


def draw_instance(canvas, category, box_size, offset, color, rng):
    """Paint one instance with a random fill pattern onto ``canvas`` (H, W, 3 uint8) in place.

    Returns the tight box, or None when nothing was drawn.
    """
    h, w = canvas.shape[:2]
    mask, _ = polygon_mask(category.vertices, box_size, offset, (w, h))
    color = np.asarray(color, dtype=np.uint8)
    ink = mask
    if PATTERNS[int(rng.integers(len(PATTERNS)))] == "striped":
        phase = int(rng.integers(0, 6))
        stripe = ((np.arange(h)[:, None] + phase) // 3) % 2 == 0
        canvas[mask & ~stripe] = (color * 0.35).astype(np.uint8)
        ink = mask & stripe
    canvas[ink] = color
    yy, xx = np.nonzero(mask)
    if len(yy) == 0:
        return None
    return np.array([xx.min(), yy.min(), xx.max() + 1, yy.max() + 1], dtype=np.float64)
