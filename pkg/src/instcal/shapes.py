"""ShapesWorld: a procedural 5-class segmentation source domain.

Each scene is a 64x64 RGB image with a smooth two-colour background and a
few flat-coloured shapes.  The mask is the exact rasterisation of the shapes
in painting order (later shapes occlude earlier ones).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domains import DomainSpec

SIZE = 64
CLASSES = ("background", "circle", "rectangle", "triangle", "stripe")
N_CLASSES = len(CLASSES)
IGNORE_INDEX = 255

# base RGB colour of each foreground class; instances are jittered around it
DEFAULT_PALETTE = {
    "circle": (0.85, 0.25, 0.20),
    "rectangle": (0.20, 0.35, 0.85),
    "triangle": (0.25, 0.75, 0.30),
    "stripe": (0.90, 0.80, 0.20),
}
COLOR_JITTER = 0.12
MIN_PIXELS = 20


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    mask: np.ndarray  # H x W, int64
    seed: int
    domain: DomainSpec = field(default_factory=DomainSpec.identity)


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    cols = []
    for _ in range(2):
        gray = rng.uniform(0.25, 0.75)
        cols.append(np.clip(gray + rng.uniform(-0.08, 0.08, 3), 0, 1))
    a, b = cols
    return a[:, None, None] * (1 - t) + b[:, None, None] * t


def _circle(rng, yy, xx, size):
    r = rng.uniform(5, 12)
    cy, cx = rng.uniform(r, size - r, 2)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rectangle(rng, yy, xx, size):
    h, w = rng.uniform(8, 22, 2)
    y0 = rng.uniform(0, size - h)
    x0 = rng.uniform(0, size - w)
    return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)


def _triangle(rng, yy, xx, size):
    r = rng.uniform(8, 14)
    cy, cx = rng.uniform(r, size - r, 2)
    base = rng.uniform(0, 2 * np.pi)
    angles = base + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
    py, px = cy + r * np.sin(angles), cx + r * np.cos(angles)

    def edge(i, j):
        return (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])

    e0, e1, e2 = edge(0, 1), edge(1, 2), edge(2, 0)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _stripe(rng, yy, xx, size):
    width = rng.uniform(3, 5)
    angle = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
    dist = np.abs(-np.sin(angle) * (xx - cx) + np.cos(angle) * (yy - cy))
    return dist <= width / 2


_DRAW = {"circle": _circle, "rectangle": _rectangle, "triangle": _triangle, "stripe": _stripe}


def generate_scene(seed: int, n_shapes: Sequence[int] | int = (2, 5),
                   palette: dict | None = None, size: int = SIZE) -> Sample:
    """Deterministic scene for ``seed``.

    ``n_shapes`` is either an inclusive ``(lo, hi)`` range or an exact count.
    """
    palette = DEFAULT_PALETTE if palette is None else palette
    rng = np.random.default_rng(seed)
    if isinstance(n_shapes, (int, np.integer)):
        count = int(n_shapes)
    else:
        lo, hi = n_shapes
        count = int(rng.integers(lo, hi + 1))
    image = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = _grid(size)
    names = CLASSES[1:]
    for _ in range(count):
        cls = int(rng.integers(len(names)))
        name = names[cls]
        region = _DRAW[name](rng, yy, xx, size)
        while region.sum() < MIN_PIXELS:
            region = _DRAW[name](rng, yy, xx, size)
        color = np.clip(np.asarray(palette[name]) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0, 1)
        image[:, region] = color[:, None]
        mask[region] = cls + 1
    return Sample(image=image, mask=mask, seed=int(seed))


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Disjoint, reproducible per-image seeds for each split."""
    split_id = {"train": 0, "val": 1, "test": 2}[split]
    ss = np.random.SeedSequence([int(base_seed), split_id, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# weak ("default") augmentation: random scale, crop and horizontal flip


def _resample(arr: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill) -> np.ndarray:
    """Nearest-neighbour gather; coordinates outside the image get ``fill``."""
    h, w = arr.shape[-2:]
    ri = np.floor(rows).astype(np.int64)
    ci = np.floor(cols).astype(np.int64)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = arr[..., np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
    return np.where(inside, out, fill).astype(arr.dtype)


def weak_augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                 scale_range=(0.8, 1.25)) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    s = rng.uniform(*scale_range)
    # crop offset inside the scaled canvas
    oy = rng.uniform(min(0, h * s - h), max(0, h * s - h))
    ox = rng.uniform(min(0, w * s - w), max(0, w * s - w))
    yy, xx = _grid(h)
    rows = (yy + oy) / s
    cols = (xx + ox) / s
    if rng.random() < 0.5:
        cols = (w - xx + ox) / s
    img = _resample(image, rows, cols, 0.5)
    msk = _resample(mask, rows, cols, IGNORE_INDEX)
    return img, msk


def make_split(base_seed: int, split: str, n: int, **kw) -> list[Sample]:
    return [generate_scene(scene_seed(base_seed, split, i), **kw) for i in range(n)]


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Binary P6 dump of a 3 x H x W image in [0, 1], with an optional header comment."""
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    arr = arr.transpose(1, 2, 0)
    h, w = arr.shape[:2]
    note = "" if comment is None else "# " + comment.replace("\n", " ") + "\n"
    with open(path, "wb") as fh:
        fh.write(f"P6\n{note}{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#":
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos)
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


# colours used when rendering label masks
MASK_COLORS = np.array([
    [0.15, 0.15, 0.15],
    [0.85, 0.25, 0.20],
    [0.20, 0.35, 0.85],
    [0.25, 0.75, 0.30],
    [0.90, 0.80, 0.20],
])


def colorize(mask: np.ndarray) -> np.ndarray:
    m = np.where(mask == IGNORE_INDEX, 0, mask)
    img = MASK_COLORS[m].transpose(2, 0, 1)
    img[:, mask == IGNORE_INDEX] = 1.0
    return img


def triptych(image: np.ndarray, truth: np.ndarray, pred: np.ndarray, gap: int = 2) -> np.ndarray:
    """Input / ground truth / prediction side by side."""
    h = image.shape[1]
    sep = np.ones((3, h, gap))
    return np.concatenate([image, sep, colorize(truth), sep, colorize(pred)], axis=2)
