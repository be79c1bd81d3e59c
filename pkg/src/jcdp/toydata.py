"""Procedurally generated shape benchmark.

Each image is a textured background with one coloured, textured shape; the
class is the shape kind. Eight kinds exist so a benchmark (kinds 0-3) and a
class-disjoint surrogate (kinds 4-7) can be drawn from the same generator.
"""

from __future__ import annotations

import numpy as np

from .data import LabeledImages

SHAPE_KINDS = (
    "square", "disk", "triangle", "plus",
    "ring", "frame", "diamond", "cross",
)
BENCHMARK_KINDS = (0, 1, 2, 3)
DISJOINT_KINDS = (4, 5, 6, 7)

_SUPERSAMPLE = 4


def _mask(kind: int, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    dist = np.hypot(dx, dy)
    bar = r / 3.0
    if kind == 0:
        return (ax <= r) & (ay <= r)
    if kind == 1:
        return dist <= r
    if kind == 2:
        return (dy >= -r) & (dy <= r) & (ax <= (dy + r) / 2.0)
    if kind == 3:
        return ((ax <= bar) & (ay <= r)) | ((ay <= bar) & (ax <= r))
    if kind == 4:
        return (dist <= r) & (dist >= r * 0.5)
    if kind == 5:
        return (ax <= r) & (ay <= r) & ~((ax <= r * 0.5) & (ay <= r * 0.5))
    if kind == 6:
        return ax + ay <= r * 1.2
    if kind == 7:
        return (np.abs(ax - ay) <= bar) & (ax <= r) & (ay <= r)
    raise ValueError(f"unknown shape kind {kind}")


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 4) -> np.ndarray:
    """Low-frequency texture: coarse noise upsampled bilinearly to ``size``."""
    grid = rng.standard_normal((coarse + 1, coarse + 1))
    pos = np.linspace(0, coarse, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, coarse - 1)
    f = pos - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_image(rng: np.random.Generator, kind: int, size: int = 16,
                 texture: float = 0.5, grain: float = 0.0, min_contrast: float = 0.15,
                 clutter: int = 3, max_rotation: float = 30.0,
                 light: float = 0.15) -> np.ndarray:
    """One 3 x size x size image of shape ``kind``.

    ``clutter`` small blobs of random colour are drawn behind the shape. The
    shape is rotated by up to ``max_rotation`` degrees and the scene is lit
    from the top with a vertical brightness ramp of size ``light``, so images
    keep a canonical orientation.
    """
    bg = rng.uniform(0.1, 0.9, size=3)
    while True:
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - bg).mean() > min_contrast:
            break
    r = rng.uniform(0.25, 0.38) * size
    margin = r + 0.5
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    theta = np.deg2rad(rng.uniform(-max_rotation, max_rotation))

    s = _SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - cx, yy - cy
    c, si = np.cos(theta), np.sin(theta)
    mask = _mask(kind, c * dx + si * dy, -si * dx + c * dy, r).astype(np.float64)
    cover = mask.reshape(size, s, size, s).mean(axis=(1, 3))

    bg_tex = 0.08 * texture * _smooth_field(rng, size)
    freq = rng.uniform(0.6, 1.6)
    phase = rng.uniform(0, 2 * np.pi)
    angle = rng.uniform(0, np.pi)
    yy1, xx1 = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    stripes = 0.06 * texture * np.sin(freq * (np.cos(angle) * xx1 + np.sin(angle) * yy1) + phase)

    back = bg[:, None, None] + bg_tex[None]
    for _ in range(clutter):
        bx, by = rng.uniform(0, size, size=2)
        br = rng.uniform(1.0, 2.5)
        blob = (np.hypot(xx - bx, yy - by) <= br).astype(np.float64)
        blob = blob.reshape(size, s, size, s).mean(axis=(1, 3))
        back = back * (1 - blob[None]) + rng.uniform(0, 1, size=3)[:, None, None] * blob[None]
    front = fg[:, None, None] + stripes[None]
    img = back * (1 - cover[None]) + front * cover[None]
    ramp = light * (0.5 - (np.arange(size) + 0.5) / size)
    img = img + ramp[None, :, None]
    if grain:
        img += grain * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_shapes(
    n: int,
    seed: int,
    kinds=BENCHMARK_KINDS,
    size: int = 16,
    name: str = "shapes",
) -> LabeledImages:
    """Balanced draw of ``n`` images over ``kinds``; labels index into ``kinds``."""
    kinds = tuple(int(k) for k in kinds)
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(kinds)
    rng.shuffle(labels)
    images = np.stack([render_image(rng, kinds[y], size) for y in labels]) if n else (
        np.zeros((0, 3, size, size), np.float32)
    )
    return LabeledImages(
        images=images,
        labels=labels,
        name=name,
        class_names=[SHAPE_KINDS[k] for k in kinds],
        provenance=[{"stage": "generate", "generator": "shapes", "seed": int(seed),
                     "kinds": list(kinds), "size": size, "count": n}],
    )


def make_benchmark(
    seed: int,
    n_train: int = 2000,
    n_test: int = 500,
    n_surrogate: int = 1000,
    size: int = 16,
    surrogate: str = "match",
) -> dict[str, LabeledImages]:
    """Train/test splits plus an unlabeled-use surrogate split.

    ``surrogate="match"`` draws the surrogate from the same kinds with a
    different seed; ``"mismatch"`` draws it from the disjoint kinds.
    """
    ss = np.random.SeedSequence(seed)
    s_train, s_test, s_sur = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    kinds = BENCHMARK_KINDS if surrogate == "match" else DISJOINT_KINDS
    if surrogate not in ("match", "mismatch"):
        raise ValueError(f"surrogate must be 'match' or 'mismatch', got {surrogate!r}")
    return {
        "train": make_shapes(n_train, s_train, BENCHMARK_KINDS, size, "shapes-train"),
        "test": make_shapes(n_test, s_test, BENCHMARK_KINDS, size, "shapes-test"),
        "surrogate": make_shapes(n_surrogate, s_sur, kinds, size, f"shapes-surrogate-{surrogate}"),
    }
