"""Procedural, seeded image corpora.

Two corpora stand in for real data:

* a classification set of 32×32 images, one glyph shape per class drawn in a
  contrasting colour over a textured, grainy background;
* a scene set of 64×64 images whose class is carried by the background texture
  orientation, each with a convex quadrilateral "billboard" the adversary may
  paint on.

Every image is generated from its own ``numpy`` generator keyed by
``(seed, index)``, so a corpus is a pure function of ``(seed, count, K)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLASSIFICATION_SIZE = 32
SCENE_SIZE = 64
PATCH_SIZE = 24
GREEN_SCREEN = (0.05, 0.75, 0.15)
MAX_CLASSES = 16
GLYPH_CONTRAST = (0.4, 0.6)
SCENE_SIGNAL = 0.04  # amplitude of the class-bearing grating
GRAIN_SIGMA = 0.08  # per-pixel film grain; teaches the model to ignore print noise


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int


@dataclass(frozen=True)
class Scene:
    background: np.ndarray  # (64, 64, 3)
    billboard_corners: np.ndarray  # (4, 2) float64, (x, y), counter-clockwise
    base_patch: np.ndarray  # (24, 24, 3)
    label: int

    def placeholder_patch(self) -> np.ndarray:
        return green_patch(self.base_patch.shape[:2])


def green_patch(shape: Sequence[int] = (PATCH_SIZE, PATCH_SIZE)) -> np.ndarray:
    out = np.empty((shape[0], shape[1], 3), dtype=np.float32)
    out[...] = np.asarray(GREEN_SCREEN, dtype=np.float32)
    return out


def _check_k(k: int) -> None:
    if not 2 <= k <= MAX_CLASSES:
        raise ValueError(f"K must be in [2, {MAX_CLASSES}], got {k}")


def balanced_labels(seed: int, count: int, k: int) -> np.ndarray:
    labels = np.arange(count) % k
    rng = np.random.default_rng([seed, 0x1ABE1])
    return labels[rng.permutation(count)]


# ---------------------------------------------------------------- textures
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(c, c)  # xs, ys in (0, 1)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled value noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    t = (np.arange(size) + 0.5) / size * cells
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _textured_background(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=3)
    noise = _smooth_noise(rng, size, 4)[..., None] * rng.uniform(-1, 1, size=3)
    xs, ys = _grid(size)
    ang = rng.uniform(0, math.pi)
    freq = rng.uniform(2.0, 5.0)
    grating = np.sin(2 * math.pi * freq * (xs * math.cos(ang) + ys * math.sin(ang)) + rng.uniform(0, 6.3))
    img = base + amplitude * noise + 0.5 * amplitude * grating[..., None]
    return img


# ------------------------------------------------------------------ glyphs
def _glyph_mask(kind: int, xs: np.ndarray, ys: np.ndarray, r: float) -> np.ndarray:
    """Boolean mask of glyph ``kind`` centred at the origin with radius ``r``."""
    ax, ay = np.abs(xs), np.abs(ys)
    t = 0.32 * r  # stroke half-width
    if kind == 0:  # disc
        return xs**2 + ys**2 <= r**2
    if kind == 1:  # square
        return (ax <= 0.85 * r) & (ay <= 0.85 * r)
    if kind == 2:  # triangle, apex up
        return (ys <= 0.8 * r) & (ys >= -0.9 * r) & (ax <= (0.8 * r - ys) * 0.62)
    if kind == 3:  # plus
        return ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    if kind == 4:  # ring
        d = np.sqrt(xs**2 + ys**2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == 5:  # diamond
        return ax + ay <= r
    if kind == 6:  # horizontal bar
        return (ax <= r) & (ay <= 0.38 * r)
    if kind == 7:  # vertical bar
        return (ay <= r) & (ax <= 0.38 * r)
    if kind == 8:  # X
        return ((np.abs(xs - ys) <= 1.3 * t) | (np.abs(xs + ys) <= 1.3 * t)) & (ax <= 0.8 * r) & (ay <= 0.8 * r)
    if kind == 9:  # hollow square
        return (ax <= 0.85 * r) & (ay <= 0.85 * r) & ~((ax <= 0.45 * r) & (ay <= 0.45 * r))
    if kind == 10:  # upper half disc
        return (xs**2 + ys**2 <= r**2) & (ys <= 0.15 * r)
    if kind == 11:  # L shape
        return ((ax <= 0.8 * r) & (ys >= 0.8 * r - 2 * t) & (ys <= 0.8 * r)) | (
            (xs >= -0.8 * r) & (xs <= -0.8 * r + 2 * t) & (ay <= 0.8 * r)
        )
    if kind == 12:  # T shape
        return ((ax <= 0.85 * r) & (ys <= -0.85 * r + 2 * t) & (ys >= -0.85 * r)) | ((ax <= t) & (ay <= 0.85 * r))
    if kind == 13:  # two dots
        return ((xs - 0.5 * r) ** 2 + ys**2 <= (0.42 * r) ** 2) | ((xs + 0.5 * r) ** 2 + ys**2 <= (0.42 * r) ** 2)
    if kind == 14:  # wide ellipse
        return (xs / r) ** 2 + (ys / (0.45 * r)) ** 2 <= 1
    if kind == 15:  # triangle, apex down
        return (ys >= -0.8 * r) & (ys <= 0.9 * r) & (ax <= (0.8 * r + ys) * 0.62)
    raise ValueError(f"no glyph for class {kind}")


def _classification_image(seed: int, index: int, label: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index, 0xC1A55])
    size = CLASSIFICATION_SIZE
    img = _textured_background(rng, size, amplitude=0.10)
    xs, ys = _grid(size)
    cx, cy = rng.uniform(0.38, 0.62, size=2)
    r = rng.uniform(0.26, 0.36)
    mask = _glyph_mask(label, xs - cx, ys - cy, r)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    contrast = rng.uniform(*GLYPH_CONTRAST)
    colour = img[mask].mean(axis=0) + contrast * direction * math.sqrt(3)
    img[mask] = 0.35 * img[mask] + 0.65 * colour
    img += rng.normal(0.0, GRAIN_SIGMA, size=(size, size, 1))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_classification_set(seed: int, count: int, k: int = 4) -> list[LabeledImage]:
    """``count`` labelled 32×32 glyph images over ``k`` balanced classes."""
    _check_k(k)
    if count < 1:
        raise ValueError("count must be >= 1")
    labels = balanced_labels(seed, count, k)
    return [LabeledImage(_classification_image(seed, i, int(lab)), int(lab)) for i, lab in enumerate(labels)]


# ------------------------------------------------------------------ scenes
def polygon_area(corners: np.ndarray) -> float:
    """Signed shoelace area; positive means counter-clockwise in (x, y)."""
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_convex_ccw(corners: np.ndarray) -> bool:
    pts = np.asarray(corners, dtype=np.float64)
    for i in range(len(pts)):
        a, b, c = pts[i], pts[(i + 1) % len(pts)], pts[(i + 2) % len(pts)]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross <= 0:
            return False
    return polygon_area(pts) > 4.0


def _billboard(rng: np.random.Generator, size: int) -> np.ndarray:
    lo, hi = 0.08 * size * size, 0.25 * size * size
    while True:
        w = rng.uniform(20, 34)
        h = rng.uniform(16, 28)
        x0 = rng.uniform(2, size - 2 - w)
        y0 = rng.uniform(2, size - 2 - h)
        rect = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])
        # perspective-like skew: one vertical side shrinks
        shrink = rng.uniform(0.0, 0.2) * h
        side = rng.integers(2)
        if side:
            rect[1, 1] += shrink / 2
            rect[2, 1] -= shrink / 2
        else:
            rect[0, 1] += shrink / 2
            rect[3, 1] -= shrink / 2
        rect += rng.uniform(-1.0, 1.0, size=rect.shape)
        rect = np.clip(rect, 1.0, size - 1.0)
        area = polygon_area(rect)
        if is_convex_ccw(rect) and lo <= area <= hi:
            return rect


def _scene_background(rng: np.random.Generator, label: int, k: int) -> np.ndarray:
    size = SCENE_SIZE
    xs, ys = _grid(size)
    horizon = rng.uniform(0.3, 0.5)
    sky = np.array([0.55, 0.7, 0.9]) + rng.uniform(-0.1, 0.1, size=3)
    ground = rng.uniform(0.3, 0.6, size=3)
    img = np.where((ys < horizon)[..., None], sky * (0.85 + 0.3 * ys[..., None]), ground)
    # class signal: a faint oriented grating over the whole frame
    angle = math.pi * label / k + rng.uniform(-0.08, 0.08)
    freq = rng.uniform(5.0, 7.0)
    phase = rng.uniform(0, 2 * math.pi)
    grating = np.sin(2 * math.pi * freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
    tint = rng.uniform(0.5, 1.0, size=3)
    img = img + SCENE_SIGNAL * grating[..., None] * tint
    img = img + 0.05 * _smooth_noise(rng, size, 6)[..., None]
    # clutter: a few soft blobs (trees, vehicles)
    for _ in range(rng.integers(2, 5)):
        bx, by = rng.uniform(0, 1, size=2)
        br = rng.uniform(0.04, 0.1)
        blob = np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * br**2))
        img = img * (1 - 0.6 * blob[..., None]) + 0.6 * blob[..., None] * rng.uniform(0.1, 0.8, size=3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def benign_painting(rng: np.random.Generator, size: int = PATCH_SIZE) -> np.ndarray:
    """A smooth colourful "city art" painting."""
    xs, ys = _grid(size)
    c0, c1 = rng.uniform(0.2, 0.8, size=(2, 3))
    img = c0 * (1 - ys[..., None]) + c1 * ys[..., None]
    for _ in range(rng.integers(3, 6)):
        bx, by = rng.uniform(0.1, 0.9, size=2)
        br = rng.uniform(0.1, 0.25)
        blob = np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * br**2))
        img = img * (1 - 0.8 * blob[..., None]) + 0.8 * blob[..., None] * rng.uniform(0.05, 0.95, size=3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _scene(seed: int, index: int, label: int, k: int) -> Scene:
    rng = np.random.default_rng([seed, index, 0x5CE7E])
    background = _scene_background(rng, label, k)
    corners = _billboard(rng, SCENE_SIZE)
    patch = benign_painting(rng)
    return Scene(background, corners, patch, label)


def generate_scene_set(seed: int, count: int, k: int = 4) -> list[Scene]:
    """``count`` 64×64 scenes with billboards over ``k`` balanced classes."""
    _check_k(k)
    if count < 1:
        raise ValueError("count must be >= 1")
    labels = balanced_labels(seed, count, k)
    return [_scene(seed, i, int(lab), k) for i, lab in enumerate(labels)]


# --------------------------------------------------------------------- I/O
def to_uint8(image: np.ndarray) -> np.ndarray:
    """Round-half-up quantisation of [0, 1] values to 0..255."""
    return np.floor(np.clip(image, 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).astype(np.float32)) / 255.0


def export_classification_set(items: Iterable[LabeledImage], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, item in enumerate(items):
        name = f"img_{i:05d}.ppm"
        write_ppm(directory / name, item.image)
        lines.append(f"{name}\t{item.label}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def export_scene_set(scenes: Iterable[Scene], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.ppm"
        write_ppm(directory / name, scene.background)
        write_ppm(directory / f"scene_{i:05d}_patch.ppm", scene.base_patch)
        coords = "\t".join(f"{v:.6f}" for v in scene.billboard_corners.reshape(-1))
        lines.append(f"{name}\t{scene.label}\t{coords}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path: str | Path) -> list[tuple[str, int, np.ndarray | None]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        corners = np.array([float(v) for v in parts[2:]]).reshape(4, 2) if len(parts) > 2 else None
        records.append((parts[0], int(parts[1]), corners))
    return records


def stack_images(items: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([it.image for it in items]).astype(np.float32)
    labels = np.array([it.label for it in items], dtype=np.int64)
    return images, labels
