"""Seeded, non-differentiable imaging pipelines.

A :class:`DistortionChain` simulates the printer → camera → extractor path for
the global threat model, and, split at the compositing step, the printer →
scene → camera path for the patch threat model. Chains operate on plain numpy
arrays and never touch the autograd tape.

Randomness has two scopes. Per-chain constants (palette, colour shift, gamma)
are drawn once from ``(seed, stage position)``. Per-image draws (sensor noise,
recapture jitter) come from ``(seed, stage position, image_index)`` so one
image always sees the same physical realisation.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Sequence

import numpy as np

from .dataset import Scene
from .render import Homography, nearest_composite, patch_corners, solve_homography, source_coordinates

BAYER4 = np.array([[0, 8, 2, 10], [12, 4, 14, 6], [3, 11, 1, 9], [15, 7, 13, 5]], dtype=np.float64)


def round_half_up(values: np.ndarray, levels: int = 255) -> np.ndarray:
    return np.floor(values * levels + 0.5) / levels


def _clip01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class Stage:
    """Base for distortion stages.

    ``pixelwise`` stages map each pixel value independently; ``monotone`` ones
    additionally preserve per-pixel ordering. ``site`` decides where the stage
    runs in the patch pipeline: on the patch before compositing ("printer") or
    on the whole scene after it ("camera").
    """

    name: ClassVar[str] = ""
    pixelwise: ClassVar[bool] = True
    monotone: ClassVar[bool] = True
    default_site: ClassVar[str] = "camera"

    site: str | None = field(default=None, kw_only=True)

    @property
    def where(self) -> str:
        return self.site or self.default_site

    def resolve(self, rng: np.random.Generator) -> dict[str, Any]:
        return {}

    def apply(self, img: np.ndarray, consts: dict[str, Any], rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, Any]:
        out = {k: v for k, v in asdict(self).items() if k != "site"}
        out["site"] = self.where
        return out


@dataclass(frozen=True)
class ColorShift(Stage):
    name: ClassVar[str] = "ColorShift"
    default_site: ClassVar[str] = "printer"

    gain_range: tuple[float, float] = (0.9, 1.1)
    offset_range: tuple[float, float] = (-0.05, 0.05)

    def resolve(self, rng):
        return {"gain": rng.uniform(*self.gain_range, size=3), "offset": rng.uniform(*self.offset_range, size=3)}

    def apply(self, img, consts, rng):
        return _clip01(img * consts["gain"] + consts["offset"])


@dataclass(frozen=True)
class Gamma(Stage):
    name: ClassVar[str] = "Gamma"

    gamma_range: tuple[float, float] = (0.8, 1.25)

    def resolve(self, rng):
        return {"gamma": float(rng.uniform(*self.gamma_range))}

    def apply(self, img, consts, rng):
        return _clip01(img) ** consts["gamma"]


@dataclass(frozen=True)
class PrinterPalette(Stage):
    """Nearest-colour quantisation to a jittered RGB lattice, optionally dithered.

    ``colors`` must be a perfect cube; the lattice has ``round(colors ** (1/3))``
    levels per channel, each lattice point moved by up to ``jitter`` of the
    level spacing.
    """

    name: ClassVar[str] = "PrinterPalette"
    pixelwise: ClassVar[bool] = False
    monotone: ClassVar[bool] = False
    default_site: ClassVar[str] = "printer"

    colors: int = 512
    dither: bool = True
    jitter: float = 0.2

    def __post_init__(self):
        n = round(self.colors ** (1 / 3))
        if n < 2 or n**3 != self.colors:
            raise ValueError(f"PrinterPalette colors must be a cube >= 8, got {self.colors}")

    @property
    def levels(self) -> int:
        return round(self.colors ** (1 / 3))

    def resolve(self, rng):
        n = self.levels
        grid = np.linspace(0.0, 1.0, n)
        lattice = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
        spacing = 1.0 / (n - 1)
        palette = _clip01(lattice + rng.uniform(-self.jitter, self.jitter, size=lattice.shape) * spacing)
        return {"palette": palette, "spacing": spacing}

    def apply(self, img, consts, rng):
        h, w, _ = img.shape
        values = img.astype(np.float64)
        if self.dither:
            thresh = (BAYER4 + 0.5) / 16.0 - 0.5
            tiled = np.tile(thresh, (h // 4 + 1, w // 4 + 1))[:h, :w]
            values = values + tiled[..., None] * consts["spacing"]
        return nearest_palette(values, consts["palette"], self.levels, self.jitter).reshape(h, w, 3)


def nearest_palette(values: np.ndarray, palette: np.ndarray, levels: int | None = None, jitter: float | None = None) -> np.ndarray:
    """Nearest palette colour per pixel (first index wins ties).

    When the palette is a jittered lattice with ``levels`` per channel, only
    lattice neighbours within a provably sufficient radius of the rounded cell
    are searched; otherwise every entry is compared.
    """
    flat = values.reshape(-1, 3).astype(np.float64)
    if levels is None or jitter is None or jitter >= 0.5:
        return palette[_brute_nearest(flat, palette)]
    # an entry r+1 cells away along one axis is farther than the home cell's entry
    radius = max(1, int(np.floor(np.sqrt(3) * (0.5 + jitter) - 0.5 + jitter)) + 1)
    home = np.clip(np.floor(flat * (levels - 1) + 0.5).astype(np.int64), 0, levels - 1)
    offsets = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = home[:, None, :] + grid[None, :, :]
    ok = ((cand >= 0) & (cand < levels)).all(axis=-1)
    cand = np.clip(cand, 0, levels - 1)
    ids = (cand[..., 0] * levels + cand[..., 1]) * levels + cand[..., 2]
    d = ((flat[:, None, :] - palette[ids]) ** 2).sum(axis=-1)
    d[~ok] = np.inf
    # ties resolve to the lowest palette index, as in the exhaustive search
    dmin = d.min(axis=1, keepdims=True)
    ids = np.where(d == dmin, ids, np.iinfo(np.int64).max)
    return palette[ids.min(axis=1)]


def _brute_nearest(flat: np.ndarray, palette: np.ndarray) -> np.ndarray:
    best = np.zeros(len(flat), dtype=np.int64)
    best_d = np.full(len(flat), np.inf)
    for start in range(0, len(palette), 128):
        chunk = palette[start : start + 128]
        d = ((flat[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=-1)
        idx = d.argmin(axis=1)
        dmin = d[np.arange(len(flat)), idx]
        better = dmin < best_d
        best[better] = idx[better] + start
        best_d[better] = dmin[better]
    return best


@dataclass(frozen=True)
class SensorNoise(Stage):
    name: ClassVar[str] = "SensorNoise"

    sigma: float = 0.01

    def apply(self, img, consts, rng):
        return _clip01(img + rng.normal(0.0, self.sigma, size=img.shape))


@dataclass(frozen=True)
class Quantize8(Stage):
    name: ClassVar[str] = "Quantize8"

    def apply(self, img, consts, rng):
        return round_half_up(_clip01(img))


@dataclass(frozen=True)
class PerspectiveRecapture(Stage):
    """Photograph through a jittered homography, then undo it from the jittered corners.

    Both warps use nearest-neighbour sampling with edge clamping, so the
    round trip drops or duplicates pixels near sampling boundaries: a sub-pixel
    misalignment between what was printed and what the model sees.
    """

    name: ClassVar[str] = "PerspectiveRecapture"
    pixelwise: ClassVar[bool] = False
    monotone: ClassVar[bool] = False

    jitter: float = 1.0

    def apply(self, img, consts, rng):
        h, w, _ = img.shape
        corners = patch_corners((h, w))
        shot = corners + rng.uniform(-self.jitter, self.jitter, size=(4, 2))
        camera = solve_homography(corners, shot)
        photo = _nearest_warp(img, camera)
        extractor = solve_homography(shot, corners)
        return _nearest_warp(photo, extractor)


def _nearest_warp(img: np.ndarray, h: Homography) -> np.ndarray:
    rows, cols = img.shape[:2]
    sx, sy, _ = source_coordinates(h, img.shape, img.shape)
    ix = np.clip(np.floor(sx).astype(np.int64), 0, cols - 1)
    iy = np.clip(np.floor(sy).astype(np.int64), 0, rows - 1)
    return img[iy, ix]


STAGES: dict[str, type[Stage]] = {
    cls.name: cls for cls in (ColorShift, Gamma, PrinterPalette, SensorNoise, Quantize8, PerspectiveRecapture)
}


def make_stage(name: str, **params) -> Stage:
    try:
        cls = STAGES[name]
    except KeyError:
        raise ValueError(f"unknown distortion stage {name!r}; known: {sorted(STAGES)}") from None
    for key in ("gain_range", "offset_range", "gamma_range"):
        if key in params:
            params[key] = tuple(params[key])
    return cls(**params)


@dataclass(frozen=True)
class DistortionChain:
    stages: tuple[Stage, ...] = ()
    seed: int = 0
    _consts: tuple[dict, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        consts = tuple(s.resolve(np.random.default_rng([self.seed, i, 0xD157])) for i, s in enumerate(self.stages))
        object.__setattr__(self, "_consts", consts)

    def _rng(self, position: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, position, index, 0x1AA6E])

    def _run(self, img: np.ndarray, index: int, positions: Sequence[int]) -> np.ndarray:
        out = img.astype(np.float64)
        for i in positions:
            out = self.stages[i].apply(out, self._consts[i], self._rng(i, index))
        return _clip01(out)

    def apply(self, image: np.ndarray, image_index: int = 0) -> np.ndarray:
        """d(image): the full chain in order. Output dtype matches the input."""
        image = np.asarray(image)
        dtype = image.dtype if image.dtype.kind == "f" else np.float32
        if not self.stages:
            return image.astype(dtype, copy=True)
        return self._run(image, image_index, range(len(self.stages))).astype(dtype)

    def apply_batch(self, images: np.ndarray, indices: Sequence[int]) -> np.ndarray:
        return np.stack([self.apply(img, int(i)) for img, i in zip(images, indices)])

    def split(self) -> tuple[list[int], list[int]]:
        printer = [i for i, s in enumerate(self.stages) if s.where == "printer"]
        camera = [i for i, s in enumerate(self.stages) if s.where != "printer"]
        return printer, camera

    def print_patch(self, patch: np.ndarray, image_index: int = 0) -> np.ndarray:
        """p(patch): the printer-site stages only."""
        printer, _ = self.split()
        if not printer:
            return np.asarray(patch, dtype=np.float32).copy()
        return self._run(patch, image_index, printer).astype(np.float32)

    def capture(self, scene_img: np.ndarray, image_index: int = 0) -> np.ndarray:
        """c(·): the camera-site stages only."""
        _, camera = self.split()
        if not camera:
            return np.asarray(scene_img, dtype=np.float32).copy()
        return self._run(scene_img, image_index, camera).astype(np.float32)

    def describe(self) -> list[dict[str, Any]]:
        """Stage parameters plus the per-seed constants drawn for them."""
        out = []
        for stage, consts in zip(self.stages, self._consts):
            entry: dict[str, Any] = {"stage": stage.name, **stage.params(), "pixelwise": stage.pixelwise}
            for key, val in consts.items():
                if key == "palette":
                    entry["palette_sha1"] = hashlib.sha1(np.ascontiguousarray(val).tobytes()).hexdigest()
                else:
                    entry[key] = np.round(np.asarray(val, dtype=np.float64), 6).tolist()
            out.append(entry)
        return out

    @property
    def monotone(self) -> bool:
        return all(s.monotone for s in self.stages)


def billboard_homography(scene: Scene, patch_shape: Sequence[int] | None = None) -> Homography:
    shape = patch_shape if patch_shape is not None else scene.base_patch.shape
    return solve_homography(patch_corners(shape), scene.billboard_corners)


def apply_patch_pipeline(
    chain: DistortionChain,
    scene: Scene,
    patch: np.ndarray,
    image_index: int = 0,
    homography: Homography | None = None,
) -> np.ndarray:
    """c(p(patch), e): print the patch, paste it into the scene, photograph the scene."""
    patch = np.asarray(patch)
    if patch.shape != scene.base_patch.shape:
        raise ValueError(f"patch shape {patch.shape} does not match scene patch {scene.base_patch.shape}")
    h = homography or billboard_homography(scene)
    printed = chain.print_patch(patch, image_index)
    composed = nearest_composite(printed, scene.background, h)
    return chain.capture(composed, image_index)


# ---------------------------------------------------------------- presets
def default_global_chain(seed: int = 0) -> DistortionChain:
    return DistortionChain(
        (
            ColorShift(),
            Gamma(),
            PrinterPalette(colors=512, dither=True),
            SensorNoise(0.01),
            PerspectiveRecapture(1.0),
            Quantize8(),
        ),
        seed,
    )


def default_patch_chain(seed: int = 0) -> DistortionChain:
    return DistortionChain(
        (
            ColorShift(),
            PrinterPalette(colors=512, dither=True),
            Gamma(),
            SensorNoise(0.01),
            Quantize8(),
        ),
        seed,
    )


def chain_from_spec(spec: Sequence[dict[str, Any]] | str, seed: int = 0) -> DistortionChain:
    """Build a chain from config: a preset name or a list of ``{stage: name, ...params}``."""
    if isinstance(spec, str):
        presets = {"global": default_global_chain, "patch": default_patch_chain, "none": lambda s: DistortionChain((), s)}
        if spec not in presets:
            raise ValueError(f"unknown chain preset {spec!r}")
        return presets[spec](seed)
    stages = []
    for entry in spec:
        params = dict(entry)
        name = params.pop("stage", None) or params.pop("name", None)
        if name is None:
            raise ValueError(f"chain entry {entry!r} has no 'stage' key")
        stages.append(make_stage(name, **params))
    return DistortionChain(tuple(stages), seed)


def is_monotone_pixelwise(chain: DistortionChain) -> bool:
    return all(s.pixelwise and s.monotone for s in chain.stages)

