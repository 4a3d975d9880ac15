"""Homographies and the differentiable perspective renderer.

Coordinates are continuous ``(x, y)`` with ``y`` pointing down; pixel ``(row,
col)`` has its centre at ``(col + 0.5, row + 0.5)``. A patch of size ``h×w``
spans ``[0, w] × [0, h]``. Both the bilinear renderer here and the
nearest-neighbour compositor used by the non-differentiable pipeline share
:func:`source_coordinates`, so they agree on which scene pixels the patch
covers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class HomographyError(ValueError):
    pass


def patch_corners(shape: Sequence[int]) -> np.ndarray:
    h, w = shape[0], shape[1]
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray  # (3, 3) float64, matrix[2, 2] == 1

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise HomographyError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)) or abs(m[2, 2]) < 1e-300:
            raise HomographyError("homography cannot be normalised to m[2, 2] = 1")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise HomographyError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        hom = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        return hom[..., :2] / hom[..., 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


def _collinear(pts: np.ndarray) -> bool:
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-300) ** 2
        if abs(area) <= 1e-12 * scale:
            return True
    return False


def _gauss_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting."""
    a = a.astype(np.float64).copy()
    b = b.astype(np.float64).copy()
    n = len(b)
    scale = np.abs(a).max()
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot, col]) <= 1e-12 * scale:
            raise HomographyError("singular system: corner points are degenerate")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        factors = a[col + 1 :, col] / a[col, col]
        a[col + 1 :, col:] -= factors[:, None] * a[col, col:]
        b[col + 1 :] -= factors * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def solve_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """The projective map taking the 4 ``src`` corners onto the 4 ``dst`` corners."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _collinear(src) or _collinear(dst):
        raise HomographyError("three of the four corners are collinear")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    h = _gauss_solve(a, b)
    return Homography(np.append(h, 1.0).reshape(3, 3))


def source_coordinates(h: Homography, out_shape: Sequence[int], src_shape: Sequence[int]):
    """For every destination pixel centre, its source location and coverage mask.

    Returns ``(sx, sy, inside)`` arrays of shape ``out_shape[:2]``; ``inside``
    marks pixels whose preimage lies in the half-open source rectangle.
    """
    oh, ow = out_shape[0], out_shape[1]
    sh, sw = src_shape[0], src_shape[1]
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64) + 0.5
    inv = np.linalg.inv(h.matrix)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    inside = (den > 0) & (sx >= 0) & (sx < sw) & (sy >= 0) & (sy < sh)
    return sx, sy, inside


def check_fits(h: Homography, src_shape: Sequence[int], out_shape: Sequence[int]) -> None:
    projected = h.apply(patch_corners(src_shape))
    oh, ow = out_shape[0], out_shape[1]
    eps = 1e-9
    if (projected[:, 0] < -eps).any() or (projected[:, 0] > ow + eps).any() or (
        projected[:, 1] < -eps
    ).any() or (projected[:, 1] > oh + eps).any():
        raise HomographyError(f"patch corners project outside the {oh}x{ow} scene: {projected.round(3).tolist()}")


@dataclass(frozen=True)
class WarpPlan:
    """Precomputed bilinear gather for one (homography, patch, scene) triple."""

    dest: np.ndarray  # flat indices of covered scene pixels
    taps: np.ndarray  # (4, n) flat patch pixel indices
    weights: np.ndarray  # (4, n) float64 bilinear weights
    patch_shape: tuple[int, int]
    scene_shape: tuple[int, int]


def plan_warp(h: Homography, patch_shape: Sequence[int], scene_shape: Sequence[int]) -> WarpPlan:
    check_fits(h, patch_shape, scene_shape)
    ph, pw = patch_shape[0], patch_shape[1]
    sx, sy, inside = source_coordinates(h, scene_shape, patch_shape)
    dest = np.flatnonzero(inside)
    px = sx.reshape(-1)[dest] - 0.5
    py = sy.reshape(-1)[dest] - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx, fy = px - x0, py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, pw - 1), np.clip(x0 + 1, 0, pw - 1)
    ya, yb = np.clip(y0, 0, ph - 1), np.clip(y0 + 1, 0, ph - 1)
    taps = np.stack([ya * pw + xa, ya * pw + xb, yb * pw + xa, yb * pw + xb])
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return WarpPlan(dest, taps, weights, (ph, pw), (scene_shape[0], scene_shape[1]))


def nearest_composite(patch: np.ndarray, background: np.ndarray, h: Homography) -> np.ndarray:
    """Non-differentiable paste of ``patch`` into ``background`` (nearest sampling)."""
    check_fits(h, patch.shape, background.shape)
    ph, pw = patch.shape[:2]
    sx, sy, inside = source_coordinates(h, background.shape, patch.shape)
    ix = np.clip(np.floor(sx[inside]).astype(np.int64), 0, pw - 1)
    iy = np.clip(np.floor(sy[inside]).astype(np.int64), 0, ph - 1)
    out = np.array(background, dtype=np.float32, copy=True)
    out[inside] = patch[iy, ix]
    return out


def warp_into(patch: Tensor, scene_bg, h: Homography | Sequence[Homography] | WarpPlan | Sequence[WarpPlan]) -> Tensor:
    """Bilinear render of ``patch`` into ``scene_bg``; differentiable in the patch only.

    Accepts a single ``(h, w, 3)`` patch with an ``(H, W, 3)`` background, or
    batches ``(N, h, w, 3)`` / ``(N, H, W, 3)`` with one homography (or plan)
    per item. The background is a constant.
    """
    patch = ag.as_tensor(patch)
    bg = scene_bg.data if isinstance(scene_bg, Tensor) else np.asarray(scene_bg)
    single = patch.ndim == 3
    if single:
        pdata, bgdata, hs = patch.data[None], bg[None], [h]
    else:
        pdata, bgdata = patch.data, bg
        hs = list(h) if isinstance(h, (list, tuple)) else [h] * len(pdata)
    if pdata.ndim != 4 or bgdata.ndim != 4 or len(pdata) != len(bgdata) or len(hs) != len(pdata):
        raise ag.ShapeError("warp_into", patch.shape, bg.shape)
    if pdata.shape[-1] != bgdata.shape[-1]:
        raise ag.ShapeError("warp_into", patch.shape, bg.shape)
    n, ph, pw, ch = pdata.shape
    _, sh, sw, _ = bgdata.shape
    plans = [p if isinstance(p, WarpPlan) else plan_warp(p, (ph, pw), (sh, sw)) for p in hs]
    for p in plans:
        if p.patch_shape != (ph, pw) or p.scene_shape != (sh, sw):
            raise ag.ShapeError("warp_into", p.patch_shape + p.scene_shape, (ph, pw, sh, sw))
    out = np.array(bgdata, dtype=patch.dtype, copy=True)
    flat_out = out.reshape(n, sh * sw, ch)
    flat_patch = pdata.reshape(n, ph * pw, ch)
    for i, p in enumerate(plans):
        acc = np.zeros((len(p.dest), ch), dtype=np.float64)
        for k in range(4):
            acc += p.weights[k][:, None] * flat_patch[i, p.taps[k]]
        flat_out[i, p.dest] = acc

    def bw(g):
        gflat = g.reshape(n, sh * sw, ch)
        gp = np.zeros((n, ph * pw, ch), dtype=np.float64)
        for i, p in enumerate(plans):
            gd = gflat[i, p.dest].astype(np.float64)
            for c in range(ch):
                for k in range(4):
                    gp[i, :, c] += np.bincount(p.taps[k], weights=p.weights[k] * gd[:, c], minlength=ph * pw)
        gp = gp.reshape(pdata.shape).astype(patch.dtype)
        return (gp[0] if single else gp,)

    result = out[0] if single else out
    return ag.record("warp_into", result, (patch,), bw)
