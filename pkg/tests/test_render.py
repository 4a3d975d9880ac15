import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_gradient
from stephys import autograd as ag
from stephys.autograd import Tensor
from stephys.dataset import benign_painting, generate_scene_set, is_convex_ccw
from stephys.render import (
    Homography,
    HomographyError,
    nearest_composite,
    patch_corners,
    plan_warp,
    solve_homography,
    source_coordinates,
    warp_into,
)

UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def random_quad(rng, size=64.0, margin=4.0):
    while True:
        centre = rng.uniform(size * 0.3, size * 0.7, size=2)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=4))
        radii = rng.uniform(size * 0.12, size * 0.28, size=4)
        quad = centre + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        if is_convex_ccw(quad) and quad.min() > margin and quad.max() < size - margin:
            return quad


def test_identity_homography():
    h = solve_homography(UNIT, UNIT)
    np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-12)


def test_translation_homography():
    h = solve_homography(UNIT, UNIT + [5.0, 3.0])
    expected = np.eye(3)
    expected[0, 2], expected[1, 2] = 5.0, 3.0
    np.testing.assert_allclose(h.matrix, expected, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_quads_map_exactly(seed):
    rng = np.random.default_rng(seed)
    src, dst = random_quad(rng), random_quad(rng)
    h = solve_homography(src, dst)
    assert abs(h.matrix[2, 2] - 1.0) < 1e-15
    assert abs(np.linalg.det(h.matrix)) > 1e-12
    np.testing.assert_allclose(h.apply(src), dst, atol=1e-9, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solve_roundtrip_composes_to_identity(seed):
    rng = np.random.default_rng(seed)
    src, dst = random_quad(rng), random_quad(rng)
    there = solve_homography(src, dst)
    back = solve_homography(dst, src)
    np.testing.assert_allclose((back @ there).matrix, np.eye(3), atol=1e-8)


def test_collinear_corners_rejected():
    bad = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 3.0]])
    with pytest.raises(HomographyError):
        solve_homography(UNIT, bad)
    with pytest.raises(HomographyError):
        solve_homography(bad, UNIT)


def test_singular_matrix_rejected():
    with pytest.raises(HomographyError, match="singular"):
        Homography(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
    with pytest.raises(HomographyError):
        Homography(np.diag([1.0, 1.0, 0.0]))


def test_identity_warp_full_cover(rng):
    patch = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    bg = np.zeros((16, 16, 3), dtype=np.float32)
    out = warp_into(Tensor(patch), bg, Homography.identity())
    np.testing.assert_allclose(out.data, patch, atol=1e-7)


def test_corner_outside_scene_rejected():
    h = solve_homography(patch_corners((8, 8)), np.array([[2.0, 2.0], [30.0, 2.0], [30.0, 20.0], [2.0, 20.0]]))
    with pytest.raises(HomographyError, match="outside"):
        warp_into(Tensor(np.zeros((8, 8, 3))), np.zeros((16, 16, 3)), h)


def _scene_h(rng):
    quad = random_quad(rng, size=20.0, margin=1.0)
    return solve_homography(patch_corners((6, 6)), quad)


def test_warp_gradient_matches_finite_differences(rng):
    h = _scene_h(rng)
    bg = rng.uniform(size=(20, 20, 3))
    up = Tensor(rng.normal(size=(20, 20, 3)), dtype=np.float64)
    patch = rng.uniform(size=(6, 6, 3))
    assert check_gradient(lambda t: ag.tsum(ag.mul(warp_into(t, bg, h), up)), patch) < 1e-3


def test_sum_gradient_equals_bilinear_weight_totals(rng):
    h = _scene_h(rng)
    plan = plan_warp(h, (6, 6), (20, 20))
    totals = np.bincount(plan.taps.reshape(-1), weights=plan.weights.reshape(-1), minlength=36).reshape(6, 6)
    t = Tensor(rng.uniform(size=(6, 6, 3)), requires_grad=True, dtype=np.float64)
    ag.backward(ag.tsum(warp_into(t, np.zeros((20, 20, 3)), h)))
    for c in range(3):
        np.testing.assert_allclose(t.grad[..., c], totals, atol=1e-12)


def test_background_is_constant(rng):
    h = _scene_h(rng)
    bg = Tensor(rng.uniform(size=(20, 20, 3)), requires_grad=True, dtype=np.float64)
    patch = Tensor(rng.uniform(size=(6, 6, 3)), requires_grad=True, dtype=np.float64)
    ag.backward(ag.tsum(warp_into(patch, bg, h)))
    assert bg.grad is None
    assert patch.grad is not None


def test_outside_pixels_copy_background(rng):
    h = _scene_h(rng)
    bg = rng.uniform(size=(20, 20, 3)).astype(np.float32)
    out = warp_into(Tensor(np.zeros((6, 6, 3), dtype=np.float32)), bg, h).data
    _, _, inside = source_coordinates(h, (20, 20), (6, 6))
    np.testing.assert_array_equal(out[~inside], bg[~inside])
    assert inside.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_warp_is_linear_in_patch(seed, a, b):
    rng = np.random.default_rng(seed)
    h = _scene_h(rng)
    p1, p2 = rng.uniform(size=(2, 6, 6, 3))
    bg = np.zeros((20, 20, 3))
    _, _, inside = source_coordinates(h, (20, 20), (6, 6))
    lhs = warp_into(Tensor(a * p1 + b * p2, dtype=np.float64), bg, h).data
    rhs = a * warp_into(Tensor(p1, dtype=np.float64), bg, h).data + b * warp_into(Tensor(p2, dtype=np.float64), bg, h).data
    np.testing.assert_allclose(lhs[inside], rhs[inside], atol=1e-6)


def test_batched_warp_matches_single(rng):
    hs = [_scene_h(rng) for _ in range(3)]
    patches = rng.uniform(size=(3, 6, 6, 3)).astype(np.float32)
    bgs = rng.uniform(size=(3, 20, 20, 3)).astype(np.float32)
    batch = warp_into(Tensor(patches), bgs, hs).data
    for i in range(3):
        np.testing.assert_array_equal(batch[i], warp_into(Tensor(patches[i]), bgs[i], hs[i]).data)


def test_bilinear_and_nearest_composites_agree_on_smooth_patches():
    scenes = generate_scene_set(11, 10, 4)
    diffs = []
    for i, scene in enumerate(scenes):
        patch = benign_painting(np.random.default_rng(i))
        h = solve_homography(patch_corners(patch.shape), scene.billboard_corners)
        smooth = warp_into(Tensor(patch), scene.background, h).data
        nearest = nearest_composite(patch, scene.background, h)
        _, _, inside = source_coordinates(h, scene.background.shape, patch.shape)
        np.testing.assert_array_equal(smooth[~inside], nearest[~inside])
        diffs.append(np.abs(smooth[inside] - nearest[inside]).mean())
    assert np.mean(diffs) < 0.05


def test_patch_pixels_outside_footprint_get_zero_gradient(rng):
    # a 12x12 patch squeezed into a small quad: many texels are never sampled
    h = solve_homography(patch_corners((12, 12)), np.array([[3.0, 3.0], [8.0, 3.2], [8.5, 8.0], [2.8, 7.5]]))
    plan = plan_warp(h, (12, 12), (12, 12))
    used = np.zeros(144, dtype=bool)
    used[plan.taps[:, (plan.weights > 0).any(axis=0)].reshape(-1)] = True
    t = Tensor(rng.uniform(size=(12, 12, 3)), requires_grad=True)
    ag.backward(ag.tsum(ag.mul(warp_into(t, np.zeros((12, 12, 3)), h), 3.0)))
    grad = t.grad.reshape(144, 3)
    assert (~used).any()
    assert np.all(grad[~used] == 0.0)
