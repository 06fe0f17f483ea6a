"""Flow estimation, forward-backward filtering, temporal warping, caching."""

import threading

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from pseudo4d import flow as F
from pseudo4d import scene as S


def covisibility_oracle(scene, v, t_src, t_dst):
    """Depth-buffer visibility test, independent of the flow machinery.

    A pixel of frame t_src is co-visible at t_dst when its advanced hit
    point projects on-screen and its depth matches the t_dst depth buffer at
    the nearest pixel (slope-aware tolerance).
    """
    rc = scene.raycast_buffers(v, t_src)
    depth_dst = scene.frame(v, t_dst).depth.astype(np.float64)
    cam = scene.camera(v)
    h, w = depth_dst.shape
    finite = np.isfinite(rc.depth)
    ys, xs = np.nonzero(finite)
    pts = rc.points[ys, xs]
    moved = S.advance_points(scene.spec, pts, rc.prim_index[ys, xs], t_src, t_dst)
    uv, z = cam.project(moved)
    xi = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
    yi = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
    on_screen = (z > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] <= w - 0.5) \
        & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h - 0.5)
    buffer_depth = depth_dst[yi, xi]
    # Tolerance grows with the local depth slope so slanted surfaces pass.
    gy, gx = np.gradient(np.where(np.isfinite(depth_dst), depth_dst, 0.0))
    slope = np.abs(gx[yi, xi]) + np.abs(gy[yi, xi])
    tol = 0.02 + 1.5 * slope
    visible = on_screen & np.isfinite(buffer_depth) & (z <= buffer_depth + tol)
    out = np.zeros((h, w), dtype=bool)
    out[ys, xs] = visible
    return out


# ---------------------------------------------------------------------------
# Block matching


def test_blockmatch_identical_frames(small_scene):
    img = small_scene.frame(0, 0).rgb
    fl = F.estimate_flow_blockmatch(img, img)
    assert np.all(fl.vectors == 0)
    assert fl.valid.all()


def test_blockmatch_global_translation():
    """Textured everywhere (smoothed noise), shifted by exactly 3 px."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(3)
    img = gaussian_filter(rng.uniform(0, 1, (64, 64, 3)), sigma=(1.5, 1.5, 0)).astype(np.float32)
    shifted = np.roll(img, 3, axis=1)
    fl = F.estimate_flow_blockmatch(img, shifted)
    interior = np.zeros(img.shape[:2], dtype=bool)
    interior[12:-12, 12:-12] = True
    err = np.abs(fl.vectors[interior] - np.array([3.0, 0.0]))
    assert np.max(err) <= 0.5


def test_blockmatch_patch_too_large():
    img = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        F.estimate_flow_blockmatch(img, img, F.BlockMatchConfig(patch=17))


def test_blockmatch_vs_analytic_regression(small_scene):
    """Endpoint error against exact flow; bound frozen from a reference run."""
    scene = small_scene
    a = scene.frame(0, 3).rgb
    b = scene.frame(0, 4).rgb
    est = F.estimate_flow_blockmatch(a, b)
    exact = S.analytic_flow(scene, 0, 3)
    epe = np.linalg.norm(est.vectors - exact.vectors, axis=-1)[exact.valid]
    assert (epe < 1.0).mean() >= 0.95


# ---------------------------------------------------------------------------
# Forward-backward consistency


def test_fb_zero_flow_all_valid():
    zeros = F.FlowField(np.zeros((20, 20, 2), np.float32), np.ones((20, 20), bool))
    mask = F.fb_consistency_mask(zeros, zeros)
    assert mask.all()


def test_fb_offscreen_invalid():
    vec = np.zeros((20, 20, 2), np.float32)
    vec[5, 19, 0] = 3.0  # lands outside the image
    fwd = F.FlowField(vec, np.ones((20, 20), bool))
    bwd = F.FlowField(np.zeros_like(vec), np.ones((20, 20), bool))
    mask = F.fb_consistency_mask(fwd, bwd)
    assert not mask[5, 19]
    assert mask[0, 0]


def test_fb_mask_matches_covisibility_oracle(small_scene):
    """On analytic flow the mask equals co-visibility up to a 1 px band."""
    scene = small_scene
    for v, t in ((0, 2), (1, 5)):
        fwd = S.analytic_flow_between(scene, v, t, t + 1)
        bwd = S.analytic_flow_between(scene, v, t + 1, t)
        mask = F.fb_consistency_mask(fwd, bwd)
        oracle = covisibility_oracle(scene, v, t, t + 1)
        band = binary_dilation(oracle != binary_dilation(oracle, iterations=1), iterations=1)
        false_pos = mask & ~oracle & ~band
        assert false_pos.mean() < 0.005


# ---------------------------------------------------------------------------
# Temporal warping


def test_warp_temporal_identity(small_scene):
    img = small_scene.frame(0, 0).rgb
    zeros = F.FlowField(np.zeros(img.shape[:2] + (2,), np.float32),
                        np.ones(img.shape[:2], bool))
    out = F.warp_temporal(img, zeros)
    assert np.array_equal(out.image, img)
    assert out.mask.all()


def test_warp_temporal_disocclusion_masked(small_scene):
    """Newly revealed pixels at t have no valid correspondence into t-1."""
    scene = small_scene
    v, t = 1, 4
    back = S.analytic_flow_between(scene, v, t, t - 1)
    fwd = S.analytic_flow_between(scene, v, t - 1, t)
    mask, _ = F.fb_consistency(back, fwd)
    out = F.warp_temporal(scene.frame(v, t - 1).rgb, back, mask)
    oracle = covisibility_oracle(scene, v, t, t - 1)
    band = binary_dilation(oracle != binary_dilation(oracle, iterations=1), iterations=1)
    false_pos = out.mask & ~oracle & ~band
    assert false_pos.mean() < 0.005
    # And the warp is accurate where valid.
    residual = np.abs(out.image - scene.frame(v, t).rgb)[out.mask]
    assert residual.mean() < 0.02


def test_chained_static_warp_exact(tiny_static_scene):
    """Zero-flow chains reproduce the frame-0 edit bit for bit."""
    rng = np.random.default_rng(0)
    edit = rng.uniform(0, 1, tiny_static_scene.frame(0, 0).rgb.shape).astype(np.float32)
    h, w = edit.shape[:2]
    zeros = F.FlowField(np.zeros((h, w, 2), np.float32), np.ones((h, w), bool))
    current = edit
    for _ in range(5):
        current = F.warp_temporal(current, zeros).image
    assert np.array_equal(current, edit)


def test_warp_temporal_resolution_mismatch():
    img = np.zeros((8, 8, 3), np.float32)
    fl = F.FlowField(np.zeros((9, 9, 2), np.float32), np.ones((9, 9), bool))
    with pytest.raises(ValueError):
        F.warp_temporal(img, fl)


# ---------------------------------------------------------------------------
# Providers and cache


def test_analytic_and_blockmatch_share_contract(small_scene):
    analytic = F.AnalyticFlowSource(small_scene)
    block = F.BlockMatchFlowSource(small_scene)
    for provider in (analytic, block):
        fl = provider.get(0, 2, 3)
        assert fl.vectors.shape == (64, 64, 2)
        assert fl.valid.shape == (64, 64)


def test_cache_returns_identical_results(small_scene):
    cached = F.FlowCache(F.AnalyticFlowSource(small_scene))
    direct = F.AnalyticFlowSource(small_scene)
    a = cached.get(1, 2, 3)
    b = cached.get(1, 2, 3)
    assert a is b  # never recomputed
    c = direct.get(1, 2, 3)
    assert np.array_equal(a.vectors, c.vectors)
    assert np.array_equal(a.valid, c.valid)


def test_cache_warp_bit_identical(small_scene):
    scene = small_scene
    cached = F.FlowCache(F.AnalyticFlowSource(scene))
    plain = F.AnalyticFlowSource(scene)
    img = scene.frame(0, 2).rgb
    out_cached = F.warp_temporal(img, cached.get(0, 3, 2))
    out_plain = F.warp_temporal(img, plain.get(0, 3, 2))
    assert np.array_equal(out_cached.image, out_plain.image)
    assert np.array_equal(out_cached.mask, out_plain.mask)


def test_cache_concurrent_fills(small_scene):
    cache = F.FlowCache(F.AnalyticFlowSource(small_scene))
    results = []

    def worker():
        results.append(cache.get(0, 1, 2))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(cache) == 1
    first = results[0]
    assert all(r is first for r in results)
