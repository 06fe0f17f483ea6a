"""PSNR/SSIM against independent reimplementations, consistency report."""

import math

import numpy as np
import pytest

from pseudo4d import metrics as M
from pseudo4d import propagate as P
from pseudo4d.editor import hue_rotation_matrix
from pseudo4d.flow import AnalyticFlowSource, FlowCache


def oracle_psnr(a, b):
    """Straightforward reimplementation used as the duplicate oracle."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float((diff * diff).sum() / diff.size)
    if mse == 0:
        return 99.0
    return min(99.0, -10.0 * math.log10(mse))


def oracle_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Naive per-window loop implementation of Gaussian-weighted SSIM."""
    def luma(img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            return img @ np.array([0.299, 0.587, 0.114])
        return img

    x, y = luma(a), luma(b)
    half = window // 2
    coords = np.arange(window) - (window - 1) / 2.0
    g1 = np.exp(-(coords**2) / (2 * sigma**2))
    kern = np.outer(g1, g1)
    kern /= kern.sum()
    c1, c2 = k1**2, k2**2
    values = []
    for cy in range(half, x.shape[0] - half):
        for cx in range(half, x.shape[1] - half):
            wx = x[cy - half : cy + half + 1, cx - half : cx + half + 1]
            wy = y[cy - half : cy + half + 1, cx - half : cx + half + 1]
            mx = float((kern * wx).sum())
            my = float((kern * wy).sum())
            vx = float((kern * wx * wx).sum()) - mx * mx
            vy = float((kern * wy * wy).sum()) - my * my
            cov = float((kern * wx * wy).sum()) - mx * my
            values.append(
                ((2 * mx * my + c1) * (2 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_capped(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    assert M.psnr(img, img) == 99.0


def test_psnr_uniform_difference():
    a = np.zeros((16, 16))
    b = np.full((16, 16), 0.1)
    assert M.psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_duplicate_oracle(rng):
    for _ in range(20):
        a = rng.uniform(0, 1, (13, 17, 3))
        b = rng.uniform(0, 1, (13, 17, 3))
        assert M.psnr(a, b) == pytest.approx(oracle_psnr(a, b), abs=1e-9)


def test_psnr_symmetry(rng):
    a = rng.uniform(0, 1, (12, 12, 3))
    b = rng.uniform(0, 1, (12, 12, 3))
    assert M.psnr(a, b) == M.psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        M.psnr(np.zeros((4, 4)), np.zeros((5, 5)))


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_identical_is_one(rng):
    img = rng.uniform(0, 1, (24, 24, 3))
    assert M.ssim(img, img) == 1.0


def test_ssim_matches_naive_oracle(rng):
    for _ in range(4):
        a = rng.uniform(0, 1, (20, 22, 3))
        b = np.clip(a + rng.normal(0, 0.15, a.shape), 0, 1)
        assert M.ssim(a, b) == pytest.approx(oracle_ssim(a, b), abs=1e-6)


def test_ssim_inverted_checkerboard_low():
    ys, xs = np.mgrid[0:32, 0:32]
    board = (((ys // 4) + (xs // 4)) % 2).astype(np.float64)
    inverted = 1.0 - board
    value = M.ssim(board, inverted)
    assert value == pytest.approx(oracle_ssim(board, inverted), abs=1e-6)
    assert value < 0.2


def test_ssim_constant_offset_closed_form():
    """Zero variance kills structure/contrast terms: luminance term only."""
    mu1, mu2 = 0.25, 0.75
    a = np.full((16, 16), mu1)
    b = np.full((16, 16), mu2)
    c1 = 0.01**2
    expected = (2 * mu1 * mu2 + c1) / (mu1**2 + mu2**2 + c1)
    assert M.ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetry(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# Consistency report


def originals_dataset(scene):
    return P.dataset_from_images(
        {(v, t): scene.frame(v, t).rgb for v in range(scene.v_count) for t in range(scene.t_count)},
        scene.v_count,
        scene.t_count,
    )


def test_static_originals_zero_temporal(tiny_static_scene):
    scene = tiny_static_scene
    flow = FlowCache(AnalyticFlowSource(scene))
    report = M.consistency_report(originals_dataset(scene), scene, flow)
    assert report.temporal_var == 0.0
    assert report.flagged_fraction == 0.0


def test_hue_shift_monotone(small_scene):
    """Shifting one frame's hue raises temporal_var monotonically."""
    scene = small_scene
    flow = FlowCache(AnalyticFlowSource(scene))
    scores = []
    for delta in (0.1, 0.2, 0.4):
        ds = originals_dataset(scene)
        rot = hue_rotation_matrix(delta)
        img = ds.images[(0, 4)]
        ds.images[(0, 4)] = np.clip(img.reshape(-1, 3) @ rot.T, 0, 1).reshape(img.shape).astype(np.float32)
        scores.append(M.consistency_report(ds, scene, flow).temporal_var)
    assert scores[0] < scores[1] < scores[2]


def test_report_fields_finite(small_scene):
    scene = small_scene
    flow = FlowCache(AnalyticFlowSource(scene))
    ds = originals_dataset(scene)
    report = M.consistency_report(ds, scene, flow)
    assert np.isfinite(report.temporal_var) and report.temporal_var >= 0
    assert np.isfinite(report.spatial_err) and report.spatial_err >= 0
    assert 0.0 <= report.flagged_fraction <= 1.0
