"""Image quality and consistency measurements.

PSNR and SSIM follow their standard definitions on [0, 1] images. The
consistency report quantifies the two properties the editing pipeline is
meant to deliver: low residual between temporally aligned successive edits
within each pseudo-view, and low residual between edits of different views
after depth-based warping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .flow import fb_consistency, warp_temporal
from .scene import Frame, Scene4D

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical inputs return the 99 dB cap rather than infinity so the value
    stays representable in JSON logs.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _luminance(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    return np.asarray(image, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Structural similarity on the luminance channel.

    Windowed with an 11x11 Gaussian (sigma 1.5) over valid window positions
    only, data range 1.0. Returns the mean SSIM over the image.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    x = _luminance(a)
    y = _luminance(b)
    if min(x.shape) < window:
        raise ValueError(f"images must be at least {window}x{window}, got {x.shape}")

    kernel = _gaussian_kernel(window, sigma)

    def weighted_windows(img: np.ndarray) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(img, (window, window))
        return np.tensordot(view, kernel, axes=([2, 3], [0, 1]))

    mu_x = weighted_windows(x)
    mu_y = weighted_windows(y)
    var_x = weighted_windows(x * x) - mu_x**2
    var_y = weighted_windows(y * y) - mu_y**2
    cov = weighted_windows(x * y) - mu_x * mu_y

    c1 = k1**2
    c2 = k2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class ConsistencyReport:
    """Scores quantifying how coherent an edited dataset is.

    ``temporal_var``: mean squared residual between each frame's edit warped
    to its successor (via flow, on consistency-checked pixels) and the
    successor's own edit. ``spatial_err``: mean absolute residual between
    key-view edits warped into other views and those views' own edits, on
    co-visible pixels. ``flagged_fraction``: share of pixels that received no
    propagation source and fell back to their originals.
    """

    temporal_var: float
    spatial_err: float
    flagged_fraction: float

    def to_dict(self) -> dict:
        return {
            "temporal_var": self.temporal_var,
            "spatial_err": self.spatial_err,
            "flagged_fraction": self.flagged_fraction,
        }


def temporal_consistency(images_by_time: list[np.ndarray], scene: Scene4D, view: int, flow_provider) -> float:
    """Mean squared aligned successive residual for one pseudo-view."""
    total = 0.0
    count = 0
    for t in range(len(images_by_time) - 1):
        back = flow_provider.get(view, t + 1, t)
        fwd = flow_provider.get(view, t, t + 1)
        mask, _ = fb_consistency(back, fwd)
        warped = warp_temporal(images_by_time[t], back, mask)
        if not np.any(warped.mask):
            continue
        diff = warped.image.astype(np.float64) - images_by_time[t + 1].astype(np.float64)
        total += float(np.mean(diff[warped.mask] ** 2))
        count += 1
    return total / count if count else 0.0


def spatial_consistency(
    dataset_images: dict[tuple[int, int], np.ndarray],
    scene: Scene4D,
    key_views: tuple[int, ...],
    depth_tol: float = geom.DEFAULT_DEPTH_TOL,
) -> float:
    """Mean absolute cross-view residual of edits after depth warping."""
    views = list(range(scene.v_count))
    sources = list(key_views) if key_views else views
    total = 0.0
    count = 0
    for src in sources:
        cam_src = scene.camera(src)
        for dst in views:
            if dst == src or (key_views and dst in key_views):
                continue
            cam_dst = scene.camera(dst)
            for t in range(scene.t_count):
                src_frame = Frame(
                    rgb=dataset_images[(src, t)],
                    depth=scene.frame(src, t).depth,
                    view_id=src,
                    time_index=t,
                )
                warped = geom.warp_spatial(
                    src_frame, cam_src, cam_dst, scene.frame(dst, t).depth, depth_tol
                )
                if not np.any(warped.mask):
                    continue
                diff = np.abs(
                    warped.image.astype(np.float64)
                    - dataset_images[(dst, t)].astype(np.float64)
                )
                total += float(np.mean(diff[warped.mask]))
                count += 1
    return total / count if count else 0.0


def consistency_report(dataset, scene: Scene4D, flow_provider) -> ConsistencyReport:
    """Score an edited dataset (see ConsistencyReport for definitions).

    ``dataset`` needs ``images[(v, t)]``, ``key_views`` (may be empty, in
    which case all view pairs are compared) and optionally ``flags[(v, t)]``
    boolean maps of fallback pixels.
    """
    temporal_scores = []
    for v in range(scene.v_count):
        seq = [dataset.images[(v, t)] for t in range(scene.t_count)]
        temporal_scores.append(temporal_consistency(seq, scene, v, flow_provider))
    spatial = spatial_consistency(dataset.images, scene, tuple(dataset.key_views))

    flags = getattr(dataset, "flags", None)
    if flags:
        flagged = float(np.mean([np.mean(f) for f in flags.values()]))
    else:
        flagged = 0.0
    return ConsistencyReport(
        temporal_var=float(np.mean(temporal_scores)),
        spatial_err=spatial,
        flagged_fraction=flagged,
    )
