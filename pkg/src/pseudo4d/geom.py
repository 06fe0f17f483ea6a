"""Depth-based spatial warping between views at the same timestep.

Warping is done backward: every destination pixel with known depth is lifted
to 3D, projected into the source view, and bilinearly sampled there. Holes
are exactly the masked-false set; there is no splatting or hole filling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Camera, Frame

# Default depth-consistency threshold for occlusion detection, meters.
DEFAULT_DEPTH_TOL = 1e-2

# Coordinates this close to an integer are snapped before bilinear sampling,
# so warps that are identities in exact arithmetic stay exact under floats.
_SNAP_EPS = 1e-9


@dataclass
class WarpResult:
    """Output of a backward warp.

    ``image`` is defined only where ``mask`` is true; ``src_coords`` holds
    (x, y) source-pixel coordinates for valid pixels; ``residual`` is the
    per-pixel consistency residual used downstream as a confidence signal
    (depth disagreement in meters for spatial warps, flow round-trip error
    in pixels for temporal warps).
    """

    image: np.ndarray       # (H, W, 3) float32
    mask: np.ndarray        # (H, W) bool
    src_coords: np.ndarray  # (H, W, 2) float32, x then y
    residual: np.ndarray = field(default=None)  # (H, W) float32

    def __post_init__(self):
        if self.residual is None:
            self.residual = np.zeros(self.mask.shape, dtype=np.float32)


def snap_near_integers(coords: np.ndarray, eps: float = _SNAP_EPS) -> np.ndarray:
    """Round coordinates that are within ``eps`` of an integer."""
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < eps, rounded, coords)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at float coords with edge clamping.

    Near-integer coordinates are snapped first; sampling exactly on the
    integer grid therefore returns stored values bit-for-bit.
    """
    h, w = image.shape[:2]
    x = snap_near_integers(np.asarray(x, dtype=np.float64))
    y = snap_near_integers(np.asarray(y, dtype=np.float64))
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample_depth(depth: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample a depth map, reporting where every contributing tap is finite.

    Sky pixels carry +inf; any tap with nonzero weight hitting sky makes the
    sample unusable, which is returned as a False entry in the second array.
    """
    h, w = depth.shape
    x = snap_near_integers(np.asarray(x, dtype=np.float64))
    y = snap_near_integers(np.asarray(y, dtype=np.float64))
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    finite = np.isfinite(depth)
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    taps = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
    ok = np.ones(x.shape, dtype=bool)
    value = np.zeros(x.shape, dtype=np.float64)
    for wgt, (ty, tx) in zip(weights, taps):
        used = wgt > 0
        ok &= ~used | finite[ty, tx]
        value += wgt * np.where(finite[ty, tx], depth[ty, tx], 0.0)
    return value, ok


def in_bounds(x: np.ndarray, y: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where (x, y) lies inside the bilinear-sampleable image area."""
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def reproject_pixel(
    pixel: tuple[float, float],
    depth: float,
    cam_src: Camera,
    cam_dst: Camera,
) -> tuple[tuple[float, float], float] | None:
    """Map one source pixel with known depth into a destination camera.

    Returns ((x, y), depth_in_dst) or None when the point falls behind the
    destination camera or outside its image bounds.
    """
    if not np.isfinite(depth) or depth <= 0:
        raise ValueError(f"depth must be finite and positive, got {depth}")
    uv, z = reproject_pixels(
        np.asarray([pixel], dtype=np.float64),
        np.asarray([depth], dtype=np.float64),
        cam_src,
        cam_dst,
    )
    if z[0] <= 0 or not in_bounds(uv[0, 0], uv[0, 1], cam_dst.width, cam_dst.height):
        return None
    return (float(uv[0, 0]), float(uv[0, 1])), float(z[0])


def reproject_pixels(
    pixels: np.ndarray,
    depth: np.ndarray,
    cam_src: Camera,
    cam_dst: Camera,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized reprojection of (N, 2) pixels at (N,) depths.

    Returns destination pixel coords (N, 2) and destination z depth (N,);
    callers gate validity on z > 0 and bounds themselves.
    """
    world = cam_src.unproject(pixels, depth)
    return cam_dst.project(world)


def warp_spatial(
    src: Frame,
    cam_src: Camera,
    cam_dst: Camera,
    depth_dst: np.ndarray,
    depth_tol: float = DEFAULT_DEPTH_TOL,
) -> WarpResult:
    """Warp a source frame into a destination view with known depth.

    For each destination pixel with finite depth the 3D point is projected
    into the source view and sampled bilinearly. The mask is false where the
    reprojection leaves the source image, lands on sky, or disagrees with
    the source depth by more than ``depth_tol`` (occlusion).
    """
    h, w = cam_dst.height, cam_dst.width
    if src.rgb.shape[:2] != (cam_src.height, cam_src.width) or depth_dst.shape != (h, w):
        raise ValueError("resolution mismatch between frames and cameras")

    ys, xs = np.mgrid[0:h, 0:w]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    depth = np.asarray(depth_dst, dtype=np.float64).ravel()
    finite = np.isfinite(depth)

    image = np.zeros((h * w, 3), dtype=np.float32)
    mask = np.zeros(h * w, dtype=bool)
    coords = np.zeros((h * w, 2), dtype=np.float32)
    residual = np.zeros(h * w, dtype=np.float32)

    if np.any(finite):
        uv, z = reproject_pixels(pixels[finite], depth[finite], cam_dst, cam_src)
        # Snap before the bounds test too, so identity warps keep their border.
        x = snap_near_integers(uv[:, 0])
        y = snap_near_integers(uv[:, 1])
        ok = (z > 0) & in_bounds(x, y, cam_src.width, cam_src.height)
        src_depth, depth_ok = bilinear_sample_depth(src.depth.astype(np.float64), x, y)
        ok &= depth_ok
        res = np.abs(z - src_depth)
        ok &= res <= depth_tol
        sampled = bilinear_sample(src.rgb.astype(np.float64), x, y)

        f_idx = np.flatnonzero(finite)
        image[f_idx[ok]] = sampled[ok].astype(np.float32)
        mask[f_idx[ok]] = True
        coords[f_idx] = np.stack([x, y], axis=-1).astype(np.float32)
        residual[f_idx[ok]] = res[ok].astype(np.float32)

    return WarpResult(
        image=image.reshape(h, w, 3),
        mask=mask.reshape(h, w),
        src_coords=coords.reshape(h, w, 2),
        residual=residual.reshape(h, w),
    )
