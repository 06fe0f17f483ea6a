"""Temporal warping between adjacent frames of one pseudo-view.

Flow fields map pixels of one frame to the other (t -> t+1 convention for a
field labelled forward). Estimation is pluggable: the analytic source uses
scene ground truth, the block-matching source works from images alone, and
both sit behind one provider interface with an optional cache. Warping a
previous edit into the current frame consumes the *backward* field (t -> t-1)
directly rather than inverting forward flow, which is ill-posed at occlusions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from . import scene as scene_mod
from .geom import WarpResult, bilinear_sample, in_bounds, snap_near_integers

DEFAULT_FB_TOL = 1.0  # pixels

# SSD cost assigned to displacements that reach outside the image.
_OOB_COST = 1e4


@dataclass
class FlowField:
    """Per-pixel 2D motion vectors (dx, dy) plus a validity mask."""

    vectors: np.ndarray  # (H, W, 2) float32
    valid: np.ndarray    # (H, W) bool

    def __post_init__(self):
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError(f"flow vectors must be (H, W, 2), got {self.vectors.shape}")
        if self.valid.shape != self.vectors.shape[:2]:
            raise ValueError("validity mask shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]


@dataclass(frozen=True)
class BlockMatchConfig:
    patch: int = 7
    search_radius: int = 8


def _to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    return np.asarray(image, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def estimate_flow_blockmatch(
    a: np.ndarray,
    b: np.ndarray,
    cfg: BlockMatchConfig = BlockMatchConfig(),
) -> FlowField:
    """Dense flow from image ``a`` to image ``b`` by patch SSD matching.

    Every pixel gets the integer displacement minimizing the sum of squared
    differences over a patch within the search radius, followed by parabolic
    sub-pixel refinement along each axis. The result is valid everywhere;
    occlusion filtering is a separate step.
    """
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"resolution mismatch {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if cfg.patch > min(h, w):
        raise ValueError(f"patch {cfg.patch} larger than image {ga.shape}")
    if cfg.patch % 2 != 1 or cfg.patch < 3:
        raise ValueError("patch size must be odd and >= 3")

    r = cfg.search_radius
    side = 2 * r + 1
    costs = np.empty((side, side, h, w), dtype=np.float32)
    for iy, dy in enumerate(range(-r, r + 1)):
        for ix, dx in enumerate(range(-r, r + 1)):
            shifted = np.full((h, w), np.nan)
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            shifted[ys0:ys1, xs0:xs1] = gb[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            diff2 = (ga - shifted) ** 2
            diff2[np.isnan(diff2)] = _OOB_COST
            cost = uniform_filter(diff2, size=cfg.patch, mode="nearest")
            # Vanishing preference for small motion: breaks SSD ties in
            # textureless regions toward zero displacement.
            costs[iy, ix] = cost + 1e-9 * (dx * dx + dy * dy)

    flat = costs.reshape(side * side, h, w)
    best = np.argmin(flat, axis=0)
    by, bx = np.divmod(best, side)
    ys, xs = np.mgrid[0:h, 0:w]

    def refine(center_idx, lo_idx, hi_idx, at_edge):
        c0 = flat[center_idx, ys, xs]
        cm = flat[lo_idx, ys, xs]
        cp = flat[hi_idx, ys, xs]
        denom = cm - 2 * c0 + cp
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = 0.5 * (cm - cp) / denom
        # Out-of-bounds cost walls would fake a huge one-sided slope, and an
        # exact-zero minimum is already a perfect match.
        clean = (np.maximum(cm, cp) < _OOB_COST / 2) & (c0 > 1e-12)
        usable = (~at_edge) & clean & (denom > 1e-12) & np.isfinite(delta)
        return np.where(usable, np.clip(delta, -0.5, 0.5), 0.0)

    edge_x = (bx == 0) | (bx == side - 1)
    edge_y = (by == 0) | (by == side - 1)
    bx_lo = np.clip(bx - 1, 0, side - 1)
    bx_hi = np.clip(bx + 1, 0, side - 1)
    by_lo = np.clip(by - 1, 0, side - 1)
    by_hi = np.clip(by + 1, 0, side - 1)
    sub_x = refine(by * side + bx, by * side + bx_lo, by * side + bx_hi, edge_x)
    sub_y = refine(by * side + bx, by_lo * side + bx, by_hi * side + bx, edge_y)

    vectors = np.stack([bx - r + sub_x, by - r + sub_y], axis=-1).astype(np.float32)
    return FlowField(vectors=vectors, valid=np.ones((h, w), dtype=bool))


def fb_consistency(
    fwd: FlowField,
    bwd: FlowField,
    tol: float = DEFAULT_FB_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-backward round-trip check on the forward field's pixels.

    A pixel p passes when |fwd(p) + bwd(p + fwd(p))| <= tol, with the
    backward field sampled bilinearly at the forward endpoint. Pixels whose
    endpoint leaves the image fail. Returns (mask, residual in pixels).
    """
    if fwd.shape != bwd.shape:
        raise ValueError(f"resolution mismatch {fwd.shape} vs {bwd.shape}")
    h, w = fwd.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + fwd.vectors[..., 0].astype(np.float64)
    ty = ys + fwd.vectors[..., 1].astype(np.float64)
    on_screen = in_bounds(tx, ty, w, h)

    back = bilinear_sample(bwd.vectors.astype(np.float64), tx, ty)
    back_valid = bilinear_sample(bwd.valid.astype(np.float64), tx, ty) >= 0.999
    residual = np.linalg.norm(fwd.vectors + back, axis=-1)
    mask = fwd.valid & on_screen & back_valid & (residual <= tol)
    return mask, residual.astype(np.float32)


def fb_consistency_mask(fwd: FlowField, bwd: FlowField, tol: float = DEFAULT_FB_TOL) -> np.ndarray:
    """Boolean forward-backward consistency mask (see fb_consistency)."""
    return fb_consistency(fwd, bwd, tol)[0]


def warp_temporal(
    prev_edited: np.ndarray,
    back_flow: FlowField,
    mask: np.ndarray | None = None,
) -> WarpResult:
    """Pull a previous frame's image into the current frame.

    ``back_flow`` maps current-frame pixels to their previous-frame
    locations (t -> t-1); each pixel with a usable correspondence samples
    ``prev_edited`` bilinearly there. ``mask`` (typically a forward-backward
    consistency mask on the current frame) further restricts validity.
    """
    h, w = back_flow.shape
    if prev_edited.shape[:2] != (h, w):
        raise ValueError(f"resolution mismatch {prev_edited.shape[:2]} vs {(h, w)}")
    if mask is not None and mask.shape != (h, w):
        raise ValueError("mask shape mismatch")

    ys, xs = np.mgrid[0:h, 0:w]
    sx = snap_near_integers(xs + back_flow.vectors[..., 0].astype(np.float64))
    sy = snap_near_integers(ys + back_flow.vectors[..., 1].astype(np.float64))
    ok = back_flow.valid & in_bounds(sx, sy, w, h)
    if mask is not None:
        ok = ok & mask

    sampled = bilinear_sample(prev_edited.astype(np.float64), sx, sy)
    image = np.where(ok[..., None], sampled, 0.0).astype(np.float32)
    return WarpResult(
        image=image,
        mask=ok,
        src_coords=np.stack([sx, sy], axis=-1).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Flow providers


class AnalyticFlowSource:
    """Exact flow from scene ground truth; adjacent frames in either direction."""

    def __init__(self, scene: scene_mod.Scene4D):
        self.scene = scene

    def get(self, view: int, t_from: int, t_to: int) -> FlowField:
        return scene_mod.analytic_flow_between(self.scene, view, t_from, t_to)


class BlockMatchFlowSource:
    """Block-matching flow computed on the scene's original frames."""

    def __init__(self, scene: scene_mod.Scene4D, cfg: BlockMatchConfig = BlockMatchConfig()):
        self.scene = scene
        self.cfg = cfg

    def get(self, view: int, t_from: int, t_to: int) -> FlowField:
        a = self.scene.frame(view, t_from).rgb
        b = self.scene.frame(view, t_to).rgb
        return estimate_flow_blockmatch(a, b, self.cfg)


class FlowCache:
    """Caching wrapper around a flow source, keyed by (view, t_from, t_to).

    A cached entry is never recomputed. Fills may race across threads; the
    first stored result wins and recomputation would be identical anyway.
    """

    def __init__(self, source):
        self.source = source
        self._entries: dict[tuple[int, int, int], FlowField] = {}
        self._lock = threading.Lock()

    def get(self, view: int, t_from: int, t_to: int) -> FlowField:
        key = (view, t_from, t_to)
        hit = self._entries.get(key)
        if hit is not None:
            return hit
        computed = self.source.get(view, t_from, t_to)
        with self._lock:
            return self._entries.setdefault(key, computed)

    def __len__(self) -> int:
        return len(self._entries)
