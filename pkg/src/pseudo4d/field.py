"""A dense space-time grid field fit to edited datasets by gradient descent.

The field stores time-invariant density and time-varying color on a regular
grid over an axis-aligned box. Rendering is an emission-absorption ray march
with trilinear (space) times linear (time) interpolation; fitting minimizes
a weighted L2 loss between renders and dataset images with analytically
derived gradients, so conflicting supervision of a ray converges to the
weighted mean of its targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .scene import Camera, Scene4D

FIELD_VERSION = 1
_EPS_NEAR = 1e-6


@dataclass
class GridField4D:
    """Dense color-over-spacetime grid with static density."""

    colors: np.ndarray   # (X, Y, Z, Tg, 3) float32 in [0, 1]
    density: np.ndarray  # (X, Y, Z) float32, >= 0
    bounds: np.ndarray   # (2, 3) float64: row 0 min corner, row 1 max corner
    bg_color: np.ndarray  # (3,) float64
    t_count: int         # number of scene frames the time axis spans

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        self.bg_color = np.asarray(self.bg_color, dtype=np.float64)
        if self.colors.ndim != 5 or self.colors.shape[4] != 3:
            raise ValueError(f"colors must be (X, Y, Z, Tg, 3), got {self.colors.shape}")
        if self.density.shape != self.colors.shape[:3]:
            raise ValueError("density resolution does not match colors")
        if np.any(self.bounds[1] <= self.bounds[0]):
            raise ValueError("bounds must have positive extent")

    @property
    def resolution(self) -> tuple[int, int, int, int]:
        x, y, z, tg, _ = self.colors.shape
        return x, y, z, tg

    @staticmethod
    def create(
        resolution: tuple[int, int, int, int],
        bounds,
        bg_color,
        t_count: int,
        color_init: float = 0.5,
        density_init: float = 1.0,
    ) -> "GridField4D":
        x, y, z, tg = resolution
        return GridField4D(
            colors=np.full((x, y, z, tg, 3), color_init, dtype=np.float32),
            density=np.full((x, y, z), density_init, dtype=np.float32),
            bounds=np.asarray(bounds, dtype=np.float64),
            bg_color=np.asarray(bg_color, dtype=np.float64),
            t_count=t_count,
        )

    def copy(self) -> "GridField4D":
        return GridField4D(
            colors=self.colors.copy(),
            density=self.density.copy(),
            bounds=self.bounds.copy(),
            bg_color=self.bg_color.copy(),
            t_count=self.t_count,
        )

    def time_coord(self, t: float) -> float:
        """Map a scene frame index to a continuous grid time coordinate."""
        tg = self.colors.shape[3]
        if self.t_count <= 1 or tg <= 1:
            return 0.0
        return float(t) / (self.t_count - 1) * (tg - 1)


def auto_bounds(scene: Scene4D, margin: float = 0.3) -> np.ndarray:
    """Axis-aligned box covering every primitive over the whole clip."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    spec = scene.spec
    for prim in spec.primitives:
        radius = prim.bounding_radius()
        if prim.kind == "plane":
            extent = np.array([prim.size[0], prim.size[1], 1e-3])
        else:
            extent = np.full(3, radius)
        for t in np.linspace(0, spec.t_count - 1, 9):
            _, center = prim.pose_at(float(t))
            lo = np.minimum(lo, center - extent)
            hi = np.maximum(hi, center + extent)
    return np.stack([lo - margin, hi + margin])


# ---------------------------------------------------------------------------
# Interpolation stencils


def _axis_stencil(coord: np.ndarray, size: int):
    c = np.clip(coord, 0.0, size - 1.0)
    i0 = np.floor(c).astype(np.intp)
    i0 = np.minimum(i0, size - 2) if size > 1 else np.zeros_like(i0)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = c - i0
    return i0, i1, frac


def _space_stencil(field: GridField4D, points: np.ndarray):
    """Trilinear stencil: 8 (flat cell index, weight) pairs per point.

    Flat indices address the (X*Y*Z) raveled spatial grid; single-array
    fancy indexing through them is much faster than multi-axis indexing.
    """
    res = field.resolution
    lo, hi = field.bounds[0], field.bounds[1]
    rel = (points - lo) / (hi - lo)
    corners = []
    sx = _axis_stencil(rel[..., 0] * (res[0] - 1), res[0])
    sy = _axis_stencil(rel[..., 1] * (res[1] - 1), res[1])
    sz = _axis_stencil(rel[..., 2] * (res[2] - 1), res[2])
    for bx in (0, 1):
        wx = sx[2] if bx else (1.0 - sx[2])
        ix = sx[1] if bx else sx[0]
        for by in (0, 1):
            wy = sy[2] if by else (1.0 - sy[2])
            iy = sy[1] if by else sy[0]
            for bz in (0, 1):
                wz = sz[2] if bz else (1.0 - sz[2])
                iz = sz[1] if bz else sz[0]
                corners.append(((ix * res[1] + iy) * res[2] + iz, wx * wy * wz))
    return corners


def _time_slab(field: GridField4D, t_grid: float) -> np.ndarray:
    """Colors at one time coordinate, raveled to (X*Y*Z, 3) float64."""
    tg = field.colors.shape[3]
    t0, t1, ft = _axis_stencil(np.asarray(t_grid), tg)
    t0, t1, ft = int(t0), int(t1), float(ft)
    flat = field.colors.reshape(-1, tg, 3)
    if t1 == t0 or ft == 0.0:
        return flat[:, t0].astype(np.float64)
    return flat[:, t0].astype(np.float64) * (1.0 - ft) + flat[:, t1].astype(np.float64) * ft


def _sample_density(field: GridField4D, corners) -> np.ndarray:
    dens = field.density.reshape(-1)
    total = None
    for cell, w in corners:
        contrib = w * dens[cell]
        total = contrib if total is None else total + contrib
    return total


def _sample_color(slab: np.ndarray, corners) -> np.ndarray:
    total = None
    for cell, w in corners:
        contrib = w[..., None] * slab[cell]
        total = contrib if total is None else total + contrib
    return total


# ---------------------------------------------------------------------------
# Ray marching


def _ray_box(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (bounds[0] - origins) * inv
    t2 = (bounds[1] - origins) * inv
    parallel = np.abs(dirs) < 1e-15
    inside = (origins >= bounds[0]) & (origins <= bounds[1])
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(lo.max(axis=-1), _EPS_NEAR)
    t_far = hi.min(axis=-1)
    return t_near, t_far


@dataclass
class _MarchCache:
    """Everything the backward pass needs from a forward march."""

    hit: np.ndarray
    delta: np.ndarray
    corners: list
    t_grid: float
    sigma: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray  # T_i before sample i, (R, N)
    weights: np.ndarray
    sample_colors: np.ndarray
    t_end: np.ndarray          # transmittance after the last sample, (R,)
    output: np.ndarray         # (R, 3)


def march_rays(
    field: GridField4D,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_frame: float,
    n_samples: int = 48,
) -> _MarchCache:
    """Emission-absorption march through the field box; deterministic."""
    r = origins.shape[0]
    t_near, t_far = _ray_box(origins, dirs, field.bounds)
    hit = t_far > t_near
    output = np.tile(field.bg_color, (r, 1))

    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return _MarchCache(hit, np.zeros(0), [], 0.0, np.zeros((0, n_samples)),
                           np.zeros((0, n_samples)), np.zeros((0, n_samples)),
                           np.zeros((0, n_samples)), np.zeros((0, n_samples, 3)),
                           np.zeros(0), output)

    tn = t_near[idx]
    tf = t_far[idx]
    delta = (tf - tn) / n_samples
    steps = tn[:, None] + (np.arange(n_samples) + 0.5) * delta[:, None]
    points = origins[idx, None, :] + steps[..., None] * dirs[idx, None, :]

    corners = _space_stencil(field, points)
    t_grid = field.time_coord(t_frame)
    sigma = _sample_density(field, corners)
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(1.0 - alpha, axis=1)
    transmittance = np.concatenate([np.ones((idx.size, 1)), trans[:, :-1]], axis=1)
    weights = transmittance * alpha
    sample_colors = _sample_color(_time_slab(field, t_grid), corners)
    t_end = trans[:, -1] if n_samples > 0 else np.ones(idx.size)
    output[idx] = np.sum(weights[..., None] * sample_colors, axis=1) + t_end[:, None] * field.bg_color

    return _MarchCache(hit, delta, corners, t_grid, sigma, alpha,
                       transmittance, weights, sample_colors, t_end, output)


def march_gradients(
    field: GridField4D,
    cache: _MarchCache,
    grad_output: np.ndarray,
    out_color: np.ndarray | None = None,
    out_density: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(output * grad_output) w.r.t. colors and density.

    Uses the closed forms: dC/dc_i = w_i, and
    dC/dsigma_i = delta * (T_{i+1} c_i - sum_{k>i} w_k c_k - T_end bg).
    Scatters go through bincount on raveled indices, which is far faster
    than indexed in-place addition. ``out_color``/``out_density`` let callers
    accumulate across several marches without reallocating grid-sized
    buffers.
    """
    color_grad = np.zeros_like(field.colors, dtype=np.float64) if out_color is None else out_color
    density_grad = np.zeros_like(field.density, dtype=np.float64) if out_density is None else out_density
    idx = np.flatnonzero(cache.hit)
    if idx.size == 0:
        return color_grad, density_grad

    gout = grad_output[idx]  # (R, 3)
    res = field.resolution
    space_cells = res[0] * res[1] * res[2]

    # Color path: dL/dc_i = w_i * gout, spread over 16 interpolation corners.
    dl_dc = (cache.weights[..., None] * gout[:, None, :]).reshape(-1, 3)  # (R*N, 3)
    tg = field.colors.shape[3]
    t0, t1, ft = _axis_stencil(np.asarray(cache.t_grid), tg)
    color_flat = color_grad.reshape(space_cells, tg, 3)
    dens_flat = density_grad.reshape(space_cells)

    # Density path preparation.
    contributions = cache.weights[..., None] * cache.sample_colors  # (R, N, 3)
    suffix = np.cumsum(contributions[:, ::-1], axis=1)[:, ::-1]
    tail = np.concatenate([suffix[:, 1:], np.zeros_like(suffix[:, :1])], axis=1)
    tail = tail + (cache.t_end[:, None] * field.bg_color)[:, None, :]
    survive = cache.transmittance * (1.0 - cache.alpha)  # T_{i+1}
    d_sigma = (
        cache.delta[:, None]
        * np.sum((survive[..., None] * cache.sample_colors - tail) * gout[:, None, :], axis=2)
    ).reshape(-1)

    time_taps = [(int(t0), 1.0 - float(ft))]
    if int(t1) != int(t0) and float(ft) != 0.0:
        time_taps.append((int(t1), float(ft)))

    # One concatenated scatter across all 8 corners per target array.
    cells_all = np.concatenate([cell.reshape(-1) for cell, _ in cache.corners])
    w_all = np.concatenate([w.reshape(-1) for _, w in cache.corners])
    for tt, tw in time_taps:
        for ch in range(3):
            scaled = np.tile(tw * dl_dc[:, ch], len(cache.corners)) * w_all
            target = color_flat[:, tt, ch]
            np.add(target, np.bincount(cells_all, weights=scaled, minlength=space_cells),
                   out=target, casting="unsafe")
    np.add(dens_flat,
           np.bincount(cells_all, weights=w_all * np.tile(d_sigma, len(cache.corners)),
                       minlength=space_cells),
           out=dens_flat, casting="unsafe")

    return color_grad, density_grad


def render(field: GridField4D, camera: Camera, t: float, n_samples: int = 48) -> np.ndarray:
    """Render one (H, W, 3) float32 image; bit-identical given equal inputs."""
    if not (0 <= t < field.t_count):
        raise ValueError(f"t={t} outside [0, {field.t_count})")
    origin, dirs = camera.pixel_rays()
    flat = dirs.reshape(-1, 3)
    origins = np.broadcast_to(origin, flat.shape)
    cache = march_rays(field, origins, flat, t, n_samples)
    return cache.output.reshape(camera.height, camera.width, 3).astype(np.float32)


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FitReport:
    """Outcome of a fitting run."""

    iterations: int
    final_loss: float
    per_view_psnr: dict = dataclass_field(default_factory=dict)
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "per_view_psnr": {str(k): v for k, v in self.per_view_psnr.items()},
            "diverged": self.diverged,
        }


def loss_and_grads(
    field: GridField4D,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_frame: float,
    targets: np.ndarray,
    pixel_weights: np.ndarray,
    n_samples: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted L2 loss over a ray batch and its grid gradients."""
    cache = march_rays(field, origins, dirs, t_frame, n_samples)
    diff = cache.output - targets
    wsum = float(np.sum(pixel_weights))
    if wsum <= 0:
        return 0.0, np.zeros_like(field.colors, dtype=np.float64), np.zeros_like(
            field.density, dtype=np.float64
        )
    loss = float(np.sum(pixel_weights[:, None] * diff**2) / wsum)
    grad_out = 2.0 * pixel_weights[:, None] * diff / wsum
    color_grad, density_grad = march_gradients(field, cache, grad_out)
    return loss, color_grad, density_grad


def fit(
    field: GridField4D,
    dataset,
    cameras: list[Camera],
    steps: int = 2000,
    lr: float = 2000.0,
    density_lr: float | None = None,
    rays_per_step: int = 2048,
    n_samples: int = 32,
    seed: int = 0,
    optimize_density: bool = True,
    eval_stride: int = 0,
    times_per_step: int = 8,
    full_batch: bool = False,
) -> FitReport:
    """Fit the field to a dataset in place by projected gradient descent.

    ``dataset`` needs ``images[(v, t)]`` and ``weights[(v, t)]`` over a full
    grid of ``v_count`` x ``t_count`` slots. Each step samples a deterministic
    ray batch across all views, drawn from ``times_per_step`` distinct times
    (each time stays uniformly likely across steps; bounding the count keeps
    the per-step march count independent of T). With ``full_batch`` every
    pixel of every frame enters each step, which removes sampling noise and
    is practical for small datasets. Colors are clipped to [0, 1] and density
    to >= 0 after every step. A non-finite loss aborts the run and restores
    the last stable grids.
    """
    density_lr = lr if density_lr is None else density_lr
    v_count, t_count = dataset.v_count, dataset.t_count
    h = cameras[0].height
    w = cameras[0].width

    images = np.stack(
        [np.stack([dataset.images[(v, t)] for t in range(t_count)]) for v in range(v_count)]
    ).astype(np.float64)
    weights = np.stack(
        [np.stack([dataset.weights[(v, t)] for t in range(t_count)]) for v in range(v_count)]
    ).astype(np.float64)

    ray_origins = np.zeros((v_count, 3))
    ray_dirs = np.zeros((v_count, h * w, 3))
    for v, cam in enumerate(cameras):
        origin, dirs = cam.pixel_rays()
        ray_origins[v] = origin
        ray_dirs[v] = dirs.reshape(-1, 3)

    rng = np.random.default_rng(seed)
    last_loss = float("nan")
    stable_colors = field.colors.copy()
    stable_density = field.density.copy()
    # float32 accumulators keep the dense per-step update memory-bound cheap;
    # SGD noise dwarfs the precision loss (the gradient-check path uses the
    # float64 default inside march_gradients).
    color_grad = np.zeros_like(field.colors, dtype=np.float32)
    density_grad = np.zeros_like(field.density, dtype=np.float32)

    if full_batch:
        grid = np.mgrid[0:v_count, 0:t_count, 0 : h * w].reshape(3, -1)
        all_v, all_t, all_p = grid[0], grid[1], grid[2]

    for step in range(steps):
        if full_batch:
            v_idx, t_idx, p_idx = all_v, all_t, all_p
        else:
            v_idx = rng.integers(0, v_count, size=rays_per_step)
            if t_count > times_per_step:
                t_pool = rng.choice(t_count, size=times_per_step, replace=False)
                t_idx = t_pool[rng.integers(0, times_per_step, size=rays_per_step)]
            else:
                t_idx = rng.integers(0, t_count, size=rays_per_step)
            p_idx = rng.integers(0, h * w, size=rays_per_step)

        # Group by time so each march interpolates a single time slab.
        total_loss = 0.0
        total_weight = 0.0
        color_grad[...] = 0.0
        density_grad[...] = 0.0
        for t in np.unique(t_idx):
            sel = t_idx == t
            vv, pp = v_idx[sel], p_idx[sel]
            origins = ray_origins[vv]
            dirs = ray_dirs[vv, pp]
            targets = images[vv, t, pp // w, pp % w]
            pix_w = weights[vv, t, pp // w, pp % w]
            cache = march_rays(field, origins, dirs, float(t), n_samples)
            diff = cache.output - targets
            total_loss += float(np.sum(pix_w[:, None] * diff**2))
            total_weight += float(np.sum(pix_w))
            march_gradients(field, cache, 2.0 * pix_w[:, None] * diff,
                            out_color=color_grad, out_density=density_grad)

        if total_weight <= 0:
            continue
        last_loss = total_loss / total_weight
        if not np.isfinite(last_loss):
            field.colors[...] = stable_colors
            field.density[...] = stable_density
            return FitReport(iterations=step, final_loss=float("nan"), diverged=True)
        stable_colors[...] = field.colors
        stable_density[...] = field.density

        np.multiply(color_grad, np.float32(lr / total_weight), out=color_grad)
        np.subtract(field.colors, color_grad, out=field.colors)
        np.clip(field.colors, 0.0, 1.0, out=field.colors)
        if optimize_density:
            np.multiply(density_grad, np.float32(density_lr / total_weight), out=density_grad)
            np.subtract(field.density, density_grad, out=field.density)
            np.maximum(field.density, 0.0, out=field.density)

    report = FitReport(iterations=steps, final_loss=last_loss)
    if eval_stride:
        from .metrics import psnr

        for v in range(v_count):
            scores = []
            for t in range(0, t_count, eval_stride):
                scores.append(psnr(render(field, cameras[v], t, n_samples), dataset.images[(v, t)]))
            report.per_view_psnr[v] = float(np.mean(scores))
    return report


# ---------------------------------------------------------------------------
# Checkpoints


def save_field(field: GridField4D, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "grid-field-4d",
        "version": FIELD_VERSION,
        "resolution": list(field.resolution),
        "bounds": field.bounds.tolist(),
        "bg_color": field.bg_color.tolist(),
        "t_count": field.t_count,
    }
    (root / "field.json").write_text(json.dumps(header, sort_keys=True, indent=1))
    field.colors.astype("<f4").tofile(root / "colors.f32")
    field.density.astype("<f4").tofile(root / "density.f32")
    return root


def load_field(path: str | Path) -> GridField4D:
    root = Path(path)
    header_path = root / "field.json"
    if not header_path.exists():
        raise ManifestError(f"missing {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"{header_path}: {err.msg}", offset=err.pos) from err
    if header.get("format") != "grid-field-4d" or header.get("version") != FIELD_VERSION:
        raise ManifestError(f"{header_path}: unsupported field checkpoint")
    x, y, z, tg = header["resolution"]
    colors = np.fromfile(root / "colors.f32", dtype="<f4")
    density = np.fromfile(root / "density.f32", dtype="<f4")
    if colors.size != x * y * z * tg * 3 or density.size != x * y * z:
        raise ManifestError(f"{root}: checkpoint payload size mismatch")
    return GridField4D(
        colors=colors.reshape(x, y, z, tg, 3).copy(),
        density=density.reshape(x, y, z).copy(),
        bounds=np.array(header["bounds"]),
        bg_color=np.array(header["bg_color"]),
        t_count=int(header["t_count"]),
    )
