"""Synthetic 4D scenes with exact depth and exact optical flow.

A scene is a rig of fixed pinhole cameras (one per pseudo-view) observing
lambertian primitives (textured plane, sphere, axis-aligned box) that move
along rigid trajectories. Every frame is raycast analytically, so depth is
exact at each pixel and optical flow can be derived from the known motion
instead of being estimated.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import arrayio
from .errors import ManifestError, SceneValidationError

_EPS_RAY = 1e-9
OCCLUSION_TOL = 1e-4  # meters; slack for raycast quantization in visibility tests

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose.

    ``rotation`` and ``translation`` map world points into the camera frame
    (x right, y down, z forward); ``project`` returns pixel coordinates with
    pixel centers on the integer grid, and depth means the camera-frame z
    coordinate.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise SceneValidationError("camera pose has wrong shape")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise SceneValidationError("camera pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise SceneValidationError("camera rotation is not orthonormal within 1e-9")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneValidationError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in world coordinates."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (N, 3) to pixel coords (N, 2) and z depth (N,).

        Points behind the camera get non-finite pixel coordinates; callers
        must gate on ``z > 0``.
        """
        pts = np.asarray(points, dtype=np.float64)
        cam = pts @ self.rotation.T + self.translation
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / z + self.cx
            v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Lift pixel coords (N, 2) at z depth (N,) back to world points (N, 3)."""
        px = np.asarray(pixels, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        x = (px[..., 0] - self.cx) / self.fx * z
        y = (px[..., 1] - self.cy) / self.fy * z
        cam = np.stack([x, y, z], axis=-1)
        return (cam - self.translation) @ self.rotation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space rays through all pixel centers.

        Returns the common origin (3,) and directions (H, W, 3) scaled so the
        camera-frame z component is 1: the ray parameter then equals z depth.
        """
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        dirs_cam = np.stack(
            [(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs, dtype=np.float64)],
            axis=-1,
        )
        return self.center, dirs_cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(data: dict) -> "Camera":
        return Camera(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            rotation=np.array(data["rotation"], dtype=np.float64),
            translation=np.array(data["translation"], dtype=np.float64),
            width=int(data["width"]),
            height=int(data["height"]),
        )


def look_at_camera(
    position: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    fov_degrees: float,
) -> Camera:
    """Build a camera at ``position`` looking at ``target`` (world up = +z)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nrm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=0)
    # Re-orthonormalize so the 1e-9 invariant holds regardless of input noise.
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    translation = -rotation @ position
    f = (min(width, height) / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
    return Camera(
        fx=f,
        fy=f,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=rotation,
        translation=translation,
        width=width,
        height=height,
    )


# ---------------------------------------------------------------------------
# Primitives and trajectories


def _unit(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(arr)
    return arr / n if n > 0 else arr


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    a = _unit(axis)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class TrajectorySpec:
    """Rigid motion over time: linear drift, sinusoidal swing, constant spin.

    Time is measured in frames. The pose at time t is a rotation of
    ``spin_rate * t`` radians about ``spin_axis`` through the primitive
    center, plus a center offset
    ``velocity * t + osc_amplitude * sin(2*pi*(t/osc_period + phase)) * osc_axis``.
    """

    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    osc_amplitude: float = 0.0
    osc_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    osc_period: float = 50.0
    phase: float = 0.0
    spin_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    spin_rate: float = 0.0

    def offset(self, t: float) -> np.ndarray:
        off = np.asarray(self.velocity, dtype=np.float64) * t
        if self.osc_amplitude != 0.0:
            swing = self.osc_amplitude * math.sin(2.0 * math.pi * (t / self.osc_period + self.phase))
            off = off + swing * _unit(self.osc_axis)
        return off

    def spin(self, t: float) -> np.ndarray:
        if self.spin_rate == 0.0:
            return np.eye(3)
        return rotation_about_axis(np.asarray(self.spin_axis), self.spin_rate * t)

    @property
    def is_static(self) -> bool:
        return (
            self.osc_amplitude == 0.0
            and self.spin_rate == 0.0
            and all(c == 0.0 for c in self.velocity)
        )

    def to_dict(self) -> dict:
        return {
            "velocity": list(self.velocity),
            "osc_amplitude": self.osc_amplitude,
            "osc_axis": list(self.osc_axis),
            "osc_period": self.osc_period,
            "phase": self.phase,
            "spin_axis": list(self.spin_axis),
            "spin_rate": self.spin_rate,
        }

    @staticmethod
    def from_dict(data: dict) -> "TrajectorySpec":
        return TrajectorySpec(
            velocity=tuple(data["velocity"]),
            osc_amplitude=float(data["osc_amplitude"]),
            osc_axis=tuple(data["osc_axis"]),
            osc_period=float(data["osc_period"]),
            phase=float(data["phase"]),
            spin_axis=tuple(data["spin_axis"]),
            spin_rate=float(data["spin_rate"]),
        )


@dataclass(frozen=True)
class AlbedoSpec:
    """Surface texture: 'checker' (3D checkerboard) or 'sine' (smooth grid)."""

    kind: str = "checker"
    cell: float = 0.5
    color_a: tuple[float, float, float] = (0.9, 0.9, 0.9)
    color_b: tuple[float, float, float] = (0.1, 0.1, 0.1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cell": self.cell,
            "color_a": list(self.color_a),
            "color_b": list(self.color_b),
        }

    @staticmethod
    def from_dict(data: dict) -> "AlbedoSpec":
        return AlbedoSpec(
            kind=str(data["kind"]),
            cell=float(data["cell"]),
            color_a=tuple(data["color_a"]),
            color_b=tuple(data["color_b"]),
        )


PRIMITIVE_KINDS = ("plane", "sphere", "box")


@dataclass(frozen=True)
class PrimitiveSpec:
    """One rigid lambertian primitive.

    ``size`` is interpreted per kind: plane (half_x, half_y) rectangle in the
    body z=0 plane; sphere (radius,); box (half_x, half_y, half_z).
    """

    kind: str
    size: tuple[float, ...]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    albedo: AlbedoSpec = field(default_factory=AlbedoSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {"plane": 2, "sphere": 1, "box": 3}[self.kind]
        if len(self.size) != expected:
            raise ValueError(f"{self.kind} needs {expected} size components, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"{self.kind} has degenerate size {self.size}")

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.size[0]
        return float(np.linalg.norm(self.size))

    def pose_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """World pose (rotation, center) of the body frame at time t."""
        return self.trajectory.spin(t), np.asarray(self.center, dtype=np.float64) + self.trajectory.offset(t)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "size": list(self.size),
            "center": list(self.center),
            "albedo": self.albedo.to_dict(),
            "trajectory": self.trajectory.to_dict(),
        }

    @staticmethod
    def from_dict(data: dict) -> "PrimitiveSpec":
        return PrimitiveSpec(
            kind=str(data["kind"]),
            size=tuple(data["size"]),
            center=tuple(data["center"]),
            albedo=AlbedoSpec.from_dict(data["albedo"]),
            trajectory=TrajectorySpec.from_dict(data["trajectory"]),
        )


# ---------------------------------------------------------------------------
# Scene specification


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to deterministically generate a Scene4D."""

    v_count: int = 5
    t_count: int = 51
    height: int = 64
    width: int = 64
    primitives: tuple[PrimitiveSpec, ...] = ()
    seed: int = 0
    fov_degrees: float = 44.0
    arc_degrees: float = 60.0
    elevation_degrees: float = 28.0
    radius_scale: float = 4.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.45)
    bg_color: tuple[float, float, float] = (0.05, 0.07, 0.10)
    light_dir: tuple[float, float, float] = (-0.35, 0.25, 0.9)
    ambient: float = 0.35
    max_flow_px: float = 6.0

    def validate(self) -> None:
        if self.v_count < 1:
            raise ValueError("v_count must be >= 1")
        if self.t_count < 2:
            raise ValueError("t_count must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ValueError("resolution must be at least 16x16")
        if not self.primitives:
            raise ValueError("at least one primitive is required")

    def to_dict(self) -> dict:
        return {
            "v_count": self.v_count,
            "t_count": self.t_count,
            "height": self.height,
            "width": self.width,
            "primitives": [p.to_dict() for p in self.primitives],
            "seed": self.seed,
            "fov_degrees": self.fov_degrees,
            "arc_degrees": self.arc_degrees,
            "elevation_degrees": self.elevation_degrees,
            "radius_scale": self.radius_scale,
            "target": list(self.target),
            "bg_color": list(self.bg_color),
            "light_dir": list(self.light_dir),
            "ambient": self.ambient,
            "max_flow_px": self.max_flow_px,
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneSpec":
        known = {
            "v_count", "t_count", "height", "width", "primitives", "seed",
            "fov_degrees", "arc_degrees", "elevation_degrees", "radius_scale",
            "target", "bg_color", "light_dir", "ambient", "max_flow_px",
        }
        unknown = set(data) - known
        if unknown:
            raise ManifestError(f"unknown scene spec keys: {sorted(unknown)}")
        kwargs = dict(data)
        kwargs["primitives"] = tuple(PrimitiveSpec.from_dict(p) for p in data["primitives"])
        for key in ("target", "bg_color", "light_dir"):
            kwargs[key] = tuple(kwargs[key])
        return SceneSpec(**kwargs)


def default_scene_spec(v_count: int = 5, t_count: int = 51, size: int = 64, seed: int = 0) -> SceneSpec:
    """The standard test rig: textured ground, swinging sphere, drifting box.

    Textures are smooth high-contrast sinusoidal grids: they give block
    matching unambiguous minima and keep resampling error low, which hard
    checker edges at this resolution do not.
    """
    # Plane extent is kept small enough that no camera sees it at grazing
    # angles, where foreshortening would alias the texture.
    ground = PrimitiveSpec(
        kind="plane",
        size=(2.6, 2.6),
        center=(0.0, 0.0, 0.0),
        albedo=AlbedoSpec("sine", 1.1, (0.85, 0.82, 0.72), (0.14, 0.18, 0.24)),
    )
    ball = PrimitiveSpec(
        kind="sphere",
        size=(0.5,),
        center=(0.0, 0.0, 0.6),
        albedo=AlbedoSpec("sine", 0.5, (0.85, 0.25, 0.20), (0.95, 0.85, 0.30)),
        trajectory=TrajectorySpec(
            osc_amplitude=0.5,
            osc_axis=(1.0, 0.0, 0.0),
            # Short clips keep the 51-frame cadence so per-frame motion stays
            # within the flow budget.
            osc_period=float(max(t_count, 51)),
            spin_axis=(0.0, 0.0, 1.0),
            spin_rate=0.02,
        ),
    )
    crate = PrimitiveSpec(
        kind="box",
        size=(0.35, 0.35, 0.35),
        center=(-0.9, 0.45, 0.35),
        albedo=AlbedoSpec("sine", 0.4, (0.20, 0.50, 0.85), (0.90, 0.90, 0.90)),
        trajectory=TrajectorySpec(velocity=(0.008, 0.0, 0.0)),
    )
    return SceneSpec(
        v_count=v_count,
        t_count=t_count,
        height=size,
        width=size,
        primitives=(ground, ball, crate),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Raycasting


def _intersect_plane(o: np.ndarray, d: np.ndarray, half: tuple[float, ...]) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[..., 2] / d[..., 2]
    s = np.where(np.abs(d[..., 2]) < 1e-15, np.inf, s)
    with np.errstate(invalid="ignore"):
        hit = o + s[..., None] * d
        ok = (s > _EPS_RAY) & (np.abs(hit[..., 0]) <= half[0]) & (np.abs(hit[..., 1]) <= half[1])
    return np.where(ok, s, np.inf)


def _intersect_sphere(o: np.ndarray, d: np.ndarray, radius: float) -> np.ndarray:
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    s0 = (-b - sq) / (2 * a)
    s1 = (-b + sq) / (2 * a)
    s = np.where(s0 > _EPS_RAY, s0, np.where(s1 > _EPS_RAY, s1, np.inf))
    return np.where(ok, s, np.inf)


def _intersect_box(o: np.ndarray, d: np.ndarray, half: tuple[float, ...]) -> np.ndarray:
    h = np.asarray(half, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t1 = (-h - o) * inv
    t2 = (h - o) * inv
    # Parallel rays: valid only if the origin lies inside that slab.
    parallel = np.abs(d) < 1e-15
    inside = np.abs(o) <= h
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    ok = (t_far >= t_near) & (t_near > _EPS_RAY)
    return np.where(ok, t_near, np.inf)


def _box_normal(hit_body: np.ndarray, half: tuple[float, ...]) -> np.ndarray:
    rel = np.abs(hit_body) / np.asarray(half, dtype=np.float64)
    axis = np.argmax(rel, axis=-1)
    normal = np.zeros_like(hit_body)
    idx = np.arange(hit_body.shape[0])
    normal[idx, axis] = np.sign(hit_body[idx, axis])
    return normal


def _albedo(prim: PrimitiveSpec, body: np.ndarray, phase: np.ndarray) -> np.ndarray:
    spec = prim.albedo
    p = (body + phase) / spec.cell
    ca = np.asarray(spec.color_a)
    cb = np.asarray(spec.color_b)
    if spec.kind == "checker":
        parity = (np.floor(p[..., 0]) + np.floor(p[..., 1]) + np.floor(p[..., 2])) % 2
        w = parity[..., None]
    elif spec.kind == "sine":
        w = (0.5 + 0.5 * np.sin(2 * np.pi * p[..., 0]) * np.sin(2 * np.pi * p[..., 1]) * np.cos(2 * np.pi * p[..., 2]))[..., None]
    else:
        raise ValueError(f"unknown albedo kind {spec.kind!r}")
    return ca * (1 - w) + cb * w


@dataclass
class RaycastResult:
    """Per-pixel shading and hit geometry for one camera at one time."""

    rgb: np.ndarray       # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray     # (H, W) float32, +inf for sky
    prim_index: np.ndarray  # (H, W) int32, -1 for sky
    points: np.ndarray    # (H, W, 3) float64 world hit points (undefined on sky)


def _intersect_primitive(prim: PrimitiveSpec, o_body: np.ndarray, d_body: np.ndarray) -> np.ndarray:
    if prim.kind == "plane":
        return _intersect_plane(o_body, d_body, prim.size)
    if prim.kind == "sphere":
        return _intersect_sphere(o_body, d_body, prim.size[0])
    return _intersect_box(o_body, d_body, prim.size)


def raycast(
    camera: Camera,
    primitives: tuple[PrimitiveSpec, ...],
    t: float,
    bg_color,
    light_dir,
    ambient: float,
    texture_phases: np.ndarray | None = None,
) -> RaycastResult:
    """Render one frame analytically; the ray parameter equals z depth."""
    origin, dirs = camera.pixel_rays()
    h, w = camera.height, camera.width
    flat_dirs = dirs.reshape(-1, 3)
    n = flat_dirs.shape[0]
    if texture_phases is None:
        texture_phases = np.zeros((len(primitives), 3))

    params = np.full((len(primitives), n), np.inf)
    poses = []
    for i, prim in enumerate(primitives):
        rot, center = prim.pose_at(t)
        poses.append((rot, center))
        o_body = (origin - center) @ rot
        d_body = flat_dirs @ rot
        params[i] = _intersect_primitive(prim, np.broadcast_to(o_body, (n, 3)), d_body)

    best = np.argmin(params, axis=0)
    depth = params[best, np.arange(n)]
    hit = np.isfinite(depth)
    prim_index = np.where(hit, best, -1).astype(np.int32)
    points = origin + np.where(hit, depth, 0.0)[:, None] * flat_dirs

    rgb = np.broadcast_to(np.asarray(bg_color, dtype=np.float64), (n, 3)).copy()
    light = _unit(light_dir)
    for i, prim in enumerate(primitives):
        sel = hit & (prim_index == i)
        if not np.any(sel):
            continue
        rot, center = poses[i]
        body = (points[sel] - center) @ rot
        if prim.kind == "plane":
            n_body = np.tile(np.array([0.0, 0.0, 1.0]), (body.shape[0], 1))
        elif prim.kind == "sphere":
            n_body = body / prim.size[0]
        else:
            n_body = _box_normal(body, prim.size)
        normal = n_body @ rot.T
        # Two-sided shading: orient the normal against the viewing ray.
        facing = np.sum(normal * flat_dirs[sel], axis=-1)
        normal = np.where(facing[:, None] > 0, -normal, normal)
        lambert = np.maximum(0.0, normal @ light)
        shade = ambient + (1.0 - ambient) * lambert
        rgb[sel] = np.clip(_albedo(prim, body, texture_phases[i]) * shade[:, None], 0.0, 1.0)

    return RaycastResult(
        rgb=rgb.reshape(h, w, 3).astype(np.float32),
        depth=depth.reshape(h, w).astype(np.float32),
        prim_index=prim_index.reshape(h, w),
        points=points.reshape(h, w, 3),
    )


# ---------------------------------------------------------------------------
# Scene containers


@dataclass(frozen=True)
class Frame:
    """One rendered sample of the 4D scene."""

    rgb: np.ndarray    # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, meters, +inf for sky
    view_id: int
    time_index: int

    def validate(self, camera: Camera) -> None:
        if self.rgb.shape != (camera.height, camera.width, 3):
            raise SceneValidationError(
                f"frame (v={self.view_id}, t={self.time_index}) rgb shape "
                f"{self.rgb.shape} does not match its camera"
            )
        if self.depth.shape != (camera.height, camera.width):
            raise SceneValidationError(
                f"frame (v={self.view_id}, t={self.time_index}) depth shape mismatch"
            )
        if not np.all(np.isfinite(self.rgb)) or self.rgb.min() < 0 or self.rgb.max() > 1:
            raise SceneValidationError(
                f"frame (v={self.view_id}, t={self.time_index}) rgb outside [0, 1]"
            )
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0) or np.any(np.isnan(self.depth)):
            raise SceneValidationError(
                f"frame (v={self.view_id}, t={self.time_index}) depth must be > 0 or +inf"
            )


class Scene4D:
    """V pseudo-views x T frames with exact geometry.

    Immutable after construction; the hit-buffer cache is filled lazily and
    races are benign (recomputation yields identical arrays).
    """

    def __init__(self, spec: SceneSpec, cameras: list[Camera], frames: list[list[Frame]]):
        spec.validate()
        if len(cameras) != spec.v_count or len(frames) != spec.v_count:
            raise SceneValidationError("camera/frame grid does not match the spec")
        for v, row in enumerate(frames):
            if len(row) != spec.t_count:
                raise SceneValidationError(f"view {v} has {len(row)} frames, expected {spec.t_count}")
            for fr in row:
                fr.validate(cameras[v])
        self.spec = spec
        self.cameras = cameras
        self.frames = frames
        self._texture_phases = _texture_phases(spec)
        self._hit_cache: dict[tuple[int, int], RaycastResult] = {}
        self._cache_lock = threading.Lock()

    @property
    def v_count(self) -> int:
        return self.spec.v_count

    @property
    def t_count(self) -> int:
        return self.spec.t_count

    def camera(self, v: int) -> Camera:
        return self.cameras[v]

    def frame(self, v: int, t: int) -> Frame:
        return self.frames[v][t]

    def raycast_buffers(self, v: int, t: int) -> RaycastResult:
        """Full hit buffers for (v, t); cached because flow queries reuse them."""
        key = (v, t)
        cached = self._hit_cache.get(key)
        if cached is not None:
            return cached
        result = raycast(
            self.cameras[v],
            self.spec.primitives,
            float(t),
            self.spec.bg_color,
            self.spec.light_dir,
            self.spec.ambient,
            self._texture_phases,
        )
        with self._cache_lock:
            return self._hit_cache.setdefault(key, result)


def _texture_phases(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(0.0, 1.0, size=(len(spec.primitives), 3)) * np.array(
        [p.albedo.cell for p in spec.primitives]
    )[:, None]


def _rig_cameras(spec: SceneSpec) -> list[Camera]:
    moving = [p for p in spec.primitives if p.kind != "plane"]
    obj_size = max((2.0 * p.bounding_radius() for p in moving), default=1.0)
    distance = spec.radius_scale * obj_size
    target = np.asarray(spec.target, dtype=np.float64)
    elev = math.radians(spec.elevation_degrees)
    cams = []
    if spec.v_count == 1:
        azimuths = [0.0]
    else:
        azimuths = np.linspace(-spec.arc_degrees / 2.0, spec.arc_degrees / 2.0, spec.v_count)
    for az_deg in azimuths:
        az = math.radians(float(az_deg))
        offset = distance * np.array(
            [math.cos(elev) * math.sin(az), -math.cos(elev) * math.cos(az), math.sin(elev)]
        )
        cams.append(
            look_at_camera(target + offset, target, spec.width, spec.height, spec.fov_degrees)
        )
    return cams


def generate_scene(spec: SceneSpec) -> Scene4D:
    """Raycast the full V x T grid; deterministic for a fixed spec."""
    spec.validate()
    cameras = _rig_cameras(spec)
    phases = _texture_phases(spec)
    frames: list[list[Frame]] = []
    for v in range(spec.v_count):
        row = []
        for t in range(spec.t_count):
            rc = raycast(
                cameras[v], spec.primitives, float(t), spec.bg_color,
                spec.light_dir, spec.ambient, phases,
            )
            row.append(Frame(rgb=rc.rgb, depth=rc.depth, view_id=v, time_index=t))
        frames.append(row)
    scene = Scene4D(spec, cameras, frames)
    _validate_motion_budget(scene)
    return scene


def _validate_motion_budget(scene: Scene4D) -> None:
    """Reject scenes whose per-frame motion exceeds the pixel budget."""
    ts = sorted({t for t in (0, scene.t_count // 2, scene.t_count - 2) if 0 <= t < scene.t_count - 1})
    worst = 0.0
    for v in range(scene.v_count):
        for t in ts:
            fl = analytic_flow(scene, v, t)
            if np.any(fl.valid):
                mags = np.linalg.norm(fl.vectors[fl.valid], axis=-1)
                worst = max(worst, float(mags.max()) if mags.size else 0.0)
    if worst > scene.spec.max_flow_px:
        raise ValueError(
            f"per-frame motion reaches {worst:.2f} px, above the "
            f"{scene.spec.max_flow_px} px budget"
        )


# ---------------------------------------------------------------------------
# Analytic flow


def advance_points(
    spec: SceneSpec, points: np.ndarray, prim_index: np.ndarray, t_from: float, t_to: float
) -> np.ndarray:
    """Move world points attached to primitives from time t_from to t_to."""
    out = points.copy()
    for i, prim in enumerate(spec.primitives):
        sel = prim_index == i
        if not np.any(sel):
            continue
        if prim.trajectory.is_static:
            continue
        rot_a, cen_a = prim.pose_at(t_from)
        rot_b, cen_b = prim.pose_at(t_to)
        body = (points[sel] - cen_a) @ rot_a
        out[sel] = body @ rot_b.T + cen_b
    return out


def point_visibility(
    scene: Scene4D, v: int, points: np.ndarray, t: float, tol: float = OCCLUSION_TOL
) -> np.ndarray:
    """True where ``points`` are the first surface hit from camera v at time t.

    Casts one ray per point toward it and compares the first-hit distance
    against the point distance with a small metric tolerance.
    """
    cam = scene.camera(v)
    origin = cam.center
    dirs = points - origin
    dist_pt = np.linalg.norm(dirs, axis=-1)
    n = dirs.shape[0]
    params = np.full((len(scene.spec.primitives), n), np.inf)
    for i, prim in enumerate(scene.spec.primitives):
        rot, center = prim.pose_at(t)
        o_body = (origin - center) @ rot
        d_body = dirs @ rot
        params[i] = _intersect_primitive(prim, np.broadcast_to(o_body, (n, 3)), d_body)
    first = params.min(axis=0)
    # param is in units of |dirs|, so first-hit distance is first * dist_pt
    return (first * dist_pt) >= dist_pt - tol


def analytic_flow_between(scene: Scene4D, v: int, t_from: int, t_to: int):
    """Exact pixel correspondence from frame t_from to t_to in one view.

    Unprojects each finite-depth pixel, advances the hit point along its
    primitive's rigid motion, and reprojects into the same (fixed) camera.
    Validity is false on sky, where the advanced point leaves the image, or
    where it is occluded at t_to.
    """
    from .flow import FlowField  # local import to avoid a cycle

    if not (0 <= t_from < scene.t_count and 0 <= t_to < scene.t_count):
        raise ValueError(f"time pair ({t_from}, {t_to}) outside [0, {scene.t_count})")
    cam = scene.camera(v)
    rc = scene.raycast_buffers(v, t_from)
    h, w = cam.height, cam.width
    hit = np.isfinite(rc.depth).reshape(-1)
    pts = rc.points.reshape(-1, 3)
    idx = rc.prim_index.reshape(-1)

    vectors = np.zeros((h * w, 2), dtype=np.float32)
    valid = np.zeros(h * w, dtype=bool)
    if np.any(hit):
        moved = advance_points(scene.spec, pts[hit], idx[hit], float(t_from), float(t_to))
        uv, z = cam.project(moved)
        ys, xs = np.divmod(np.flatnonzero(hit), w)
        old = np.stack([xs, ys], axis=-1).astype(np.float64)
        in_front = z > 0
        # Snap float noise so border pixels of a static scene stay valid and
        # static flow is exactly zero.
        ub = np.where(np.abs(uv - np.round(uv)) < 1e-9, np.round(uv), uv)
        vec = ub - old
        on_screen = (
            in_front
            & (ub[:, 0] >= 0)
            & (ub[:, 0] <= w - 1)
            & (ub[:, 1] >= 0)
            & (ub[:, 1] <= h - 1)
        )
        vis = np.zeros_like(on_screen)
        if np.any(on_screen):
            vis[on_screen] = point_visibility(scene, v, moved[on_screen], float(t_to))
        ok = on_screen & vis
        vectors[np.flatnonzero(hit)] = np.where(ok[:, None], vec, 0.0).astype(np.float32)
        valid[np.flatnonzero(hit)] = ok
    return FlowField(vectors=vectors.reshape(h, w, 2), valid=valid.reshape(h, w))


def analytic_flow(scene: Scene4D, v: int, t: int):
    """Exact forward flow from frame t to t+1 (see analytic_flow_between)."""
    if not (0 <= t < scene.t_count - 1):
        raise ValueError(f"t={t} outside [0, {scene.t_count - 1})")
    return analytic_flow_between(scene, v, t, t + 1)


# ---------------------------------------------------------------------------
# Serialization


def _frame_stem(v: int, t: int) -> str:
    return f"v{v:03d}_t{t:03d}"


def save_scene(scene: Scene4D, path: str | Path) -> Path:
    """Write manifest (JSON), frames (PNG) and depth maps (raw float32)."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "scene4d",
        "version": MANIFEST_VERSION,
        "spec": scene.spec.to_dict(),
        "cameras": [c.to_dict() for c in scene.cameras],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    for v in range(scene.v_count):
        for t in range(scene.t_count):
            fr = scene.frame(v, t)
            arrayio.save_png(root / "frames" / f"{_frame_stem(v, t)}.png", fr.rgb)
            arrayio.save_raw(root / "depth" / f"{_frame_stem(v, t)}.p4df", fr.depth)
    return root


def load_scene(path: str | Path) -> Scene4D:
    """Load a saved scene; raises ManifestError / SceneValidationError on damage."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestError(f"missing {manifest_path}")
    text = manifest_path.read_text()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as err:
        raise ManifestError(f"{manifest_path}: {err.msg}", offset=err.pos) from err
    if manifest.get("format") != "scene4d":
        raise ManifestError(f"{manifest_path}: not a scene manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{manifest_path}: unsupported version {manifest.get('version')}")

    spec = SceneSpec.from_dict(manifest["spec"])
    spec.validate()
    cameras = []
    for i, cdata in enumerate(manifest["cameras"]):
        try:
            cameras.append(Camera.from_dict(cdata))
        except SceneValidationError as err:
            raise SceneValidationError(f"camera {i}: {err}") from err
    frames: list[list[Frame]] = []
    for v in range(spec.v_count):
        row = []
        for t in range(spec.t_count):
            stem = _frame_stem(v, t)
            rgb = arrayio.load_png(root / "frames" / f"{stem}.png")
            depth = arrayio.load_raw(root / "depth" / f"{stem}.p4df")
            row.append(Frame(rgb=rgb, depth=depth, view_id=v, time_index=t))
        frames.append(row)
    return Scene4D(spec, cameras, frames)
