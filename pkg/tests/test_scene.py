"""Scene generation, analytic flow, and serialization."""

import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from pseudo4d import scene as S
from pseudo4d.errors import ManifestError, SceneValidationError


# ---------------------------------------------------------------------------
# Generation


def test_static_scene_frames_identical(tiny_static_scene):
    f0 = tiny_static_scene.frame(0, 0)
    f1 = tiny_static_scene.frame(0, 1)
    assert np.array_equal(f0.rgb, f1.rgb)
    assert np.array_equal(f0.depth, f1.depth)


def test_generation_deterministic():
    spec = S.default_scene_spec(v_count=2, t_count=3, size=32)
    a = S.generate_scene(spec)
    b = S.generate_scene(spec)
    for v in range(2):
        for t in range(3):
            assert np.array_equal(a.frame(v, t).rgb, b.frame(v, t).rgb)
            assert np.array_equal(a.frame(v, t).depth, b.frame(v, t).depth)


def test_cameras_constant_over_time(small_scene):
    # One camera object per pseudo-view; the grid shares it across time.
    spec = S.SceneSpec(
        v_count=2, t_count=4, height=32, width=32,
        primitives=(S.PrimitiveSpec("sphere", (0.5,), center=(0, 0, 0.6),
                                    trajectory=S.TrajectorySpec(velocity=(0.01, 0, 0))),),
    )
    scene = S.generate_scene(spec)
    assert len(scene.cameras) == 2
    assert scene.t_count == 4
    assert all(len(row) == 4 for row in scene.frames)


def test_generate_rejects_bad_specs():
    good = S.default_scene_spec(v_count=1, t_count=2, size=32)
    with pytest.raises(ValueError):
        S.generate_scene(S.SceneSpec(v_count=0, t_count=2, height=32, width=32,
                                     primitives=good.primitives))
    with pytest.raises(ValueError):
        S.generate_scene(S.SceneSpec(v_count=1, t_count=1, height=32, width=32,
                                     primitives=good.primitives))
    with pytest.raises(ValueError):
        S.generate_scene(S.SceneSpec(v_count=1, t_count=2, height=8, width=8,
                                     primitives=good.primitives))
    with pytest.raises(ValueError):
        S.PrimitiveSpec("sphere", (0.0,))


def test_camera_invariants(small_scene):
    for cam in small_scene.cameras:
        assert np.max(np.abs(cam.rotation.T @ cam.rotation - np.eye(3))) <= 1e-9
        assert cam.fx > 0 and cam.fy > 0
        assert 0 <= cam.cx < cam.width and 0 <= cam.cy < cam.height


def test_camera_rejects_non_orthonormal():
    rot = np.eye(3)
    rot[0, 1] = 1e-6
    with pytest.raises(SceneValidationError):
        S.Camera(fx=50, fy=50, cx=16, cy=16, rotation=rot,
                 translation=np.zeros(3), width=32, height=32)


def test_depth_matches_closed_form_ray_sphere():
    """Depth at pixels on the sphere equals the quadratic-solution distance."""
    spec = S.default_scene_spec(v_count=5, t_count=3, size=64, seed=3)
    scene = S.generate_scene(spec)
    sphere = spec.primitives[1]
    assert sphere.kind == "sphere"
    radius = sphere.size[0]
    checked = 0
    for v in range(scene.v_count):
        cam = scene.camera(v)
        rc = scene.raycast_buffers(v, 1)
        _, center = sphere.pose_at(1.0)
        # Pixel under the projected sphere center.
        uv, z = cam.project(center[None])
        px, py = int(round(uv[0, 0])), int(round(uv[0, 1]))
        if not (0 <= px < cam.width and 0 <= py < cam.height):
            continue
        if rc.prim_index[py, px] != 1:
            continue
        origin, dirs = cam.pixel_rays()
        d = dirs[py, px]
        # Independent quadratic solve in float128.
        o = (origin - center).astype(np.longdouble)
        dl = d.astype(np.longdouble)
        a = np.dot(dl, dl)
        b = 2 * np.dot(o, dl)
        c = np.dot(o, o) - np.longdouble(radius) ** 2
        disc = b * b - 4 * a * c
        assert disc > 0
        s = (-b - np.sqrt(disc)) / (2 * a)
        assert abs(float(s) - float(rc.depth[py, px])) < 1e-6
        checked += 1
    assert checked >= 3


def test_depth_exactness_random_sample(small_scene):
    """Rendered depth is consistent with re-cast rays at sampled pixels."""
    rng = np.random.default_rng(0)
    scene = small_scene
    rc = scene.raycast_buffers(1, 2)
    cam = scene.camera(1)
    origin, dirs = cam.pixel_rays()
    finite = np.argwhere(np.isfinite(rc.depth))
    pick = finite[rng.choice(len(finite), size=min(1000, len(finite)), replace=False)]
    ys, xs = pick[:, 0], pick[:, 1]
    # The stored hit point, re-projected onto its ray parameter, equals depth.
    pts = rc.points[ys, xs]
    s = (pts - origin) @ scene.camera(1).rotation.T[:, 2]
    assert np.max(np.abs(s - rc.depth[ys, xs])) < 1e-6


# ---------------------------------------------------------------------------
# Analytic flow


def test_static_scene_zero_flow(tiny_static_scene):
    fl = S.analytic_flow(tiny_static_scene, 0, 0)
    finite = np.isfinite(tiny_static_scene.frame(0, 0).depth)
    assert np.array_equal(fl.valid, finite)
    assert np.all(fl.vectors[finite] == 0)


def test_translating_sphere_flow_sign():
    spec = S.SceneSpec(
        v_count=1, t_count=4, height=48, width=48,
        primitives=(
            S.PrimitiveSpec("plane", (2.6, 2.6)),
            S.PrimitiveSpec(
                "sphere", (0.5,), center=(0, 0, 0.6),
                trajectory=S.TrajectorySpec(velocity=(0.05, 0.0, 0.0)),
            ),
        ),
    )
    scene = S.generate_scene(spec)
    fl = S.analytic_flow(scene, 0, 1)
    rc = scene.raycast_buffers(0, 1)
    on_sphere = fl.valid & (rc.prim_index == 1)
    on_plane = fl.valid & (rc.prim_index == 0)
    assert on_sphere.sum() > 20
    # +x world motion, camera on the -y side looking +y: projects to +x pixels.
    assert np.all(fl.vectors[..., 0][on_sphere] > 0)
    assert np.allclose(fl.vectors[on_plane], 0.0)


def test_flow_out_of_range_t(small_scene):
    with pytest.raises(ValueError):
        S.analytic_flow(small_scene, 0, small_scene.t_count - 1)


def test_flow_against_brute_force_correspondence(small_scene):
    """Nearest-neighbor search over next-frame hit points as the oracle."""
    scene = small_scene
    for v, t in ((0, 2), (2, 5)):
        fl = S.analytic_flow(scene, v, t)
        rc_now = scene.raycast_buffers(v, t)
        rc_next = scene.raycast_buffers(v, t + 1)

        next_finite = np.argwhere(np.isfinite(rc_next.depth))
        next_points = rc_next.points[next_finite[:, 0], next_finite[:, 1]]
        tree = cKDTree(next_points)

        valid = np.argwhere(fl.valid)
        pts = rc_now.points[valid[:, 0], valid[:, 1]]
        prim = rc_now.prim_index[valid[:, 0], valid[:, 1]]
        moved = S.advance_points(scene.spec, pts, prim, t, t + 1)
        _, nn = tree.query(moved, k=1)
        oracle_px = next_finite[nn][:, ::-1].astype(np.float64)  # (x, y)

        ours = valid[:, ::-1].astype(np.float64) + fl.vectors[valid[:, 0], valid[:, 1]]
        err = np.linalg.norm(ours - oracle_px, axis=1)
        assert (err < 0.51).mean() >= 0.99


def test_flow_composition(small_scene):
    """Flow t->t+1 composed with t+1->t+2 matches direct t->t+2 correspondence."""
    scene = small_scene
    v, t = 1, 3
    f01 = S.analytic_flow_between(scene, v, t, t + 1)
    f12 = S.analytic_flow_between(scene, v, t + 1, t + 2)
    f02 = S.analytic_flow_between(scene, v, t, t + 2)

    h, w = f01.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + f01.vectors[..., 0]
    ty = ys + f01.vectors[..., 1]
    from pseudo4d.geom import bilinear_sample, in_bounds

    step2 = bilinear_sample(f12.vectors.astype(np.float64), tx, ty)
    ok2 = bilinear_sample(f12.valid.astype(np.float64), tx, ty) >= 0.999
    composed = f01.vectors + step2
    joint = f01.valid & f02.valid & ok2 & in_bounds(tx, ty, w, h)
    err = np.linalg.norm(composed[joint] - f02.vectors[joint], axis=-1)
    assert err.size > 500
    assert np.percentile(err, 99) < 1.0


def test_motion_budget_enforced():
    spec = S.SceneSpec(
        v_count=1, t_count=3, height=32, width=32,
        primitives=(
            S.PrimitiveSpec("sphere", (0.5,), center=(0, 0, 0.6),
                            trajectory=S.TrajectorySpec(velocity=(0.8, 0, 0))),
        ),
        max_flow_px=6.0,
    )
    with pytest.raises(ValueError, match="budget"):
        S.generate_scene(spec)


# ---------------------------------------------------------------------------
# Serialization


def test_save_load_roundtrip(tmp_path, small_scene):
    root = S.save_scene(small_scene, tmp_path / "scene")
    loaded = S.load_scene(root)
    again = S.save_scene(loaded, tmp_path / "scene2")
    assert (root / "manifest.json").read_bytes() == (again / "manifest.json").read_bytes()
    # Images round-trip within 8-bit quantization; depth exactly.
    for v in range(small_scene.v_count):
        for t in range(small_scene.t_count):
            a, b = small_scene.frame(v, t), loaded.frame(v, t)
            assert np.max(np.abs(a.rgb - b.rgb)) <= (0.5 / 255.0) + 1e-6
            assert np.array_equal(a.depth, b.depth)


def test_load_truncated_manifest(tmp_path, tiny_static_scene):
    root = S.save_scene(tiny_static_scene, tmp_path / "scene")
    manifest = root / "manifest.json"
    manifest.write_text(manifest.read_text()[:120])
    with pytest.raises(ManifestError) as exc:
        S.load_scene(root)
    assert exc.value.offset is not None


def test_load_rejects_non_orthonormal_camera(tmp_path, tiny_static_scene):
    root = S.save_scene(tiny_static_scene, tmp_path / "scene")
    manifest = root / "manifest.json"
    data = json.loads(manifest.read_text())
    data["cameras"][0]["rotation"][0][1] += 1e-6
    manifest.write_text(json.dumps(data))
    with pytest.raises(SceneValidationError, match="camera 0"):
        S.load_scene(root)


def test_load_rejects_unknown_spec_keys(tmp_path, tiny_static_scene):
    root = S.save_scene(tiny_static_scene, tmp_path / "scene")
    manifest = root / "manifest.json"
    data = json.loads(manifest.read_text())
    data["spec"]["mystery_knob"] = 1
    manifest.write_text(json.dumps(data))
    with pytest.raises(ManifestError, match="mystery_knob"):
        S.load_scene(root)
