"""Shared fixtures: scenes are expensive, so they are session-scoped."""

import numpy as np
import pytest

from pseudo4d import scene as scene_mod


@pytest.fixture(scope="session")
def small_scene():
    """3 views x 8 frames at 64x64; enough motion and occlusion for warps."""
    spec = scene_mod.default_scene_spec(v_count=3, t_count=8, size=64)
    return scene_mod.generate_scene(spec)


@pytest.fixture(scope="session")
def tiny_static_scene():
    """1 view x 2 frames, one plane large enough to fill every pixel."""
    spec = scene_mod.SceneSpec(
        v_count=1,
        t_count=2,
        height=16,
        width=16,
        primitives=(scene_mod.PrimitiveSpec("plane", (30.0, 30.0), albedo=scene_mod.AlbedoSpec("sine", 3.0)),),
        seed=7,
    )
    return scene_mod.generate_scene(spec)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
