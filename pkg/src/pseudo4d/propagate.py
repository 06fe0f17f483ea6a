"""Cross-view propagation of edits from key pseudo-views to all others.

Key views are edited directly (their first frames in one consistent pass,
the remaining frames by the sliding window). Every other view receives its
edits purely by warping: at each timestep the view's previous-frame edit is
pulled forward through flow and each key view's current edit is pulled
across through depth warping, and the sources are combined as a
confidence-weighted average. No editor call is spent on non-key views.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio, geom
from .editor import EditRequest, FrameEditor, Guidance
from .errors import ManifestError, PipelineError
from .flow import fb_consistency, warp_temporal
from .scene import Frame, Scene4D

# Source weights and confidence scales for the weighted average. Spatial
# sources carry the consistent key-view edits and dominate; the temporal
# source smooths residual flicker. Confidences decay exponentially in the
# warp residual (meters for depth checks, pixels for flow round trips).
W_TEMPORAL = 0.5
W_SPATIAL = 1.0
CONF_TAU_PX = 0.5
CONF_TAU_DEPTH = 5e-3
FALLBACK_WEIGHT = 0.05


@dataclass(frozen=True)
class KeySet:
    """Ordered key view ids; the first entry is the anchor view."""

    views: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        if len(set(self.views)) != len(self.views):
            raise ValueError(f"duplicate key views in {self.views}")
        if not self.views:
            raise ValueError("key set must be nonempty")

    def __len__(self) -> int:
        return len(self.views)


@dataclass
class EditDataset:
    """Edited images for every (view, time) slot plus fit weights.

    ``weights`` feed the field fitter; pixels that no source reached fall
    back to their input image, are flagged, and get FALLBACK_WEIGHT.
    """

    images: dict[tuple[int, int], np.ndarray]
    weights: dict[tuple[int, int], np.ndarray]
    flags: dict[tuple[int, int], np.ndarray]
    key_views: tuple[int, ...]
    v_count: int
    t_count: int
    version: int = 0

    def validate(self) -> None:
        expected = {(v, t) for v in range(self.v_count) for t in range(self.t_count)}
        if set(self.images) != expected:
            raise PipelineError("dataset does not cover the full view/time grid")


def edit_first_frames(
    originals: dict[int, np.ndarray],
    keys: KeySet,
    editor: FrameEditor,
    instruction: str,
    strength: float,
    steps: int,
    batch_limit: int,
    inputs: dict[int, np.ndarray] | None = None,
    guidance: Guidance | None = None,
    seed: int = 0,
    call_base: int = 0,
) -> tuple[dict[int, np.ndarray], int]:
    """Edit the first frame of every key view in a mutually consistent way.

    The first key view is edited without an anchor; the remaining key views
    are edited in batches of at most ``batch_limit`` with the first view's
    (original, edited) pair as the anchor. Returns the edits and the number
    of editor calls spent.
    """
    guidance = guidance if guidance is not None else Guidance()
    if inputs is None:
        inputs = originals
    lead = keys.views[0]
    calls = 0

    def run(batch_views, anchor):
        nonlocal calls
        request = EditRequest(
            batch=[inputs[v] for v in batch_views],
            originals=[originals[v] for v in batch_views],
            instruction=instruction,
            anchor=anchor,
            strength=strength,
            steps=steps,
            guidance=guidance,
            seed=seed,
            call_id=call_base + calls,
        )
        calls += 1
        try:
            return editor.edit_batch(request)
        except Exception as err:
            raise PipelineError(f"first-frame edit failed for views {batch_views}") from err

    edits: dict[int, np.ndarray] = {}
    edits[lead] = run([lead], None)[0]
    rest = list(keys.views[1:])
    anchor = (originals[lead], edits[lead])
    for start in range(0, len(rest), batch_limit):
        chunk = rest[start : start + batch_limit]
        for view, edited in zip(chunk, run(chunk, anchor)):
            edits[view] = edited
    return edits, calls


def first_frame_call_budget(n_keys: int, batch_limit: int) -> int:
    """Calls needed by edit_first_frames: 1 unanchored + ceil((n-1)/B)."""
    return 1 + math.ceil(max(n_keys - 1, 0) / batch_limit)


def propagate_frame(
    scene: Scene4D,
    view: int,
    t: int,
    edited_prev: np.ndarray | None,
    key_edits: dict[int, np.ndarray],
    flow_provider,
    fallback: np.ndarray,
    w_temporal: float = W_TEMPORAL,
    w_spatial: float = W_SPATIAL,
    top_k: int | None = None,
    depth_tol: float = geom.DEFAULT_DEPTH_TOL,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted average of temporal and spatial warps for one frame.

    Sources: the view's own previous edit pulled through flow (weight
    ``w_temporal`` times a flow round-trip confidence) and each key view's
    current edit pulled through depth warping (weight ``w_spatial`` times a
    depth-agreement confidence). ``top_k`` keeps only the k highest-weight
    spatial sources per pixel. Pixels with zero total weight take the
    fallback image and are flagged.

    Returns (image, weight map, flag mask).
    """
    if not key_edits:
        raise PipelineError(f"no key edits supplied for frame (v={view}, t={t})")
    h, w = fallback.shape[:2]
    acc = np.zeros((h, w, 3), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)

    if edited_prev is not None:
        back = flow_provider.get(view, t, t - 1)
        fwd = flow_provider.get(view, t - 1, t)
        mask, residual = fb_consistency(back, fwd)
        warped = warp_temporal(edited_prev, back, mask)
        conf = np.exp(-residual.astype(np.float64) / CONF_TAU_PX)
        wmap = np.where(warped.mask, w_temporal * conf, 0.0)
        acc += wmap[..., None] * warped.image
        wsum += wmap

    cam_dst = scene.camera(view)
    depth_dst = scene.frame(view, t).depth
    spatial_weights = []
    spatial_images = []
    for key in sorted(key_edits):
        src_frame = Frame(
            rgb=key_edits[key],
            depth=scene.frame(key, t).depth,
            view_id=key,
            time_index=t,
        )
        warped = geom.warp_spatial(src_frame, scene.camera(key), cam_dst, depth_dst, depth_tol)
        conf = np.exp(-warped.residual.astype(np.float64) / CONF_TAU_DEPTH)
        wmap = np.where(warped.mask, w_spatial * conf, 0.0)
        spatial_weights.append(wmap)
        spatial_images.append(warped.image.astype(np.float64))

    if top_k is not None and len(spatial_weights) > top_k:
        stack = np.stack(spatial_weights)
        order = np.argsort(-stack, axis=0, kind="stable")
        keep = np.zeros_like(stack, dtype=bool)
        np.put_along_axis(keep, order[:top_k], True, axis=0)
        spatial_weights = [np.where(keep[i], stack[i], 0.0) for i in range(len(spatial_weights))]

    for wmap, image in zip(spatial_weights, spatial_images):
        acc += wmap[..., None] * image
        wsum += wmap

    covered = wsum > 0
    out = np.array(fallback, dtype=np.float32, copy=True)
    if np.any(covered):
        out[covered] = (acc[covered] / wsum[covered][:, None]).astype(np.float32)
    flags = ~covered
    weight = np.where(covered, wsum, FALLBACK_WEIGHT).astype(np.float32)
    return out, weight, flags


def propagate_all(
    scene: Scene4D,
    key_edits: dict[int, list[np.ndarray]],
    flow_provider,
    inputs: dict[tuple[int, int], np.ndarray] | None = None,
    w_temporal: float = W_TEMPORAL,
    w_spatial: float = W_SPATIAL,
    top_k: int | None = None,
    use_temporal: bool = True,
    version: int = 0,
) -> EditDataset:
    """Assemble the full dataset by per-timestep propagation.

    Key views are copied through with weight 1. Other views are filled in
    time order using their own previous propagated frame as the temporal
    source. ``inputs`` supplies the fallback image per slot (defaults to the
    scene's original frames); ``use_temporal`` disables the flow source (the
    no-flow ablation).
    """
    keys = tuple(sorted(key_edits))
    for key, seq in key_edits.items():
        if len(seq) != scene.t_count:
            raise PipelineError(f"key view {key} supplies {len(seq)} frames, expected {scene.t_count}")

    images: dict[tuple[int, int], np.ndarray] = {}
    weights: dict[tuple[int, int], np.ndarray] = {}
    flags: dict[tuple[int, int], np.ndarray] = {}
    shape = scene.frame(0, 0).rgb.shape[:2]

    for key in keys:
        for t in range(scene.t_count):
            images[(key, t)] = np.asarray(key_edits[key][t], dtype=np.float32)
            weights[(key, t)] = np.ones(shape, dtype=np.float32)
            flags[(key, t)] = np.zeros(shape, dtype=bool)

    others = [v for v in range(scene.v_count) if v not in key_edits]
    for t in range(scene.t_count):
        current_keys = {k: images[(k, t)] for k in keys}
        for v in others:
            prev = images[(v, t - 1)] if (use_temporal and t > 0) else None
            fallback = (
                inputs[(v, t)] if inputs is not None else scene.frame(v, t).rgb
            )
            img, wmap, flag = propagate_frame(
                scene, v, t, prev, current_keys, flow_provider, fallback,
                w_temporal=w_temporal, w_spatial=w_spatial, top_k=top_k,
            )
            if np.all(flag):
                raise PipelineError(f"zero propagation coverage at (v={v}, t={t})")
            images[(v, t)] = img
            weights[(v, t)] = wmap
            flags[(v, t)] = flag

    dataset = EditDataset(
        images=images,
        weights=weights,
        flags=flags,
        key_views=keys,
        v_count=scene.v_count,
        t_count=scene.t_count,
        version=version,
    )
    dataset.validate()
    return dataset


def dataset_from_images(
    images: dict[tuple[int, int], np.ndarray],
    v_count: int,
    t_count: int,
    key_views: tuple[int, ...] = (),
    version: int = 0,
) -> EditDataset:
    """Wrap a dense image grid as a dataset with unit weights and no flags."""
    shape = next(iter(images.values())).shape[:2]
    dataset = EditDataset(
        images={k: np.asarray(v, dtype=np.float32) for k, v in images.items()},
        weights={k: np.ones(shape, dtype=np.float32) for k in images},
        flags={k: np.zeros(shape, dtype=bool) for k in images},
        key_views=tuple(key_views),
        v_count=v_count,
        t_count=t_count,
        version=version,
    )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(dataset: EditDataset, path: str | Path) -> Path:
    """Write the dataset as a run directory: PNGs, weight maps, JSON index."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    index = {
        "format": "edit-dataset",
        "version_tag": dataset.version,
        "key_views": list(dataset.key_views),
        "v_count": dataset.v_count,
        "t_count": dataset.t_count,
    }
    (root / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    for (v, t), image in dataset.images.items():
        stem = f"v{v:03d}_t{t:03d}"
        arrayio.save_png(root / "images" / f"{stem}.png", image)
        packed = np.stack(
            [dataset.weights[(v, t)], dataset.flags[(v, t)].astype(np.float32)], axis=-1
        )
        arrayio.save_raw(root / "weights" / f"{stem}.p4df", packed)
    return root


def load_dataset(path: str | Path) -> EditDataset:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.exists():
        raise ManifestError(f"missing {index_path}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"{index_path}: {err.msg}", offset=err.pos) from err
    if index.get("format") != "edit-dataset":
        raise ManifestError(f"{index_path}: not a dataset index")
    images = {}
    weights = {}
    flags = {}
    for v in range(index["v_count"]):
        for t in range(index["t_count"]):
            stem = f"v{v:03d}_t{t:03d}"
            images[(v, t)] = arrayio.load_png(root / "images" / f"{stem}.png")
            packed = arrayio.load_raw(root / "weights" / f"{stem}.p4df")
            weights[(v, t)] = packed[:, :, 0]
            flags[(v, t)] = packed[:, :, 1] > 0.5
    dataset = EditDataset(
        images=images,
        weights=weights,
        flags=flags,
        key_views=tuple(index["key_views"]),
        v_count=index["v_count"],
        t_count=index["t_count"],
        version=index["version_tag"],
    )
    dataset.validate()
    return dataset
