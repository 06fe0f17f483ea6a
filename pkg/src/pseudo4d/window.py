"""Flow-guided sliding-window editing of one pseudo-view.

The view's frames are edited in consecutive windows of width B. Before each
editor call, the previous frame's edit is chained forward through per-frame
flow, fused with the current input frame where the warp is valid, and the
fused images form the editor's init batch. The first frame's edit comes from
outside (the cross-view first-frame stage) and also serves as the anchor for
every window, so one editor call per window keeps the whole view aligned
with it: editing T frames costs ceil((T-1)/B) calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .editor import EditRequest, FrameEditor, Guidance
from .errors import PipelineError
from .flow import fb_consistency, warp_temporal
from .geom import WarpResult

INPAINT_STRENGTH = 0.6
INPAINT_STEPS = 3


@dataclass
class WindowState:
    """Progress of the sliding window over one pseudo-view."""

    view_id: int
    window_start: int
    width: int
    anchor: tuple[np.ndarray, np.ndarray]
    edited: dict[int, np.ndarray] = field(default_factory=dict)
    editor_calls: int = 0

    def check(self) -> None:
        if sorted(self.edited) != list(range(self.window_start)):
            raise PipelineError(
                f"view {self.view_id}: edited frames {sorted(self.edited)} do not "
                f"cover [0, {self.window_start})"
            )
        expected = math.ceil(max(self.window_start - 1, 0) / self.width)
        if self.editor_calls != expected:
            raise PipelineError(
                f"view {self.view_id}: {self.editor_calls} editor calls at window "
                f"start {self.window_start}, expected {expected}"
            )


def fuse_init(original: np.ndarray, warped: WarpResult) -> np.ndarray:
    """Warped edit where the warp is valid, the original pixel elsewhere."""
    if original.shape[:2] != warped.mask.shape:
        raise ValueError("resolution mismatch between original and warp")
    return np.where(warped.mask[..., None], warped.image, original).astype(np.float32)


def expected_editor_calls(t_count: int, window_width: int) -> int:
    """Editor invocations needed for a T-frame view: ceil((T-1)/B)."""
    return math.ceil(max(t_count - 1, 0) / window_width)


def edit_pseudo_view(
    originals: list[np.ndarray],
    first_frame_edit: np.ndarray,
    editor: FrameEditor,
    window_width: int,
    flow_provider,
    view_id: int,
    inputs: list[np.ndarray] | None = None,
    instruction: str = "sepia",
    strength: float = INPAINT_STRENGTH,
    steps: int = INPAINT_STEPS,
    guidance: Guidance | None = None,
    seed: int = 0,
    call_base: int = 0,
    fb_tol: float = 1.0,
    debug_dir: str | Path | None = None,
) -> list[np.ndarray]:
    """Edit a whole pseudo-view window by window.

    ``originals`` are the unedited frames (editor conditioning and flow
    geometry); ``inputs``, when given, replace them as the fusion fallback
    and propagation substrate (the pipeline passes renders here from its
    second iteration on). Frame 0 takes ``first_frame_edit`` verbatim, and
    the anchor for every window is (originals[0], first_frame_edit).

    Returns T edited frames; raises PipelineError with view/window context
    if the editor fails.
    """
    if window_width < 1:
        raise ValueError("window width must be >= 1")
    t_count = len(originals)
    if t_count < 1:
        raise ValueError("a pseudo-view needs at least one frame")
    if inputs is None:
        inputs = originals
    if len(inputs) != t_count:
        raise ValueError("inputs and originals must have matching lengths")
    guidance = guidance if guidance is not None else Guidance()

    state = WindowState(
        view_id=view_id,
        window_start=1,
        width=window_width,
        anchor=(originals[0], first_frame_edit),
    )
    state.edited[0] = np.asarray(first_frame_edit, dtype=np.float32)

    debug_root = Path(debug_dir) if debug_dir is not None else None
    if debug_root is not None:
        debug_root.mkdir(parents=True, exist_ok=True)

    while state.window_start < t_count:
        t0 = state.window_start
        t1 = min(t0 + window_width, t_count)
        fused_batch = []
        previous = state.edited[t0 - 1]
        for t in range(t0, t1):
            back = flow_provider.get(view_id, t, t - 1)
            fwd = flow_provider.get(view_id, t - 1, t)
            mask, _ = fb_consistency(back, fwd, fb_tol)
            warped = warp_temporal(previous, back, mask)
            fused = fuse_init(inputs[t], warped)
            fused_batch.append(fused)
            previous = fused
        request = EditRequest(
            batch=fused_batch,
            originals=[originals[t] for t in range(t0, t1)],
            instruction=instruction,
            anchor=state.anchor,
            strength=strength,
            steps=steps,
            guidance=guidance,
            seed=seed,
            call_id=call_base + state.editor_calls,
        )
        try:
            edited = editor.edit_batch(request)
        except Exception as err:
            raise PipelineError(
                f"editor failed on view {view_id}, window [{t0}, {t1})"
            ) from err
        if len(edited) != len(fused_batch):
            raise PipelineError(
                f"editor returned {len(edited)} frames for a {len(fused_batch)}-frame "
                f"window on view {view_id}"
            )
        for offset, t in enumerate(range(t0, t1)):
            state.edited[t] = np.asarray(edited[offset], dtype=np.float32)
        state.editor_calls += 1
        state.window_start = t1
        state.check()
        if debug_root is not None:
            for offset, t in enumerate(range(t0, t1)):
                arrayio.save_png(debug_root / f"v{view_id:03d}_t{t:03d}_fused.png", fused_batch[offset])
                arrayio.save_png(debug_root / f"v{view_id:03d}_t{t:03d}_edited.png", state.edited[t])

    assert state.editor_calls == expected_editor_calls(t_count, window_width)
    return [state.edited[t] for t in range(t_count)]
