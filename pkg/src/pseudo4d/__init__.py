"""Desk-scale engine for instruction-driven editing of synthetic 4D scenes.

A 4D scene (multiple fixed cameras observing a moving scene over time) is
treated as a pseudo-3D scene whose "views" are per-camera videos. Editing
proceeds by directly editing a few key videos with a pluggable frame editor
under flow-guided sliding-window propagation, warping those edits to every
other view through exact depth geometry, and iteratively fitting a dense
space-time field to the regenerated dataset.
"""

from .editor import (
    EditRequest,
    FrameEditor,
    Guidance,
    InstructionRegistry,
    JitterEditor,
    PaletteEditor,
    ToyAttentionEditor,
    anchor_attention,
    default_registry,
    effective_strength,
    inflate_conv2d_to_3d,
)
from .errors import (
    EditorError,
    ManifestError,
    PipelineError,
    Pseudo4DError,
    SceneValidationError,
    UnknownInstructionError,
)
from .field import FitReport, GridField4D, auto_bounds, fit, load_field, render, save_field
from .flow import (
    AnalyticFlowSource,
    BlockMatchConfig,
    BlockMatchFlowSource,
    FlowCache,
    FlowField,
    estimate_flow_blockmatch,
    fb_consistency,
    fb_consistency_mask,
    warp_temporal,
)
from .geom import WarpResult, reproject_pixel, reproject_pixels, warp_spatial
from .metrics import ConsistencyReport, consistency_report, psnr, ssim
from .pipeline import (
    RenderBuffer,
    RunResult,
    Schedule,
    anneal_strength,
    editor_call_budget,
    run,
    run_iteration,
    run_parallel,
    run_sequential,
    save_run,
    select_keys,
)
from .propagate import (
    EditDataset,
    KeySet,
    edit_first_frames,
    load_dataset,
    propagate_all,
    propagate_frame,
    save_dataset,
)
from .scene import (
    AlbedoSpec,
    Camera,
    Frame,
    PrimitiveSpec,
    Scene4D,
    SceneSpec,
    TrajectorySpec,
    analytic_flow,
    analytic_flow_between,
    default_scene_spec,
    generate_scene,
    load_scene,
    save_scene,
)
from .window import edit_pseudo_view, expected_editor_calls, fuse_init

__version__ = "0.1.0"
