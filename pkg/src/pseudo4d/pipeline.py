"""The outer editing loop: iterative dataset replacement over a 4D field.

Each iteration randomly selects key pseudo-views, edits their first frames
consistently, runs the sliding window over each key view, propagates to all
other views, and publishes the resulting dataset for the field trainer.
First-frame editing strength anneals over iterations (cosine from 0.98 to
0.70) so later passes refine instead of replace. The trainer and the
dataset generator can run as two workers sharing a versioned render buffer
and dataset slot, both swapped atomically; a single-threaded sequential
mode produces equivalent results and is the default.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field as dataclass_field, replace
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import metrics, propagate, window
from .editor import EditRequest, FrameEditor, Guidance
from .errors import PipelineError
from .flow import AnalyticFlowSource, BlockMatchFlowSource, FlowCache
from .propagate import EditDataset, KeySet
from .scene import Scene4D

MODES = ("full", "no-flow", "one-shot-propagation", "frame-independent")

GUIDANCE_PRESETS = {
    "object": Guidance(s_text=7.5, s_image=1.5),
    "style": Guidance(s_text=9.5, s_image=1.5),
}


@dataclass(frozen=True)
class Schedule:
    """Editing strengths, budgets and sizes for a whole run."""

    n_iterations: int = 4
    strength_hi: float = 0.98
    strength_lo: float = 0.70
    anchor_steps: int = 20
    inpaint_strength: float = 0.6
    inpaint_steps: int = 3
    window_width: int = 8
    key_count: int = 2
    guidance_preset: str = "object"
    fit_steps: int = 2000
    final_fit_steps: int = 2000
    init_fit_steps: int = 800
    fit_lr: float = 2000.0
    fit_density_lr: float = 8000.0
    rays_per_step: int = 2048
    ray_samples: int = 32
    field_resolution: tuple[int, int, int] = (48, 48, 16)

    def validate(self) -> None:
        if not (0.0 <= self.strength_lo <= self.strength_hi <= 1.0):
            raise ValueError("need 0 <= strength_lo <= strength_hi <= 1")
        for name in ("n_iterations", "anchor_steps", "inpaint_steps", "window_width", "key_count"):
            if getattr(self, name) < 1 and not (name == "n_iterations" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be >= 1")
        if self.guidance_preset not in GUIDANCE_PRESETS:
            raise ValueError(f"unknown guidance preset {self.guidance_preset!r}")
        if not (0.0 <= self.inpaint_strength <= 1.0):
            raise ValueError("inpaint_strength must be in [0, 1]")

    @property
    def guidance(self) -> Guidance:
        return GUIDANCE_PRESETS[self.guidance_preset]

    def to_dict(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "strength_hi": self.strength_hi,
            "strength_lo": self.strength_lo,
            "anchor_steps": self.anchor_steps,
            "inpaint_strength": self.inpaint_strength,
            "inpaint_steps": self.inpaint_steps,
            "window_width": self.window_width,
            "key_count": self.key_count,
            "guidance_preset": self.guidance_preset,
            "fit_steps": self.fit_steps,
            "final_fit_steps": self.final_fit_steps,
            "init_fit_steps": self.init_fit_steps,
            "fit_lr": self.fit_lr,
            "fit_density_lr": self.fit_density_lr,
            "rays_per_step": self.rays_per_step,
            "ray_samples": self.ray_samples,
            "field_resolution": list(self.field_resolution),
        }

    @staticmethod
    def from_dict(data: dict) -> "Schedule":
        kwargs = dict(data)
        if "field_resolution" in kwargs:
            kwargs["field_resolution"] = tuple(kwargs["field_resolution"])
        return Schedule(**kwargs)


def anneal_strength(iteration: int, n_iterations: int, schedule: Schedule) -> float:
    """Cosine decay of first-frame editing strength from hi to lo."""
    if not 0 <= iteration < max(n_iterations, 1):
        raise ValueError(f"iteration {iteration} outside [0, {n_iterations})")
    hi, lo = schedule.strength_hi, schedule.strength_lo
    if n_iterations <= 1:
        return hi
    return lo + (hi - lo) * (1.0 + math.cos(math.pi * iteration / (n_iterations - 1))) / 2.0


def select_keys(v_count: int, n: int, seed: int, iteration: int) -> KeySet:
    """Uniform sample of n distinct views, deterministic in (seed, iteration)."""
    if n > v_count:
        raise ValueError(f"cannot select {n} key views out of {v_count}")
    rng = np.random.default_rng((seed, iteration))
    views = tuple(int(v) for v in rng.choice(v_count, size=n, replace=False))
    return KeySet(views=views, seed=seed)


def editor_call_budget(n_keys: int, t_count: int, window_width: int) -> int:
    """Per-iteration cap: ceil(n/B) + 1 + n * ceil((T-1)/B)."""
    return (
        math.ceil(n_keys / window_width)
        + 1
        + n_keys * window.expected_editor_calls(t_count, window_width)
    )


class CountingEditor(FrameEditor):
    """Wrapper that counts edit_batch invocations."""

    def __init__(self, inner: FrameEditor):
        self.inner = inner
        self.calls = 0

    def edit_batch(self, request: EditRequest):
        self.calls += 1
        return self.inner.edit_batch(request)


# ---------------------------------------------------------------------------
# Shared state for the two-worker mode


class _Snapshot:
    """One published field version with a lazily filled render cache."""

    __slots__ = ("field", "version", "renders", "lock")

    def __init__(self, fld: field_mod.GridField4D, version: int):
        self.field = fld
        self.version = version
        self.renders: dict[tuple[int, int], np.ndarray] = {}
        self.lock = threading.Lock()


class RenderBuffer:
    """Versioned snapshot store for the trainer's latest renders.

    ``publish`` swaps in a complete new snapshot atomically (a single
    reference assignment); a read renders from exactly one snapshot, so it
    can never observe a mix of two field versions.
    """

    def __init__(self, cameras, n_samples: int = 32):
        self.cameras = cameras
        self.n_samples = n_samples
        self._snapshot: _Snapshot | None = None

    def publish(self, fld: field_mod.GridField4D, version: int) -> None:
        self._snapshot = _Snapshot(fld.copy(), version)

    @property
    def version(self) -> int | None:
        snap = self._snapshot
        return None if snap is None else snap.version

    def read(self, v: int, t: int) -> tuple[np.ndarray, int]:
        """Latest render of (v, t) plus the field version that produced it."""
        snap = self._snapshot
        if snap is None:
            raise PipelineError("render buffer read before any publication")
        key = (v, t)
        cached = snap.renders.get(key)
        if cached is None:
            img = field_mod.render(snap.field, self.cameras[v], t, self.n_samples)
            with snap.lock:
                cached = snap.renders.setdefault(key, img)
        return cached, snap.version


class DatasetSlot:
    """Single-writer, single-reader versioned dataset handoff."""

    def __init__(self):
        self._value: tuple[EditDataset, int] | None = None
        self._lock = threading.Lock()

    def put(self, dataset: EditDataset, version: int) -> None:
        with self._lock:
            self._value = (dataset, version)

    def get(self) -> tuple[EditDataset, int] | None:
        with self._lock:
            return self._value


# ---------------------------------------------------------------------------
# Run log


@dataclass
class RunLog:
    """Append-only per-iteration records."""

    entries: list = dataclass_field(default_factory=list)

    def append(self, entry: dict) -> None:
        self.entries.append(entry)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


# ---------------------------------------------------------------------------
# One iteration of dataset generation


@dataclass
class RunState:
    """Everything one dataset-generation pass needs."""

    scene: Scene4D
    editor: CountingEditor
    schedule: Schedule
    instruction: str
    mode: str
    seed: int
    flow_provider: object
    buffer: RenderBuffer
    use_renders: bool = True  # read window inits from the buffer after iter 0


def _call_base(state: RunState, iteration: int) -> int:
    span = state.scene.v_count * (state.scene.t_count + 2) + 16
    return iteration * span


def _render_inputs(state: RunState, views, iteration: int) -> dict[int, list[np.ndarray]] | None:
    if iteration == 0 or not state.use_renders:
        return None
    inputs: dict[int, list[np.ndarray]] = {}
    for v in views:
        inputs[v] = [state.buffer.read(v, t)[0] for t in range(state.scene.t_count)]
    return inputs


def _iteration_keyed(state: RunState, iteration: int) -> EditDataset:
    scene = state.scene
    sched = state.schedule
    keys = select_keys(scene.v_count, sched.key_count, state.seed, iteration)
    strength = anneal_strength(iteration, sched.n_iterations, sched)
    base = _call_base(state, iteration)
    inputs = _render_inputs(state, keys.views, iteration)

    first_originals = {v: scene.frame(v, 0).rgb for v in keys.views}
    first_inputs = None if inputs is None else {v: inputs[v][0] for v in keys.views}
    first_edits, first_calls = propagate.edit_first_frames(
        first_originals,
        keys,
        state.editor,
        state.instruction,
        strength=strength,
        steps=sched.anchor_steps,
        batch_limit=sched.window_width,
        inputs=first_inputs,
        guidance=sched.guidance,
        seed=state.seed,
        call_base=base,
    )

    key_edits: dict[int, list[np.ndarray]] = {}
    for k_idx, view in enumerate(keys.views):
        view_originals = [scene.frame(view, t).rgb for t in range(scene.t_count)]
        view_inputs = None if inputs is None else inputs[view]
        call_base = base + first_calls + k_idx * window.expected_editor_calls(
            scene.t_count, sched.window_width
        )
        if state.mode == "no-flow":
            key_edits[view] = _edit_view_windows_noflow(
                state, view, view_originals, view_inputs, first_edits[view],
                strength, call_base,
            )
        else:
            key_edits[view] = window.edit_pseudo_view(
                view_originals,
                first_edits[view],
                state.editor,
                sched.window_width,
                state.flow_provider,
                view,
                inputs=view_inputs,
                instruction=state.instruction,
                strength=sched.inpaint_strength,
                steps=sched.inpaint_steps,
                guidance=sched.guidance,
                seed=state.seed,
                call_base=call_base,
            )

    dataset = propagate.propagate_all(
        scene,
        key_edits,
        state.flow_provider,
        use_temporal=(state.mode != "no-flow"),
        version=iteration + 1,
    )
    return dataset


def _edit_view_windows_noflow(
    state: RunState,
    view: int,
    originals: list[np.ndarray],
    inputs: list[np.ndarray] | None,
    first_frame_edit: np.ndarray,
    strength: float,
    call_base: int,
) -> list[np.ndarray]:
    """Anchored batch editing without flow: inits are the raw input frames."""
    sched = state.schedule
    if inputs is None:
        inputs = originals
    edited = [np.asarray(first_frame_edit, dtype=np.float32)]
    t_count = len(originals)
    calls = 0
    anchor = (originals[0], first_frame_edit)
    for t0 in range(1, t_count, sched.window_width):
        t1 = min(t0 + sched.window_width, t_count)
        request = EditRequest(
            batch=[inputs[t] for t in range(t0, t1)],
            originals=[originals[t] for t in range(t0, t1)],
            instruction=state.instruction,
            anchor=anchor,
            strength=strength,
            steps=sched.anchor_steps,
            guidance=sched.guidance,
            seed=state.seed,
            call_id=call_base + calls,
        )
        calls += 1
        try:
            edited.extend(np.asarray(img, dtype=np.float32) for img in state.editor.edit_batch(request))
        except Exception as err:
            raise PipelineError(f"editor failed on view {view}, window [{t0}, {t1})") from err
    return edited


def _iteration_frame_independent(state: RunState, iteration: int) -> EditDataset:
    """Baseline: every frame edited alone, no anchor, no propagation."""
    scene = state.scene
    sched = state.schedule
    strength = anneal_strength(iteration, sched.n_iterations, sched)
    base = _call_base(state, iteration)
    images = {}
    counter = 0
    for v in range(scene.v_count):
        inputs = _render_inputs(state, [v], iteration)
        for t in range(scene.t_count):
            init = scene.frame(v, t).rgb if inputs is None else inputs[v][t]
            request = EditRequest(
                batch=[init],
                originals=[scene.frame(v, t).rgb],
                instruction=state.instruction,
                anchor=None,
                strength=strength,
                steps=sched.anchor_steps,
                guidance=sched.guidance,
                seed=state.seed,
                call_id=base + counter,
            )
            counter += 1
            images[(v, t)] = state.editor.edit_batch(request)[0]
    return propagate.dataset_from_images(
        images, scene.v_count, scene.t_count, key_views=(), version=iteration + 1
    )


def run_iteration(state: RunState, iteration: int) -> EditDataset:
    """Generate one full edited dataset; enforces the editor-call budget."""
    if state.mode not in MODES:
        raise PipelineError(f"unknown mode {state.mode!r}")
    calls_before = state.editor.calls
    if state.mode == "frame-independent":
        dataset = _iteration_frame_independent(state, iteration)
        budget = state.scene.v_count * state.scene.t_count
    else:
        dataset = _iteration_keyed(state, iteration)
        budget = editor_call_budget(
            state.schedule.key_count, state.scene.t_count, state.schedule.window_width
        )
    spent = state.editor.calls - calls_before
    if spent > budget:
        raise PipelineError(f"editor-call budget exceeded: {spent} > {budget}")
    return dataset


# ---------------------------------------------------------------------------
# Full runs


def make_flow_provider(scene: Scene4D, kind: str = "analytic") -> FlowCache:
    if kind == "analytic":
        return FlowCache(AnalyticFlowSource(scene))
    if kind == "blockmatch":
        return FlowCache(BlockMatchFlowSource(scene))
    raise ValueError(f"unknown flow estimator {kind!r}")


def _init_field(scene: Scene4D, schedule: Schedule, seed: int) -> field_mod.GridField4D:
    x, y, z = schedule.field_resolution
    fld = field_mod.GridField4D.create(
        (x, y, z, scene.t_count),
        field_mod.auto_bounds(scene),
        scene.spec.bg_color,
        scene.t_count,
    )
    originals = propagate.dataset_from_images(
        {(v, t): scene.frame(v, t).rgb for v in range(scene.v_count) for t in range(scene.t_count)},
        scene.v_count,
        scene.t_count,
    )
    field_mod.fit(
        fld, originals, scene.cameras,
        steps=schedule.init_fit_steps, lr=schedule.fit_lr, density_lr=schedule.fit_density_lr,
        rays_per_step=schedule.rays_per_step, n_samples=schedule.ray_samples,
        seed=seed,
    )
    return fld


@dataclass
class RunResult:
    field: field_mod.GridField4D
    log: RunLog
    datasets: list[EditDataset]
    schedule: Schedule
    mode: str
    seed: int


def _log_iteration(
    log: RunLog,
    state: RunState,
    iteration: int,
    dataset: EditDataset | None,
    calls: int,
    fit_report,
    started: float,
    error: str | None = None,
) -> None:
    entry = {
        "iteration": iteration,
        "mode": state.mode,
        "editor_calls": calls,
        "wall_time": time.monotonic() - started,
    }
    if dataset is not None:
        entry["key_views"] = list(dataset.key_views)
        report = metrics.consistency_report(dataset, state.scene, state.flow_provider)
        entry["consistency"] = report.to_dict()
    if fit_report is not None:
        entry["fit_loss"] = fit_report.final_loss
    if error is not None:
        entry["error"] = error
    log.append(entry)


def run_sequential(
    scene: Scene4D,
    editor: FrameEditor,
    schedule: Schedule,
    instruction: str,
    mode: str = "full",
    seed: int = 0,
    flow_kind: str = "analytic",
) -> RunResult:
    """Alternate dataset generation and field fitting in one thread."""
    schedule.validate()
    if mode == "one-shot-propagation":
        schedule = replace(schedule, n_iterations=min(schedule.n_iterations, 1))
    counting = CountingEditor(editor)
    flow_provider = make_flow_provider(scene, flow_kind)
    fld = _init_field(scene, schedule, seed)
    buffer = RenderBuffer(scene.cameras, schedule.ray_samples)
    buffer.publish(fld, 0)
    state = RunState(
        scene=scene, editor=counting, schedule=schedule, instruction=instruction,
        mode=mode, seed=seed, flow_provider=flow_provider, buffer=buffer,
    )
    log = RunLog()
    datasets: list[EditDataset] = []
    current: EditDataset | None = None
    for iteration in range(schedule.n_iterations):
        started = time.monotonic()
        calls_before = counting.calls
        try:
            candidate = run_iteration(state, iteration)
        except PipelineError as err:
            # The previous dataset and field stay in effect.
            _log_iteration(log, state, iteration, None, counting.calls - calls_before,
                           None, started, error=str(err))
            continue
        current = candidate
        datasets.append(current)
        report = field_mod.fit(
            fld, current, scene.cameras,
            steps=schedule.fit_steps, lr=schedule.fit_lr, density_lr=schedule.fit_density_lr,
            rays_per_step=schedule.rays_per_step, n_samples=schedule.ray_samples,
            seed=seed + iteration + 1,
        )
        buffer.publish(fld, iteration + 1)
        _log_iteration(log, state, iteration, current, counting.calls - calls_before,
                       report, started)
    if current is not None and schedule.final_fit_steps > 0:
        field_mod.fit(
            fld, current, scene.cameras,
            steps=schedule.final_fit_steps, lr=schedule.fit_lr, density_lr=schedule.fit_density_lr,
            rays_per_step=schedule.rays_per_step, n_samples=schedule.ray_samples,
            seed=seed + schedule.n_iterations + 1,
        )
    return RunResult(field=fld, log=log, datasets=datasets, schedule=schedule,
                     mode=mode, seed=seed)


def run_parallel(
    scene: Scene4D,
    editor: FrameEditor,
    schedule: Schedule,
    instruction: str,
    mode: str = "full",
    seed: int = 0,
    flow_kind: str = "analytic",
    trainer_chunk: int = 50,
) -> RunResult:
    """Run the trainer and the dataset generator as two workers.

    Worker A fits the field on the current dataset continuously, publishing
    field snapshots into the render buffer; worker B generates datasets from
    buffer renders and swaps them in atomically. Termination: B publishes
    n_iterations datasets, then A finishes with a convergence fit.
    """
    schedule.validate()
    if mode == "one-shot-propagation":
        schedule = replace(schedule, n_iterations=min(schedule.n_iterations, 1))
    counting = CountingEditor(editor)
    flow_provider = make_flow_provider(scene, flow_kind)
    fld = _init_field(scene, schedule, seed)
    buffer = RenderBuffer(scene.cameras, schedule.ray_samples)
    buffer.publish(fld, 0)
    slot = DatasetSlot()
    state = RunState(
        scene=scene, editor=counting, schedule=schedule, instruction=instruction,
        mode=mode, seed=seed, flow_provider=flow_provider, buffer=buffer,
    )
    log = RunLog()
    datasets: list[EditDataset] = []
    generator_done = threading.Event()
    errors: list[BaseException] = []

    def generator() -> None:
        try:
            for iteration in range(schedule.n_iterations):
                started = time.monotonic()
                calls_before = counting.calls
                try:
                    dataset = run_iteration(state, iteration)
                except PipelineError as err:
                    _log_iteration(log, state, iteration, None,
                                   counting.calls - calls_before, None, started,
                                   error=str(err))
                    continue
                datasets.append(dataset)
                slot.put(dataset, iteration + 1)
                _log_iteration(log, state, iteration, dataset,
                               counting.calls - calls_before, None, started)
        except BaseException as err:  # orderly shutdown with partial log
            errors.append(err)
        finally:
            generator_done.set()

    def trainer() -> None:
        try:
            trained_version = 0
            fit_seed = seed + 1
            current: EditDataset | None = None
            steps_done = 0
            while not (generator_done.is_set() and slot.get() is not None
                       and slot.get()[1] == trained_version and steps_done >= schedule.fit_steps) :
                latest = slot.get()
                if latest is not None and latest[1] != trained_version:
                    current, trained_version = latest
                    steps_done = 0
                if current is None:
                    # Nothing to train on yet; keep renders fresh.
                    if generator_done.is_set() and slot.get() is None:
                        break
                    time.sleep(0.002)
                    continue
                field_mod.fit(
                    fld, current, scene.cameras,
                    steps=min(trainer_chunk, max(schedule.fit_steps - steps_done, 1)),
                    lr=schedule.fit_lr, density_lr=schedule.fit_density_lr,
                    rays_per_step=schedule.rays_per_step,
                    n_samples=schedule.ray_samples,
                    seed=fit_seed,
                )
                fit_seed += 1
                steps_done += trainer_chunk
                buffer.publish(fld, trained_version)
            if current is not None and schedule.final_fit_steps > 0:
                field_mod.fit(
                    fld, current, scene.cameras,
                    steps=schedule.final_fit_steps, lr=schedule.fit_lr, density_lr=schedule.fit_density_lr,
                    rays_per_step=schedule.rays_per_step,
                    n_samples=schedule.ray_samples,
                    seed=seed + schedule.n_iterations + 1,
                )
                buffer.publish(fld, trained_version)
        except BaseException as err:
            errors.append(err)
            generator_done.set()

    threads = [threading.Thread(target=generator, name="generator"),
               threading.Thread(target=trainer, name="trainer")]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise PipelineError("worker failed; partial log retained") from errors[0]
    return RunResult(field=fld, log=log, datasets=datasets, schedule=schedule,
                     mode=mode, seed=seed)


def run(
    scene: Scene4D,
    editor: FrameEditor,
    schedule: Schedule,
    instruction: str,
    mode: str = "full",
    seed: int = 0,
    flow_kind: str = "analytic",
    parallel: bool = False,
) -> RunResult:
    runner = run_parallel if parallel else run_sequential
    return runner(scene, editor, schedule, instruction, mode=mode, seed=seed,
                  flow_kind=flow_kind)


# ---------------------------------------------------------------------------
# Run directory


def save_run(result: RunResult, out_dir: str | Path, config: dict | None = None) -> Path:
    """Write run.json, per-iteration dataset dumps, final field, log.jsonl."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    run_info = {
        "schedule": result.schedule.to_dict(),
        "mode": result.mode,
        "seed": result.seed,
    }
    if config:
        run_info["config"] = config
    (root / "run.json").write_text(json.dumps(run_info, sort_keys=True, indent=1))
    for dataset in result.datasets:
        propagate.save_dataset(dataset, root / f"iter_{dataset.version}")
    field_mod.save_field(result.field, root / "field_final")
    (root / "log.jsonl").write_text(result.log.to_jsonl())
    return root
