"""Command-line driver: scene generation, pipeline runs, evaluation, dumps.

Subcommands:
  gen   generate and save a synthetic scene
  run   execute the editing pipeline in a chosen mode into a run directory
  eval  consistency/quality reports for one or two run directories
  dump  render one (view, time) from a field checkpoint to PNG

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Errors are
also emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import arrayio, field as field_mod, metrics, pipeline, propagate, scene as scene_mod
from .editor import JitterEditor, PaletteEditor, ToyAttentionEditor, default_registry, InstructionRegistry
from .errors import Pseudo4DError

EDITORS = ("palette", "jitter", "attention")


class ConfigError(Pseudo4DError):
    """Bad flags, config files, or on-disk inputs."""


@dataclass
class RunConfig:
    """Effective configuration of one pipeline run."""

    scene: str = ""
    out: str = ""
    mode: str = "full"
    editor: str = "jitter"
    instruction: str = "sepia"
    iters: int = 4
    window: int = 8
    keys: int = 2
    seed: int = 0
    parallel: bool = False
    flow: str = "analytic"
    guidance_preset: str = "object"
    fit_steps: int = 2000
    final_fit_steps: int = 2000
    init_fit_steps: int = 800
    rays_per_step: int = 2048
    ray_samples: int = 32
    instructions_file: str = ""

    def validate(self) -> None:
        if not self.scene:
            raise ConfigError("a scene directory is required (--scene)")
        if not self.out:
            raise ConfigError("an output directory is required (--out)")
        if self.mode not in pipeline.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {pipeline.MODES}")
        if self.editor not in EDITORS:
            raise ConfigError(f"unknown editor {self.editor!r}; choose from {EDITORS}")
        if self.flow not in ("analytic", "blockmatch"):
            raise ConfigError(f"unknown flow estimator {self.flow!r}")
        self.schedule().validate()

    def schedule(self) -> pipeline.Schedule:
        try:
            return pipeline.Schedule(
                n_iterations=self.iters,
                window_width=self.window,
                key_count=self.keys,
                guidance_preset=self.guidance_preset,
                fit_steps=self.fit_steps,
                final_fit_steps=self.final_fit_steps,
                init_fit_steps=self.init_fit_steps,
                rays_per_step=self.rays_per_step,
                ray_samples=self.ray_samples,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @staticmethod
    def from_sources(config_path: str | None, overrides: dict) -> "RunConfig":
        known = {f.name for f in dataclass_fields(RunConfig)}
        merged: dict = {}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: invalid JSON: {err.msg}") from err
            if "config" in data and isinstance(data["config"], dict):
                data = data["config"]  # accept a previous run.json verbatim
            unknown = set(data) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            merged.update(data)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**merged)
        cfg.validate()
        return cfg


def _build_editor(cfg: RunConfig):
    registry = (
        InstructionRegistry.from_json(cfg.instructions_file)
        if cfg.instructions_file
        else default_registry()
    )
    if cfg.editor == "palette":
        return PaletteEditor(registry)
    if cfg.editor == "jitter":
        return JitterEditor(registry)
    return ToyAttentionEditor(registry)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args: argparse.Namespace) -> int:
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise ConfigError(f"scene spec not found: {spec_path}")
        try:
            spec = scene_mod.SceneSpec.from_dict(json.loads(spec_path.read_text()))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{spec_path}: invalid JSON: {err.msg}") from err
    else:
        spec = scene_mod.default_scene_spec(
            v_count=args.views, t_count=args.frames, size=args.size, seed=args.seed
        )
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    scene = scene_mod.generate_scene(spec)
    out = scene_mod.save_scene(scene, args.out)
    print(f"scene written to {out} ({spec.v_count} views x {spec.t_count} frames)")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "scene": args.scene,
        "out": args.out,
        "mode": args.mode,
        "editor": args.editor,
        "instruction": args.instruction,
        "iters": args.iters,
        "window": args.window,
        "keys": args.keys,
        "seed": args.seed,
        "parallel": True if args.parallel else None,
        "flow": args.flow,
        "fit_steps": args.fit_steps,
        "final_fit_steps": args.final_fit_steps,
        "init_fit_steps": args.init_fit_steps,
        "rays_per_step": args.rays_per_step,
        "ray_samples": args.ray_samples,
    }
    cfg = RunConfig.from_sources(args.config, overrides)
    scene_dir = Path(cfg.scene)
    if not scene_dir.exists():
        raise ConfigError(f"scene directory not found: {scene_dir}")
    scene = scene_mod.load_scene(scene_dir)
    editor = _build_editor(cfg)
    result = pipeline.run(
        scene,
        editor,
        cfg.schedule(),
        cfg.instruction,
        mode=cfg.mode,
        seed=cfg.seed,
        flow_kind=cfg.flow,
        parallel=cfg.parallel,
    )
    out = pipeline.save_run(result, cfg.out, config=asdict(cfg))
    print(f"run written to {out} ({len(result.datasets)} datasets, mode={cfg.mode})")
    return 0


def _load_run_dataset(run_dir: Path) -> propagate.EditDataset:
    iters = sorted(run_dir.glob("iter_*"), key=lambda p: int(p.name.split("_")[1]))
    if not iters:
        raise ConfigError(f"{run_dir} holds no iteration datasets")
    return propagate.load_dataset(iters[-1])


def _run_report(run_dir: Path, scene: scene_mod.Scene4D) -> dict:
    dataset = _load_run_dataset(run_dir)
    flow_provider = pipeline.make_flow_provider(scene, "analytic")
    report = metrics.consistency_report(dataset, scene, flow_provider).to_dict()
    field_dir = run_dir / "field_final"
    if field_dir.exists():
        fld = field_mod.load_field(field_dir)
        stride = max(1, scene.t_count // 5)
        psnrs = []
        ssims = []
        for v in range(scene.v_count):
            for t in range(0, scene.t_count, stride):
                rendered = field_mod.render(fld, scene.camera(v), t)
                psnrs.append(metrics.psnr(rendered, dataset.images[(v, t)]))
                ssims.append(metrics.ssim(rendered, dataset.images[(v, t)]))
        report["render_psnr_vs_dataset"] = float(np.mean(psnrs))
        report["render_ssim_vs_dataset"] = float(np.mean(ssims))
    return report


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise ConfigError(f"run directory not found: {run_dir}")
    scene_dir = Path(args.scene)
    if not scene_dir.exists():
        raise ConfigError(f"scene directory not found: {scene_dir}")
    scene = scene_mod.load_scene(scene_dir)

    results = {"run": _run_report(run_dir, scene)}
    if args.run_b:
        run_b = Path(args.run_b)
        if not run_b.exists():
            raise ConfigError(f"run directory not found: {run_b}")
        results["run_b"] = _run_report(run_b, scene)
        ds_a = _load_run_dataset(run_dir)
        ds_b = _load_run_dataset(run_b)
        pair_psnr = [
            metrics.psnr(ds_a.images[key], ds_b.images[key]) for key in sorted(ds_a.images)
        ]
        results["pairwise_dataset_psnr"] = float(np.mean(pair_psnr))

    text = json.dumps(results, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    rows = []
    for name, rep in results.items():
        if isinstance(rep, dict):
            for key, value in sorted(rep.items()):
                rows.append((f"{name}.{key}", value))
        else:
            rows.append((name, rep))
    width = max(len(r[0]) for r in rows)
    for key, value in rows:
        print(f"{key.ljust(width)}  {value:.6g}" if isinstance(value, float) else f"{key.ljust(width)}  {value}")
    return 0


def cmd_dump(args: argparse.Namespace) -> int:
    field_dir = Path(args.field)
    if (field_dir / "field_final").exists():
        field_dir = field_dir / "field_final"
    if not field_dir.exists():
        raise ConfigError(f"field checkpoint not found: {field_dir}")
    fld = field_mod.load_field(field_dir)
    scene_dir = Path(args.scene)
    if not scene_dir.exists():
        raise ConfigError(f"scene directory not found: {scene_dir}")
    scene = scene_mod.load_scene(scene_dir)
    if not (0 <= args.view < scene.v_count):
        raise ConfigError(f"view {args.view} outside [0, {scene.v_count})")
    if not (0 <= args.time < fld.t_count):
        raise ConfigError(f"time {args.time} outside [0, {fld.t_count})")
    image = field_mod.render(fld, scene.camera(args.view), args.time)
    arrayio.save_png(args.out, image)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pseudo4d",
        description="Instruction-driven editing of synthetic 4D scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic scene")
    gen.add_argument("--spec", help="scene spec JSON (omit for the default scene)")
    gen.add_argument("--views", type=int, default=5)
    gen.add_argument("--frames", type=int, default=51)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    run = sub.add_parser("run", help="run the editing pipeline")
    run.add_argument("--scene")
    run.add_argument("--out")
    run.add_argument("--config", help="JSON config (flags override it)")
    run.add_argument("--mode", choices=pipeline.MODES)
    run.add_argument("--editor", choices=EDITORS)
    run.add_argument("--instruction")
    run.add_argument("--iters", type=int)
    run.add_argument("--window", type=int, help="sliding window width B")
    run.add_argument("--keys", type=int, help="key view count n")
    run.add_argument("--seed", type=int)
    run.add_argument("--parallel", action="store_true", default=None)
    run.add_argument("--flow", choices=("analytic", "blockmatch"))
    run.add_argument("--fit-steps", dest="fit_steps", type=int)
    run.add_argument("--final-fit-steps", dest="final_fit_steps", type=int)
    run.add_argument("--init-fit-steps", dest="init_fit_steps", type=int)
    run.add_argument("--rays-per-step", dest="rays_per_step", type=int)
    run.add_argument("--ray-samples", dest="ray_samples", type=int)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate run directories")
    ev.add_argument("--run", required=True)
    ev.add_argument("--run-b", dest="run_b")
    ev.add_argument("--scene", required=True)
    ev.add_argument("--out", help="write the report JSON here")
    ev.set_defaults(func=cmd_eval)

    dump = sub.add_parser("dump", help="render a (view, time) from a checkpoint")
    dump.add_argument("--field", required=True, help="field checkpoint or run directory")
    dump.add_argument("--scene", required=True)
    dump.add_argument("--view", type=int, required=True)
    dump.add_argument("--time", type=int, required=True)
    dump.add_argument("--out", required=True)
    dump.set_defaults(func=cmd_dump)

    return parser


def _emit_error(kind: str, err: BaseException) -> None:
    payload = {"error": {"kind": kind, "type": type(err).__name__, "message": str(err)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code) if err.code else 0
    try:
        return args.func(args)
    except ConfigError as err:
        _emit_error("config", err)
        return 1
    except Pseudo4DError as err:
        _emit_error("runtime", err)
        return 2
    except (ValueError, OSError) as err:
        _emit_error("runtime", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
