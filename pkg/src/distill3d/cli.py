"""Command-line frontend.

Subcommands: ``generate`` (full two-stage run), ``stage1``, ``stage2``,
``render`` (turntable from exported artifacts), ``check`` (invariant
battery), ``report`` (figures + summary from a metrics file).

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, Distill3DError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distill3d",
                     description="Two-stage score-distillation 3D synthesis.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="full two-stage run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None,
                   help="render worker threads (determinism requires 1)")

    p = sub.add_parser("stage1", help="coarse NeRF stage only")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="stage-1 checkpoint directory")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("stage2", help="mesh refinement from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--from", dest="from_ckpt", required=True,
                   help="checkpoint directory (nerf, geometry, or texture tag)")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("render", help="turntable renders of an exported mesh")
    p.add_argument("--mesh", required=True, help="OBJ produced by this tool")
    p.add_argument("--texture", required=True, help="GRID3 color checkpoint")
    p.add_argument("--out", default=None, help="output directory (default: mesh dir)")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--elevation", type=float, default=15.0)

    sub.add_parser("check", help="run the built-in invariant suite")

    p = sub.add_parser("report", help="figures + summary.csv from metrics.jsonl")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (default: <metrics dir>/report)")
    return parser


def _cmd_generate(args) -> int:
    from .config import load_config
    from .pipeline import generate
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.workers = max(1, args.workers)
    result = generate(cfg)
    print(f"wrote {result.obj_path} and {result.ply_path}")
    return EXIT_OK


def _cmd_stage1(args) -> int:
    from .config import load_config
    from .pipeline import run_stage1
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.workers = max(1, args.workers)
    result = run_stage1(cfg, cfg.output_dir, resume=args.resume)
    print(f"stage1 checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def _cmd_stage2(args) -> int:
    from .config import load_config
    from .pipeline import (default_iso, generate, load_checkpoint, nerf_to_tetgrid,
                           run_stage2)
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg.workers = max(1, args.workers)
    ckpt = load_checkpoint(args.from_ckpt)
    if ckpt.tag == "nerf":
        iso = cfg.stage2.iso if cfg.stage2.iso is not None \
            else default_iso(cfg.stage1.ray_steps)
        tet = nerf_to_tetgrid(ckpt.grids["density"], cfg.stage2.tet_resolution, iso)
        texture = ckpt.grids["color"].copy()
        result = run_stage2(cfg, tet, texture, cfg.output_dir)
    else:
        result = run_stage2(cfg, ckpt.tet, ckpt.grids["texture"], cfg.output_dir,
                            resume=ckpt)
    print(f"wrote {result.obj_path} and {result.ply_path}")
    return EXIT_OK


def _cmd_render(args) -> int:
    from .camera import CameraPolicy
    from .fields import load_grid3
    from .pipeline import emit_turntable
    from .rasterize import rasterize
    from .tetmesh import load_obj
    mesh_path = Path(args.mesh)
    if not mesh_path.is_file():
        raise ConfigError(f"mesh file not found: {mesh_path}")
    tex_path = Path(args.texture)
    if not tex_path.is_file():
        raise ConfigError(f"texture file not found: {tex_path}")
    mesh = load_obj(mesh_path)
    texture = load_grid3(tex_path)
    out_dir = Path(args.out) if args.out else mesh_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    policy = CameraPolicy(width=args.size, height=args.size,
                          default_elevation=args.elevation)
    paths = emit_turntable(out_dir, "turntable", policy,
                           lambda cam: rasterize(mesh, texture, cam).rgb,
                           views=args.views)
    print(f"wrote {len(paths)} views to {out_dir}")
    return EXIT_OK


def _cmd_check(_args) -> int:
    from .selfcheck import run_checks
    return EXIT_OK if run_checks() else EXIT_RUNTIME


def _cmd_report(args) -> int:
    from .report import render_report
    metrics = Path(args.metrics)
    out_dir = Path(args.out) if args.out else metrics.parent / "report"
    paths = render_report(metrics, out_dir)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


_COMMANDS = {
    "generate": _cmd_generate,
    "stage1": _cmd_stage1,
    "stage2": _cmd_stage2,
    "render": _cmd_render,
    "check": _cmd_check,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Distill3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
