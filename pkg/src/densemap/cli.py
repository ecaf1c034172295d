"""Command-line entry point: ``densemap run|mesh|eval|info``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config
from .fusion import collapse_all
from .meshing import extract_mesh, read_ply, surface_error, write_ply
from .pipeline import report_lines, run_scenario, timing_lines, write_outputs
from .sparse import GraphError, NotPositiveDefiniteError, SingularSystemError
from .sparse.covariance import IllConditionedPairError
from .submaps import MANIFEST_NAME, SUBMAPS_NAME, load_collection
from .tsdf import load_submaps
from .world import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_BAD_INPUT = 1
EXIT_NUMERICAL = 2

log = logging.getLogger("densemap")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densemap", description="TSDF submap mapping with covisibility-gated fusion")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario end to end")
    r.add_argument("scenario", type=Path)
    r.add_argument("config", type=Path, nargs="?")
    r.add_argument("-o", "--output", type=Path)
    r.add_argument("--voxel-size", type=float)
    r.add_argument("--truncation", type=float)
    r.add_argument("--mode", choices=("simple", "fast"))
    r.add_argument("--threads", type=int)
    r.add_argument("--time-budget", type=float, help="seconds per frame")
    r.add_argument("--fusion", dest="fusion", action="store_true", default=None)
    r.add_argument("--no-fusion", dest="fusion", action="store_false")
    r.add_argument("--naive", action="store_true", default=None, help="single global volume baseline")
    r.add_argument("--compare-integrators", action="store_true", default=None)
    r.add_argument("--min-covisibility", type=int)
    r.add_argument("--min-quality", type=float)
    r.add_argument("--max-keyframes-per-submap", type=int)
    r.add_argument("--max-frames", type=int)

    m = sub.add_parser("mesh", help="collapse a saved collection and write its mesh")
    m.add_argument("manifest", type=Path)
    m.add_argument("-o", "--output", type=Path)
    m.add_argument("--ascii", action="store_true")

    e = sub.add_parser("eval", help="surface error of a mesh against a scenario's analytic scene")
    e.add_argument("mesh", type=Path)
    e.add_argument("scene", type=Path)

    i = sub.add_parser("info", help="summarize a submap file or collection")
    i.add_argument("submap", type=Path)
    return p


def _apply_overrides(cfg, args) -> None:
    pairs = [
        ("voxel_size", args.voxel_size, cfg, "voxel_size"),
        ("truncation", args.truncation, cfg.integrator, "truncation"),
        ("mode", args.mode, cfg.integrator, "mode"),
        ("threads", args.threads, cfg, "thread_count"),
        ("time_budget", args.time_budget, cfg.integrator, "time_budget"),
        ("fusion", args.fusion, cfg, "fusion_enabled"),
        ("naive", args.naive, cfg, "naive"),
        ("compare", args.compare_integrators, cfg, "compare_integrators"),
        ("min_cov", args.min_covisibility, cfg.fusion, "min_covisibility"),
        ("min_q", args.min_quality, cfg.fusion, "min_quality"),
        ("max_kf", args.max_keyframes_per_submap, cfg.spawn, "max_keyframes_per_submap"),
        ("output", args.output, cfg, "output_dir"),
    ]
    for _, value, target, attr in pairs:
        if value is not None:
            setattr(target, attr, value)
    cfg.validate()


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    sc = load_scenario(args.scenario)
    res = run_scenario(sc, cfg, args.max_frames)
    out = write_outputs(res, cfg.output_dir)
    for line in report_lines(res) + timing_lines(res):
        print(line)
    print(f"output={out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    coll = load_collection(args.manifest)
    if not len(coll):
        raise ValueError("collection is empty")
    mesh = extract_mesh(collapse_all(coll), global_frame=True)
    base = args.manifest if args.manifest.is_dir() else args.manifest.parent
    out = args.output or base / "mesh.ply"
    write_ply(out, mesh, binary=not args.ascii)
    print(f"vertices={len(mesh.vertices)}")
    print(f"triangles={len(mesh.triangles)}")
    print(f"output={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh = read_ply(args.mesh)
    sc = load_scenario(args.scene)
    if sc.scene is None:
        raise ScenarioError("scenario declares no analytic primitives")
    if mesh.is_empty:
        raise ValueError("mesh has no vertices")
    err = surface_error(mesh, sc.scene)
    print(f"rmse={err.rmse:.9g}")
    print(f"median={err.median:.9g}")
    print(f"vertices={len(mesh.vertices)}")
    return EXIT_OK


def cmd_info(args) -> int:
    path = args.submap
    if path.is_dir() or path.name == MANIFEST_NAME:
        coll = load_collection(path)
        submaps = [coll[k] for k in sorted(coll.submaps)]
    else:
        submaps = load_submaps(path)
    print(f"submaps={len(submaps)}")
    print(f"total_blocks={sum(s.block_count() for s in submaps)}")
    for s in submaps:
        t = " ".join(f"{v:.6g}" for v in s.frame.to_xyzquat())
        print(f"submap {s.id} blocks={s.block_count()} voxel_size={s.voxel_size:g} "
              f"anchor={s.anchor_keyframe} frame={t}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "mesh": cmd_mesh, "eval": cmd_eval, "info": cmd_info}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SingularSystemError, NotPositiveDefiniteError, IllConditionedPairError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ScenarioError, GraphError, ValueError, KeyError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
