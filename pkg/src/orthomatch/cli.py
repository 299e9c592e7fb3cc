"""Command-line front end: ``orthomatch {match,localize,synth,bench,eval}``.

Every subcommand prints a JSON document with sorted keys on stdout and exits
non-zero with a one-line message on stderr when something goes wrong.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from .evaluation import (
    EXPERIMENT_SEEDS,
    compute_rmse,
    localization_trial,
    pathology_trial,
    run_bench,
    save_bench_csv,
)
from .gridmap import load_map
from .localization import (
    LocalizationConfig,
    NoiseParams,
    SwarmLost,
    load_manifest,
    load_trajectory,
    localize_frames,
    Trajectory,
    TrajectoryEntry,
    save_trajectory,
)
from .matching import (
    DegeneratePatch,
    KernelKind,
    Method,
    NoValidPlacement,
    make_kernel,
    match_template_parallel,
    save_heatmap,
    save_score_field,
)
from .synthdata import DegradationParams, SceneSpec, gen_sequence, save_sequence


class CliError(Exception):
    pass


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _write_json(doc: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prefix(args, default: str) -> Path:
    out = Path(args.out or default)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _with_suffix(prefix: Path, suffix: str) -> Path:
    return prefix.with_name(prefix.name + suffix)


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _size_pair(text: str):
    try:
        a, b = text.split(":")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MAPWxMAPH:TPLWxTPLH, got {text!r}") from None
    return _size(a), _size(b)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_match(args) -> dict:
    global_map = load_map(args.global_map, args.resolution)
    template = load_map(args.template, args.resolution)
    method = Method.parse(args.method)
    kernel = None
    if method is Method.WNCC:
        kernel = make_kernel(args.kernel, template.width_px, template.height_px)
    t0 = time.perf_counter()
    res = match_template_parallel(global_map, template, method, kernel, args.workers or 1)
    wall = time.perf_counter() - t0
    prefix = _prefix(args, "match")
    save_heatmap(res.field, _with_suffix(prefix, ".heat.pgm"))
    if args.color:
        save_heatmap(res.field, _with_suffix(prefix, ".heat.ppm"), color=True)
    save_score_field(res.field, _with_suffix(prefix, ".sfld"))
    doc = {"best_u": res.best_u, "best_v": res.best_v, "best_score": res.best_score,
           "method": method.value, "wall_time": wall}
    _write_json(doc, _with_suffix(prefix, ".json"))
    return doc


def cmd_localize(args) -> dict:
    global_map = load_map(args.global_map, args.resolution)
    frames = load_manifest(args.manifest, args.resolution)
    config = LocalizationConfig.load(args.config) if args.config else LocalizationConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    prefix = _prefix(args, "localize")
    states = list(localize_frames(global_map, frames, config))
    traj = Trajectory(tuple(TrajectoryEntry(s.frame_index, s.estimate) for s in states))
    save_trajectory(traj, _with_suffix(prefix, ".trajectory.csv"))
    with open(_with_suffix(prefix, ".spread.csv"), "w") as fh:
        fh.write("frame,spread\n")
        for s in states:
            fh.write(f"{s.frame_index},{s.spread!r}\n")
    doc = {"frames": len(states), "method": config.method, "final": asdict(traj.poses[-1])}
    if args.truth and os.path.exists(args.truth):
        report = compute_rmse(traj, load_trajectory(args.truth), config.method)
        _write_json(report.to_dict(), _with_suffix(prefix, ".rmse.json"))
        doc["rmse"] = report.rmse
    return doc


def cmd_synth(args) -> dict:
    seed = args.seed if args.seed is not None else 0
    scene = SceneSpec(seed=seed, width_px=args.scene_size[0], height_px=args.scene_size[1])
    degrade = DegradationParams.identity() if args.clean else DegradationParams()
    odom = NoiseParams.zero() if args.clean else NoiseParams(args.odom_sigma_pos, math.radians(args.odom_sigma_rot))
    seq = gen_sequence(scene, args.frames, args.step, args.local_size, degrade, odom, seed)
    generator = {"frames": args.frames, "step": args.step, "local_size": list(args.local_size),
                 "degrade": asdict(degrade), "odometry_noise": asdict(odom)}
    paths = save_sequence(seq, args.out or "synth", generator, args.particles)
    return {k: str(v) for k, v in paths.items()} | {"frames": len(seq.frames)}


def cmd_bench(args) -> dict:
    workers = [int(w) for w in _csv_list(args.workers_list)] if args.workers_list else [args.workers or 1]
    reports = run_bench(args.size or [((512, 512), (64, 64))], _csv_list(args.methods), workers,
                        args.repetitions, args.seed or 0)
    out = args.out or "bench.csv"
    save_bench_csv(reports, out)
    return {"csv": str(out), "reports": [
        {"method": r.method, "map_size": list(r.map_size), "template_size": list(r.template_size),
         "workers": r.workers, "wall_time": r.wall_time, "placements_per_second": r.placements_per_second}
        for r in reports]}


def cmd_eval(args) -> dict:
    seeds = EXPERIMENT_SEEDS[: args.seeds] if args.seed is None else (args.seed,)
    if args.experiment == "rmse":
        if not (args.estimate and args.truth):
            raise CliError("eval rmse needs --estimate and --truth")
        report = compute_rmse(load_trajectory(args.estimate), load_trajectory(args.truth))
        doc = report.to_dict()
    elif args.experiment == "pathology":
        doc = {"trials": [pathology_trial(s, workers=args.workers or 1) for s in seeds]}
    else:
        trials = []
        for s in seeds:
            row = {"seed": s}
            for method in _csv_list(args.methods):
                t = localization_trial(s, method, workers=args.workers or 1)
                row[method] = {"rmse": t.rmse.rmse, "final_error": t.final_error, "spreads": t.spreads}
            trials.append(row)
        doc = {"trials": trials}
    if args.out:
        _write_json(doc, Path(args.out))
    return doc


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="RNG seed")
    parser.add_argument("--workers", type=int, default=default, help="worker threads")
    parser.add_argument("--out", default=default, help="output path or prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthomatch", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="exhaustive template search with heatmap output")
    p.add_argument("global_map")
    p.add_argument("template")
    p.add_argument("--method", default="WNCC", choices=[m.value for m in Method])
    p.add_argument("--kernel", default=KernelKind.CORRECTED.value, choices=[k.value for k in KernelKind])
    p.add_argument("--resolution", type=float, default=0.1)
    p.add_argument("--color", action="store_true", help="also write a black-red-yellow-white PPM heatmap")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("localize", help="particle-filter replay of a frame manifest")
    p.add_argument("global_map")
    p.add_argument("manifest")
    p.add_argument("--config", help="filter config JSON")
    p.add_argument("--truth", help="ground-truth trajectory CSV")
    p.add_argument("--resolution", type=float, default=0.1)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("synth", help="generate a synthetic sequence directory")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--local-size", type=_size, default=(64, 64))
    p.add_argument("--scene-size", type=_size, default=(512, 512))
    p.add_argument("--odom-sigma-pos", type=float, default=0.02)
    p.add_argument("--odom-sigma-rot", type=float, default=0.5, help="degrees")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--clean", action="store_true", help="no degradation and exact odometry")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="median wall time per method and worker count")
    p.add_argument("--size", type=_size_pair, action="append", help="MAPWxMAPH:TPLWxTPLH (repeatable)")
    p.add_argument("--methods", default="SAD,SSD,NCC,WNCC")
    p.add_argument("--workers-list", help="comma-separated worker counts")
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="seeded experiments and trajectory RMSE")
    p.add_argument("experiment", choices=["pathology", "localization", "rmse"])
    p.add_argument("--seeds", type=int, default=len(EXPERIMENT_SEEDS))
    p.add_argument("--methods", default="NCC,WNCC")
    p.add_argument("--estimate")
    p.add_argument("--truth")
    p.set_defaults(func=cmd_eval)

    for p in sub.choices.values():
        _global_flags(p, suppress=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        doc = args.func(args)
    except SwarmLost as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CliError, DegeneratePatch, NoValidPlacement, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(doc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
