"""Trajectory error, timing benchmarks and the seeded synthetic experiments."""

from __future__ import annotations

import csv
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .gridmap import Pose2D
from .localization import (
    LocalizationConfig,
    NoiseParams,
    Trajectory,
    localize_frames,
)
from .matching import Method, make_kernel, match_template_parallel
from .rng import make_rng
from .synthdata import DegradationParams, SceneSpec, extract_local, gen_global, gen_sequence

EXPERIMENT_SEEDS = tuple(range(20))


@dataclass(frozen=True)
class RmseReport:
    method: str
    rmse: float
    per_frame_errors: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_rmse(estimate: Trajectory, truth: Trajectory, method: str = "") -> RmseReport:
    """Positional RMSE over frames paired by index; headings are ignored."""
    if estimate.frame_indices != truth.frame_indices:
        raise ValueError("frame-index mismatch between estimate and ground truth")
    if len(estimate) == 0:
        raise ValueError("cannot compute RMSE of an empty trajectory")
    diff = estimate.positions() - truth.positions()
    errors = np.hypot(diff[:, 0], diff[:, 1])
    rmse = math.sqrt(float(np.mean(errors**2)))
    return RmseReport(method, rmse, [float(e) for e in errors])


# ---------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class BenchReport:
    method: str
    map_size: tuple[int, int]
    template_size: tuple[int, int]
    workers: int
    wall_time: float
    placements_per_second: float

    @property
    def placements(self) -> int:
        return (self.map_size[0] - self.template_size[0] + 1) * (self.map_size[1] - self.template_size[1] + 1)


def bench_instance(map_size: tuple[int, int], template_size: tuple[int, int], seed: int = 0):
    """Random map and a template cut from it; sizes are (width, height)."""
    rng = make_rng(seed)
    img = rng.integers(0, 256, (map_size[1], map_size[0])).astype(np.uint8)
    tw, th = template_size
    u = int(rng.integers(0, map_size[0] - tw + 1))
    v = int(rng.integers(0, map_size[1] - th + 1))
    return img, img[v : v + th, u : u + tw].copy()


def run_bench(
    sizes: list[tuple[tuple[int, int], tuple[int, int]]],
    methods: list[str],
    workers_list: list[int],
    repetitions: int = 3,
    seed: int = 0,
) -> list[BenchReport]:
    """Median wall time of ``repetitions`` exhaustive searches per configuration.

    Methods are interleaved inside each repetition so slow drifts in machine
    load hit every method alike.  Each configuration is run once untimed
    first to exclude JIT compilation.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    reports = []
    for map_size, tpl_size in sizes:
        img, tpl = bench_instance(map_size, tpl_size, seed)
        kernel = make_kernel("corrected", tpl_size[0], tpl_size[1])
        configs = [(Method.parse(m), w) for w in workers_list for m in methods]
        small = img[: tpl_size[1] + 2, : tpl_size[0] + 2]
        for method, workers in configs:
            match_template_parallel(small, tpl, method, kernel, workers)
        times: dict[tuple[Method, int], list[float]] = {c: [] for c in configs}
        for _ in range(repetitions):
            for method, workers in configs:
                t0 = time.perf_counter()
                match_template_parallel(img, tpl, method, kernel, workers)
                times[(method, workers)].append(time.perf_counter() - t0)
        for (method, workers), ts in times.items():
            wall = statistics.median(ts)
            count = (map_size[0] - tpl_size[0] + 1) * (map_size[1] - tpl_size[1] + 1)
            reports.append(BenchReport(method.value, map_size, tpl_size, workers, wall, count / wall))
    return reports


def save_bench_csv(reports: list[BenchReport], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "map_w", "map_h", "tpl_w", "tpl_h", "workers", "wall_time", "placements_per_second"])
        for r in reports:
            writer.writerow([r.method, *r.map_size, *r.template_size, r.workers,
                             f"{r.wall_time:.6f}", f"{r.placements_per_second:.1f}"])


# ---------------------------------------------------------------------------
# seeded experiments

MATCH_TEMPLATE = 64
LOCALIZE_TEMPLATE = 64


def pathology_trial(
    seed: int,
    degrade: DegradationParams = DegradationParams(),
    size: int = 512,
    template: int = MATCH_TEMPLATE,
    workers: int = 1,
) -> dict:
    """One single-shot matching trial; returns each method's pixel distance from the truth."""
    global_map = gen_global(SceneSpec(seed=seed, width_px=size, height_px=size))
    rng = make_rng(seed, 100)
    u0, v0 = (int(x) for x in rng.integers(0, size - template + 1, 2))
    center = global_map.pixel_to_world(u0 + (template - 1) / 2.0, v0 + (template - 1) / 2.0)
    local = extract_local(global_map, Pose2D(*center, 0.0), template, template, degrade, seed)
    kernel = make_kernel("corrected", template, template)
    out = {"seed": seed, "truth": [u0, v0]}
    for method in Method:
        res = match_template_parallel(global_map, local, method, kernel, workers)
        out[method.value] = {
            "best": [res.best_u, res.best_v],
            "error_px": float(math.hypot(res.best_u - u0, res.best_v - v0)),
        }
    return out


@dataclass(frozen=True)
class LocalizationTrial:
    rmse: RmseReport
    spreads: list[float]
    final_error: float


def localization_trial(
    seed: int,
    method: str = "WNCC",
    n_frames: int = 50,
    degrade: DegradationParams = DegradationParams(),
    odom_noise: NoiseParams = NoiseParams(sigma_pos=0.02, sigma_rot=math.radians(0.5)),
    particles: int = 1000,
    prior_offset: float = 0.5,
    **config_overrides,
) -> LocalizationTrial:
    """Run the particle filter on one seeded synthetic sequence."""
    seq = gen_sequence(SceneSpec(seed=seed), n_frames=n_frames, size=(LOCALIZE_TEMPLATE, LOCALIZE_TEMPLATE),
                       degrade=degrade, odom_noise=odom_noise, seed=seed)
    start = seq.truth.poses[0]
    rng = make_rng(seed, 200)
    angle = rng.uniform(-math.pi, math.pi)
    config = LocalizationConfig(
        particles=particles,
        seed=seed,
        method=method,
        prior_x=start.x + prior_offset * math.cos(angle),
        prior_y=start.y + prior_offset * math.sin(angle),
        prior_heading=start.heading,
        **config_overrides,
    )
    states = list(localize_frames(seq.global_map, seq.frames, config))
    estimate = Trajectory.from_poses([s.estimate for s in states])
    report = compute_rmse(estimate, seq.truth, method)
    return LocalizationTrial(report, [s.spread for s in states], report.per_frame_errors[-1])
