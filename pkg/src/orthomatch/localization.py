"""Monte Carlo localization of a ground robot inside an aerial orthomosaic.

Each frame runs: odometry motion update, template-correlation weighting of
every particle, pose estimate, then roulette-wheel resampling with pose
jitter.  Particles live in world meters; heading 0 points along +u of the
map and positive rotation turns +u toward +v.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import _kernels
from .gridmap import DEFAULT_RESOLUTION, OrthoMap, Pose2D, load_map, normalize_angle, normalize_angles, to_grayscale
from .matching import KernelKind, Method, WeightKernel, as_kernel_image, make_kernel
from .rng import make_rng, rng_from_state

EPS_CONFIDENCE = 1e-6


class SwarmLost(RuntimeError):
    """No particle produced a scoreable placement."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass(frozen=True)
class OdometryDelta:
    dx: float = 0.0  # forward, meters
    dy: float = 0.0  # left, meters
    dtheta: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise ValueError("odometry components must be finite")


@dataclass(frozen=True)
class NoiseParams:
    """Resampling jitter (``sigma_*``) and motion noise (``motion_sigma_*``).

    Motion noise falls back to the resampling values when left unset.
    """

    sigma_pos: float = 0.1
    sigma_rot: float = math.radians(2.0)
    motion_sigma_pos: float | None = None
    motion_sigma_rot: float | None = None

    def __post_init__(self):
        for name in ("sigma_pos", "sigma_rot", "motion_sigma_pos", "motion_sigma_rot"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def motion_pos(self) -> float:
        return self.sigma_pos if self.motion_sigma_pos is None else self.motion_sigma_pos

    @property
    def motion_rot(self) -> float:
        return self.sigma_rot if self.motion_sigma_rot is None else self.motion_sigma_rot

    @classmethod
    def zero(cls) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Particle:
    pose: Pose2D
    weight: float


@dataclass(frozen=True, eq=False)
class ParticleSwarm:
    """Particles stored column-wise; ``rng_state`` is the Philox state to draw from next."""

    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    weight: np.ndarray
    rng_state: dict

    def __post_init__(self):
        n = len(self.x)
        if n < 1 or not (len(self.y) == len(self.heading) == len(self.weight) == n):
            raise ValueError("swarm arrays must be non-empty and equally sized")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise ValueError("particle weights must be finite and >= 0")
        for name in ("x", "y", "heading", "weight"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(Pose2D(float(x), float(y), float(h)), float(w))
            for x, y, h, w in zip(self.x, self.y, self.heading, self.weight)
        ]

    def rng(self) -> np.random.Generator:
        return rng_from_state(self.rng_state)

    def replace(self, rng: np.random.Generator | None = None, **arrays) -> "ParticleSwarm":
        state = self.rng_state if rng is None else rng.bit_generator.state
        values = {"x": self.x, "y": self.y, "heading": self.heading, "weight": self.weight}
        values.update(arrays)
        return ParticleSwarm(rng_state=state, **values)

    def spread(self) -> float:
        """Weighted positional standard deviation, ``sqrt(var_x + var_y)``."""
        w = self.weight / self.weight.sum()
        mx, my = np.dot(w, self.x), np.dot(w, self.y)
        var = np.dot(w, (self.x - mx) ** 2) + np.dot(w, (self.y - my) ** 2)
        return float(math.sqrt(max(var, 0.0)))

    def equals(self, other: "ParticleSwarm") -> bool:
        return (
            all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("x", "y", "heading", "weight"))
            and json.dumps(self.rng_state, sort_keys=True, default=str)
            == json.dumps(other.rng_state, sort_keys=True, default=str)
        )


@dataclass(frozen=True)
class TrajectoryEntry:
    frame_index: int
    pose: Pose2D


@dataclass(frozen=True)
class Trajectory:
    entries: tuple[TrajectoryEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        idx = [e.frame_index for e in entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("trajectory frame indices must be strictly increasing")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_poses(cls, poses: Iterable[Pose2D], start: int = 0) -> "Trajectory":
        return cls(tuple(TrajectoryEntry(i, p) for i, p in enumerate(poses, start)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TrajectoryEntry]:
        return iter(self.entries)

    @property
    def frame_indices(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    @property
    def poses(self) -> list[Pose2D]:
        return [e.pose for e in self.entries]

    def positions(self) -> np.ndarray:
        return np.array([[e.pose.x, e.pose.y] for e in self.entries]).reshape(-1, 2)


def save_trajectory(traj: Trajectory, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "x", "y", "heading"])
        for e in traj:
            writer.writerow([e.frame_index, repr(float(e.pose.x)), repr(float(e.pose.y)), repr(float(e.pose.heading))])


def load_trajectory(path: str | os.PathLike) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame", "x", "y", "heading"]:
            raise ValueError(f"unexpected trajectory CSV header: {reader.fieldnames}")
        entries = [
            TrajectoryEntry(int(r["frame"]), Pose2D(float(r["x"]), float(r["y"]), float(r["heading"])))
            for r in reader
        ]
    return Trajectory(tuple(entries))


# ---------------------------------------------------------------------------
# filter steps


def compose(pose: Pose2D, delta: OdometryDelta) -> Pose2D:
    """Apply a robot-frame displacement to ``pose``."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    return Pose2D(
        pose.x + c * delta.dx - s * delta.dy,
        pose.y + s * delta.dx + c * delta.dy,
        pose.heading + delta.dtheta,
    )


def relative_delta(a: Pose2D, b: Pose2D) -> OdometryDelta:
    """The robot-frame displacement taking ``a`` to ``b``."""
    c, s = math.cos(a.heading), math.sin(a.heading)
    ex, ey = b.x - a.x, b.y - a.y
    return OdometryDelta(c * ex + s * ey, -s * ex + c * ey, normalize_angle(b.heading - a.heading))


def integrate_odometry(start: Pose2D, deltas: Sequence[OdometryDelta]) -> list[Pose2D]:
    poses = [start]
    for d in deltas:
        poses.append(compose(poses[-1], d))
    return poses


def init_swarm(
    prior: Pose2D, half_width: float, n: int, seed: int, noise: NoiseParams = NoiseParams()
) -> ParticleSwarm:
    """``n`` particles uniform in the square of ``half_width`` around ``prior``.

    Headings are uniform within ``3 * noise.sigma_rot`` of the prior heading.
    """
    if n < 1:
        raise ValueError("particle count must be >= 1")
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    rng = make_rng(seed)
    xs = prior.x + rng.uniform(-half_width, half_width, n) if half_width > 0 else np.full(n, prior.x)
    ys = prior.y + rng.uniform(-half_width, half_width, n) if half_width > 0 else np.full(n, prior.y)
    spread = 3.0 * noise.sigma_rot
    hs = normalize_angles(prior.heading + rng.uniform(-spread, spread, n))
    return ParticleSwarm(xs, ys, hs, np.full(n, 1.0 / n), rng.bit_generator.state)


def motion_update(swarm: ParticleSwarm, delta: OdometryDelta, noise: NoiseParams) -> ParticleSwarm:
    rng = swarm.rng()
    n = len(swarm)
    c, s = np.cos(swarm.heading), np.sin(swarm.heading)
    x = swarm.x + c * delta.dx - s * delta.dy + rng.normal(0.0, noise.motion_pos, n)
    y = swarm.y + s * delta.dx + c * delta.dy + rng.normal(0.0, noise.motion_pos, n)
    h = normalize_angles(swarm.heading + delta.dtheta + rng.normal(0.0, noise.motion_rot, n))
    return swarm.replace(rng, x=x, y=y, heading=h)


def window_origins(global_map: OrthoMap, x: np.ndarray, y: np.ndarray, m: int, n: int):
    """Upper-left pixel of the ``m`` x ``n`` window centered on each world point."""
    cu = (np.asarray(x) - global_map.origin[0]) / global_map.resolution
    cv = (np.asarray(y) - global_map.origin[1]) / global_map.resolution
    us = np.floor(cu - (m - 1) / 2.0 + 0.5)
    vs = np.floor(cv - (n - 1) / 2.0 + 0.5)
    # keep far-away particles representable as int64
    lim = 1 << 40
    return np.clip(us, -lim, lim).astype(np.int64), np.clip(vs, -lim, lim).astype(np.int64)


class _MapCache:
    """Kernel-ready copy of the most recent global map (reused across frames)."""

    def __init__(self):
        self.key = None
        self.value = None

    def get(self, global_map: OrthoMap):
        if self.key is not global_map:
            self.key = global_map
            self.value = as_kernel_image(to_grayscale(global_map).pixels.astype(np.float64))
        return self.value


_map_cache = _MapCache()


def particle_scores(
    swarm: ParticleSwarm,
    global_map: OrthoMap,
    local: OrthoMap,
    kernel: WeightKernel | None,
    method: "Method | str",
    workers: int = 1,
    eps: float = EPS_CONFIDENCE,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle confidence ``max(score, eps)`` and an in-bounds flag."""
    method = Method.parse(method)
    if method not in (Method.NCC, Method.WNCC):
        raise ValueError("observation scoring supports NCC and WNCC only")
    image, exact = _map_cache.get(global_map)
    tpl = np.ascontiguousarray(to_grayscale(local).pixels, dtype=np.float64)
    n, m = tpl.shape
    if m > image.shape[1] or n > image.shape[0]:
        raise ValueError("local map larger than global map")
    if method is Method.WNCC:
        if kernel is None:
            raise ValueError("WNCC requires a weight kernel")
        if kernel.weights.shape != tpl.shape:
            raise ValueError("kernel does not match local map size")
        weights = np.ascontiguousarray(kernel.weights)
    else:
        weights = np.ones_like(tpl)
    us, vs = window_origins(global_map, swarm.x, swarm.y, m, n)
    inside = (us >= 0) & (vs >= 0) & (us + m <= image.shape[1]) & (vs + n <= image.shape[0])
    # map-frame template = local sampled at R(-heading) offsets
    thetas = -np.asarray(swarm.heading)
    out = np.empty(len(swarm))

    def run(a: int, b: int) -> None:
        _kernels.score_particles(
            image, exact, tpl, weights, method.code, us[a:b], vs[a:b], thetas[a:b], eps, out[a:b]
        )

    if workers <= 1:
        run(0, len(swarm))
    else:
        edges = np.linspace(0, len(swarm), workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for f in [pool.submit(run, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]:
                f.result()
    return out, inside


def observation_update(
    swarm: ParticleSwarm,
    global_map: OrthoMap,
    local: OrthoMap,
    kernel: WeightKernel | None,
    method: "Method | str" = Method.WNCC,
    workers: int = 1,
) -> ParticleSwarm:
    """Reweight particles by the similarity of ``local`` to the map under each pose."""
    conf, inside = particle_scores(swarm, global_map, local, kernel, method, workers)
    if not inside.any():
        raise SwarmLost("swarm lost: every particle window is outside the global map")
    w = swarm.weight * conf
    total = w.sum()
    if not total > 0:
        raise SwarmLost("swarm lost: all particle weights vanished")
    return swarm.replace(weight=w / total)


def resample(swarm: ParticleSwarm, m: int, noise: NoiseParams = NoiseParams()) -> ParticleSwarm:
    """Roulette-wheel draw of ``m`` particles, each jittered by the resampling noise."""
    if m < 1:
        raise ValueError("resample count must be >= 1")
    total = swarm.weight.sum()
    if not total > 0:
        raise ValueError("cannot resample: all particle weights are zero")
    rng = swarm.rng()
    wheel = np.cumsum(swarm.weight)
    picks = np.searchsorted(wheel, rng.random(m) * wheel[-1], side="right")
    picks = np.minimum(picks, len(swarm) - 1)
    x = swarm.x[picks] + rng.normal(0.0, noise.sigma_pos, m)
    y = swarm.y[picks] + rng.normal(0.0, noise.sigma_pos, m)
    h = normalize_angles(swarm.heading[picks] + rng.normal(0.0, noise.sigma_rot, m))
    return swarm.replace(rng, x=x, y=y, heading=h, weight=np.full(m, 1.0 / m))


def estimate(swarm: ParticleSwarm, mode: str = "mean") -> Pose2D:
    """Weighted mean position and circular-mean heading, or the heaviest particle."""
    if mode == "best":
        k = int(np.argmax(swarm.weight))
        return Pose2D(float(swarm.x[k]), float(swarm.y[k]), float(swarm.heading[k]))
    if mode != "mean":
        raise ValueError(f"unknown estimator {mode!r}")
    w = swarm.weight / swarm.weight.sum()
    heading = math.atan2(float(np.dot(w, np.sin(swarm.heading))), float(np.dot(w, np.cos(swarm.heading))))
    return Pose2D(float(np.dot(w, swarm.x)), float(np.dot(w, swarm.y)), heading)


# ---------------------------------------------------------------------------
# full filter


@dataclass(frozen=True)
class LocalizationConfig:
    particles: int = 1000
    seed: int = 0
    sigma_pos: float = 0.1
    sigma_rot: float = math.radians(2.0)
    motion_sigma_pos: float | None = None
    motion_sigma_rot: float | None = None
    kernel: str = KernelKind.CORRECTED.value
    method: str = Method.WNCC.value
    prior_x: float = 0.0
    prior_y: float = 0.0
    prior_heading: float = 0.0
    init_half_width: float = 1.0
    estimator: str = "mean"
    workers: int = 1

    @property
    def noise(self) -> NoiseParams:
        return NoiseParams(self.sigma_pos, self.sigma_rot, self.motion_sigma_pos, self.motion_sigma_rot)

    @property
    def prior(self) -> Pose2D:
        return Pose2D(self.prior_x, self.prior_y, self.prior_heading)

    @classmethod
    def from_dict(cls, data: dict) -> "LocalizationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LocalizationConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Frame:
    local: OrthoMap
    odometry: OdometryDelta = OdometryDelta()
    index: int | None = None


MANIFEST_HEADER = ["frame", "local_map_path", "dx", "dy", "dtheta"]


def save_manifest(rows: Iterable[tuple[int, str, OdometryDelta]], path: str | os.PathLike) -> None:
    """Write ``(frame, local_map_path, odometry)`` rows as a frame manifest."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for index, local_path, d in rows:
            writer.writerow([index, local_path, repr(float(d.dx)), repr(float(d.dy)), repr(float(d.dtheta))])


def load_manifest(path: str | os.PathLike, resolution: float = DEFAULT_RESOLUTION) -> list[Frame]:
    """Frames listed in a manifest; relative map paths resolve against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    frames = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header: {reader.fieldnames}")
        for r in reader:
            local = load_map(os.path.join(base, r["local_map_path"]), resolution)
            delta = OdometryDelta(float(r["dx"]), float(r["dy"]), float(r["dtheta"]))
            frames.append(Frame(local, delta, int(r["frame"])))
    return frames


@dataclass(frozen=True)
class FrameState:
    frame_index: int
    estimate: Pose2D
    spread: float
    swarm: ParticleSwarm  # weighted posterior, before resampling


def localize_frames(
    global_map: OrthoMap, frames: Sequence[Frame], config: LocalizationConfig
) -> Iterator[FrameState]:
    """Run the filter lazily, yielding the weighted swarm of every frame."""
    if not frames:
        raise ValueError("frame sequence is empty")
    noise = config.noise
    method = Method.parse(config.method)
    first = to_grayscale(frames[0].local)
    kernel = make_kernel(config.kernel, first.width_px, first.height_px)
    swarm = init_swarm(config.prior, config.init_half_width, config.particles, config.seed, noise)
    for k, frame in enumerate(frames):
        index = k if frame.index is None else frame.index
        swarm = motion_update(swarm, frame.odometry, noise)
        try:
            swarm = observation_update(swarm, global_map, frame.local, kernel, method, config.workers)
        except SwarmLost as exc:
            raise SwarmLost(f"{exc} (frame {index})", index) from None
        yield FrameState(index, estimate(swarm, config.estimator), swarm.spread(), swarm)
        swarm = resample(swarm, config.particles, noise)


def run_localization(
    global_map: OrthoMap, frames: Sequence[Frame], config: LocalizationConfig
) -> Trajectory:
    states = localize_frames(global_map, frames, config)
    return Trajectory(tuple(TrajectoryEntry(s.frame_index, s.estimate) for s in states))
