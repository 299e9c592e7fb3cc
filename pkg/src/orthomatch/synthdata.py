"""Synthetic aerial/ground scene pairs.

The "aerial" global map is clean procedural terrain with roads, lane
markings and manhole-like disks.  "Ground" local maps are rotated crops of
it passed through a photometric shift, pixel noise and invalid hollow disks
that cluster near the patch border, imitating stereo elevation maps.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gridmap import DEFAULT_RESOLUTION, OrthoMap, Pose2D, rotate_nearest, save_map, to_grayscale
from .localization import (
    Frame,
    LocalizationConfig,
    NoiseParams,
    OdometryDelta,
    Trajectory,
    relative_delta,
    save_manifest,
    save_trajectory,
)
from .rng import make_rng

# stream ids keep the generators' draws independent of one another
_STREAM_TEXTURE = 1
_STREAM_ROADS = 2
_STREAM_FEATURES = 3
_STREAM_PATH = 4
_STREAM_ODOM = 5
_STREAM_DEGRADE = 6


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width_px: int = 512
    height_px: int = 512
    road_count: int = 2
    marking_density: float = 1.0
    texture_scale: float = 12.0
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.width_px < 64 or self.height_px < 64:
            raise ValueError("scene dimensions must be >= 64 px")
        if self.road_count < 0 or self.marking_density < 0:
            raise ValueError("road_count and marking_density must be >= 0")
        if not self.texture_scale > 0:
            raise ValueError("texture_scale must be positive")


@dataclass(frozen=True)
class DegradationParams:
    """Photometric shift, pixel noise and hollows applied to a ground view.

    Defaults darken the view (ground cameras see the scene under a different
    exposure) and put every hollow on the patch border.
    """

    gain: float = 0.6
    bias: float = -35.0
    noise_sigma: float = 4.0
    hollow_count: int = 6
    hollow_radius_px: float = 7.0
    edge_hollow_bias: float = 1.0

    def __post_init__(self):
        vals = (self.gain, self.bias, self.noise_sigma, self.hollow_radius_px, self.edge_hollow_bias)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("degradation parameters must be finite")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.noise_sigma < 0 or self.hollow_count < 0 or self.hollow_radius_px < 0:
            raise ValueError("noise_sigma, hollow_count and hollow_radius_px must be >= 0")
        if not 0.0 <= self.edge_hollow_bias <= 1.0:
            raise ValueError("edge_hollow_bias must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "DegradationParams":
        return cls(1.0, 0.0, 0.0, 0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# global map


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    h, w = shape
    gh, gw = int(math.ceil(h / scale)) + 2, int(math.ceil(w / scale)) + 2
    lattice = rng.random((gh, gw))
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64) / scale
    return ndimage.map_coordinates(lattice, [vv, uu], order=3, mode="nearest")


def _terrain(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    """Multi-octave value noise with heavy tails.

    Raising the standardized field to the 1.7th power keeps most of the
    ground mid-gray and concentrates contrast in sparse dark and bright
    blotches, which gives correlation peaks a clear margin over the
    background.
    """
    field = np.zeros(shape)
    for octave in range(3):
        field += 0.6 ** octave * _value_noise(rng, shape, max(scale / 2 ** octave, 1.5))
    field = (field - field.mean()) / (field.std() + 1e-12)
    field = np.sign(field) * np.abs(field) ** 1.7
    field /= field.std() + 1e-12
    grain = rng.normal(0.0, 1.0, shape)
    return 125.0 + 40.0 * field + 5.0 * grain


def _line_distance(shape, point, direction):
    vv, uu = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    du, dv = uu - point[0], vv - point[1]
    along = du * direction[0] + dv * direction[1]
    across = -du * direction[1] + dv * direction[0]
    return along, across


def gen_global(spec: SceneSpec) -> OrthoMap:
    """Procedural grayscale aerial map, deterministic in ``spec``."""
    shape = (spec.height_px, spec.width_px)
    img = _terrain(make_rng(spec.seed, _STREAM_TEXTURE), shape, spec.texture_scale)

    rng = make_rng(spec.seed, _STREAM_ROADS)
    for _ in range(spec.road_count):
        point = (rng.uniform(0.25, 0.75) * spec.width_px, rng.uniform(0.25, 0.75) * spec.height_px)
        angle = rng.uniform(0.0, math.pi)
        direction = (math.cos(angle), math.sin(angle))
        half = rng.uniform(18.0, 28.0)
        along, across = _line_distance(shape, point, direction)
        road = np.abs(across) <= half
        asphalt = 62.0 + 10.0 * _value_noise(rng, shape, 6.0) + rng.normal(0.0, 4.0, shape)
        img[road] = asphalt[road]
        # curbs: thin bright strips on both road edges
        curb = (np.abs(across) > half) & (np.abs(across) <= half + 2.0)
        img[curb] = 185.0
        if spec.marking_density > 0:
            period = 50.0 / min(spec.marking_density, 4.0)
            dash = np.mod(along + rng.uniform(0, period), period) < 0.6 * period
            img[(np.abs(across) <= 1.5) & dash] = 240.0
            edge_off = half - 5.0
            img[np.abs(np.abs(across) - edge_off) <= 1.0] = 225.0

    rng = make_rng(spec.seed, _STREAM_FEATURES)
    n_covers = int(round(spec.marking_density * spec.width_px * spec.height_px / 8000.0))
    vv, uu = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    for _ in range(n_covers):
        cu, cv = rng.uniform(0, spec.width_px), rng.uniform(0, spec.height_px)
        radius = rng.uniform(4.0, 8.0)
        d = np.hypot(uu - cu, vv - cv)
        img[d <= radius] = rng.choice([35.0, 215.0])
        img[np.abs(d - radius) <= 1.0] = 245.0
    return OrthoMap(np.clip(np.rint(img), 0, 255).astype(np.uint8), spec.resolution)


# ---------------------------------------------------------------------------
# local maps


def _hollow_centers(rng, count, m, n, radius, edge_bias):
    centers = []
    for _ in range(count):
        if rng.random() < edge_bias:
            # a point within half a radius of the border, either side
            perim = 2 * (m + n)
            p = rng.uniform(0, perim)
            inset = rng.uniform(-0.5 * radius, 0.5 * radius)
            if p < m:
                cu, cv = p, inset
            elif p < m + n:
                cu, cv = m - 1 - inset, p - m
            elif p < 2 * m + n:
                cu, cv = p - m - n, n - 1 - inset
            else:
                cu, cv = inset, p - 2 * m - n
        else:
            cu, cv = rng.uniform(0, m), rng.uniform(0, n)
        centers.append((cu, cv))
    return centers


def extract_local(
    global_map: OrthoMap,
    pose: Pose2D,
    m: int,
    n: int,
    degrade: DegradationParams = DegradationParams(),
    seed: int = 0,
) -> OrthoMap:
    """Degraded ``m`` x ``n`` ground view centered on ``pose`` and rotated by its heading."""
    cu, cv = global_map.world_to_pixel(pose.x, pose.y)
    gray = to_grayscale(global_map)
    pixels, mask = rotate_nearest(gray.pixels, gray.mask, pose.heading, (cu, cv), (n, m))
    if not mask.all():
        raise ValueError(f"window out of bounds: local map at pose {pose} leaves the global map")
    rng = make_rng(seed, _STREAM_DEGRADE)
    img = pixels.astype(np.float64) * degrade.gain + degrade.bias
    if degrade.noise_sigma > 0:
        img = img + rng.normal(0.0, degrade.noise_sigma, img.shape)
    img = np.clip(np.rint(img), 0, 255)
    valid = np.ones((n, m), dtype=bool)
    if degrade.hollow_count:
        vv, uu = np.mgrid[0:n, 0:m].astype(np.float64)
        for hu, hv in _hollow_centers(rng, degrade.hollow_count, m, n,
                                      degrade.hollow_radius_px, degrade.edge_hollow_bias):
            r = degrade.hollow_radius_px * rng.uniform(0.6, 1.4)
            valid &= np.hypot(uu - hu, vv - hv) > r
    img[~valid] = 0
    return OrthoMap(img.astype(np.uint8), global_map.resolution, valid)


# ---------------------------------------------------------------------------
# trajectories


def gen_trajectory(
    spec: SceneSpec,
    n_frames: int,
    step: float = 0.5,
    odom_noise: NoiseParams = NoiseParams.zero(),
    seed: int = 0,
    margin_px: float = 48.0,
    max_curvature: float = 0.05,
) -> tuple[Trajectory, list[OdometryDelta]]:
    """A smooth forward path and its noisy robot-frame odometry.

    The path turns with a random-walk turn rate capped at ``max_curvature``
    (1/m) and is centered in the map; every pose must stay ``margin_px`` away
    from the border.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = make_rng(seed, _STREAM_PATH)
    heading = rng.uniform(-math.pi, math.pi)
    kappa = 0.0
    poses = [Pose2D(0.0, 0.0, heading)]
    for _ in range(n_frames - 1):
        kappa = float(np.clip(kappa + rng.normal(0.0, 0.3 * max_curvature), -max_curvature, max_curvature))
        prev = poses[-1]
        dtheta = kappa * step
        mid = prev.heading + dtheta / 2.0
        poses.append(Pose2D(prev.x + step * math.cos(mid), prev.y + step * math.sin(mid),
                            prev.heading + dtheta))
    xs = np.array([p.x for p in poses])
    ys = np.array([p.y for p in poses])
    res = spec.resolution
    shift_x = spec.width_px * res / 2.0 - (xs.min() + xs.max()) / 2.0
    shift_y = spec.height_px * res / 2.0 - (ys.min() + ys.max()) / 2.0
    poses = [Pose2D(p.x + shift_x, p.y + shift_y, p.heading) for p in poses]
    for k, p in enumerate(poses):
        u, v = p.x / res, p.y / res
        if not (margin_px <= u <= spec.width_px - 1 - margin_px and margin_px <= v <= spec.height_px - 1 - margin_px):
            raise ValueError(f"path exits the map at frame {k}")

    noise_rng = make_rng(seed, _STREAM_ODOM)
    odometry = []
    for a, b in zip(poses, poses[1:]):
        true = relative_delta(a, b)
        odometry.append(OdometryDelta(
            true.dx + noise_rng.normal(0.0, odom_noise.motion_pos),
            true.dy + noise_rng.normal(0.0, odom_noise.motion_pos),
            true.dtheta + noise_rng.normal(0.0, odom_noise.motion_rot),
        ))
    return Trajectory.from_poses(poses), odometry


@dataclass(frozen=True)
class Sequence:
    """A generated localization run: map, frames, ground truth."""

    global_map: OrthoMap
    frames: list[Frame]
    truth: Trajectory
    scene: SceneSpec


def gen_sequence(
    scene: SceneSpec,
    n_frames: int = 50,
    step: float = 0.5,
    size: tuple[int, int] = (64, 64),
    degrade: DegradationParams = DegradationParams(),
    odom_noise: NoiseParams = NoiseParams.zero(),
    seed: int | None = None,
) -> Sequence:
    """Global map, per-frame degraded local maps and odometry for one seed."""
    seed = scene.seed if seed is None else seed
    global_map = gen_global(scene)
    m, n = size
    truth, odometry = gen_trajectory(scene, n_frames, step, odom_noise, seed,
                                     margin_px=math.hypot(m, n) / 2.0 + 2.0)
    frames = []
    for k, entry in enumerate(truth):
        local = extract_local(global_map, entry.pose, m, n, degrade, seed=seed * 100003 + k)
        delta = odometry[k - 1] if k > 0 else OdometryDelta()
        frames.append(Frame(local, delta, entry.frame_index))
    return Sequence(global_map, frames, truth, scene)


def save_sequence(
    seq: Sequence,
    directory: str | os.PathLike,
    generator: dict | None = None,
    particles: int = 1000,
) -> dict[str, Path]:
    """Write a sequence as map files plus manifest, truth and configs.

    ``config.json`` records ``generator`` (the parameters that produced the
    sequence); ``localize.json`` is a ready filter config whose prior is the
    true first pose.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"global": out / "global.pgm", "manifest": out / "manifest.csv", "truth": out / "truth.csv",
             "config": out / "config.json", "localize": out / "localize.json"}
    save_map(seq.global_map, paths["global"])
    rows = []
    for frame in seq.frames:
        name = f"local_{frame.index:04d}.pgm"
        save_map(frame.local, out / name, with_mask=True)
        rows.append((frame.index, name, frame.odometry))
    save_manifest(rows, paths["manifest"])
    save_trajectory(seq.truth, paths["truth"])
    with open(paths["config"], "w") as fh:
        json.dump({"scene": asdict(seq.scene), **(generator or {})}, fh, indent=2, sort_keys=True)
    start = seq.truth.poses[0]
    loc = LocalizationConfig(particles=particles, seed=seq.scene.seed,
                             prior_x=start.x, prior_y=start.y, prior_heading=start.heading)
    with open(paths["localize"], "w") as fh:
        json.dump(loc.to_dict(), fh, indent=2, sort_keys=True)
    return paths
