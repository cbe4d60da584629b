"""Desk-scale scene generator: interacting ground truth, imperfect detections,
and a synthetic per-frame feature map supporting ROI shape-feature extraction."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid
from .measurement import Measurement
from .neural import Mlp
from .numerics import Rng

SUBSTEPS = 5
SPAWN_MARGIN = 2.0
TRUE_SCORE_BETA = (8.0, 2.0)
CLUTTER_SCORE_BETA = (2.0, 8.0)


@dataclass
class ClassSpec:
    name: str
    length: float
    width: float
    speed_min: float
    speed_max: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ScenarioConfig:
    region: tuple = (-54.0, 54.0, -54.0, 54.0)
    dt: float = 0.5
    frames: int = 40
    init_objects: int = 6
    birth_rate: float = 0.2
    death_prob: float = 0.01
    p_d: float = 0.9
    mu_fp: float = 2.0
    sigma_p: float = 0.3
    sigma_v: float = 0.3
    vel_limit: float = 6.0
    maneuver_sigma: float = 0.3
    maneuver_rho: float = 0.85
    repulsion_radius: float = 3.0
    repulsion_strength: float = 2.0
    lane_strength: float = 0.0
    lanes: tuple = ()
    grid_size: int = 64
    map_channels: int = 8
    bg_sigma: float = 0.05
    stamp_jitter: float = 0.05
    track_jitter_sigma: float = 0.1
    descriptor_mag: float = 1.0
    clutter_feature_sigma: float = 1.0
    box_dim_noise: float = 0.05
    yaw_sigma: float = 0.1
    classes: tuple = (
        ClassSpec("walker", 0.8, 0.8, 0.5, 2.0),
        ClassSpec("vehicle", 4.5, 2.0, 2.0, 5.0),
    )

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigInvalid(f"scenario.dt must be > 0, got {self.dt}")
        if self.frames < 0:
            raise ConfigInvalid(f"scenario.frames must be >= 0, got {self.frames}")
        xmin, xmax, ymin, ymax = self.region
        if xmax <= xmin or ymax <= ymin:
            raise ConfigInvalid(f"scenario.region is degenerate: {self.region}")
        if not 0.0 <= self.p_d <= 1.0:
            raise ConfigInvalid(f"scenario.p_d must be in [0,1], got {self.p_d}")

    @property
    def sigma_r_diag(self) -> np.ndarray:
        return np.array([self.sigma_p**2, self.sigma_p**2,
                         self.sigma_v**2, self.sigma_v**2])

    @property
    def vel_box(self) -> tuple:
        v = self.vel_limit
        return (-v, v, -v, v)


@dataclass
class GtObject:
    track_id: int
    state: np.ndarray  # (4,)
    box: np.ndarray  # (3,)
    class_id: int


@dataclass
class Frame:
    k: int
    gt: list
    measurements: list
    feature_map: np.ndarray  # (G, G, D) float32


@dataclass
class Scene:
    config: ScenarioConfig
    seed: int
    frames: list

    def gt_tracks(self) -> dict:
        """track_id -> list of (frame index, state, box, class_id)."""
        tracks: dict = {}
        for frame in self.frames:
            for obj in frame.gt:
                tracks.setdefault(obj.track_id, []).append(
                    (frame.k, obj.state, obj.box, obj.class_id)
                )
        return tracks


def class_descriptor(name: str, channels: int, magnitude: float) -> np.ndarray:
    """Persistent per-class descriptor, a stable function of the class name."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    rng = Rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(channels)
    return magnitude * vec / np.linalg.norm(vec)


@dataclass
class _Track:
    track_id: int
    class_id: int
    pos: np.ndarray
    vel: np.ndarray
    maneuver: np.ndarray
    dims: np.ndarray  # (length, width), fixed per track
    descriptor: np.ndarray

    def snapshot(self) -> GtObject:
        yaw = math.atan2(self.vel[1], self.vel[0])
        box = np.array([self.dims[0], self.dims[1], yaw])
        return GtObject(self.track_id, np.concatenate([self.pos, self.vel]).copy(),
                        box, self.class_id)


def _spawn(cfg: ScenarioConfig, rng: Rng, track_id: int,
           class_desc: list) -> _Track:
    xmin, xmax, ymin, ymax = cfg.region
    class_id = int(rng.integers(0, len(cfg.classes)))
    spec = cfg.classes[class_id]
    pos = np.array([
        rng.uniform(xmin + SPAWN_MARGIN, xmax - SPAWN_MARGIN),
        rng.uniform(ymin + SPAWN_MARGIN, ymax - SPAWN_MARGIN),
    ])
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(spec.speed_min, spec.speed_max)
    vel = speed * np.array([math.cos(heading), math.sin(heading)])
    dims = np.array([spec.length, spec.width]) * (
        1.0 + cfg.box_dim_noise * rng.standard_normal(2)
    )
    descriptor = class_desc[class_id] + cfg.track_jitter_sigma * rng.standard_normal(
        len(class_desc[class_id])
    )
    return _Track(track_id, class_id, pos, vel, np.zeros(2), np.abs(dims), descriptor)


def _interaction_accel(tracks: list, cfg: ScenarioConfig) -> list:
    accels = [np.zeros(2) for _ in tracks]
    if cfg.repulsion_strength > 0.0 and len(tracks) > 1:
        radius = cfg.repulsion_radius
        for i in range(len(tracks)):
            for j in range(i + 1, len(tracks)):
                delta = tracks[i].pos - tracks[j].pos
                dist = float(np.linalg.norm(delta))
                if dist < radius:
                    direction = delta / max(dist, 1e-6)
                    push = cfg.repulsion_strength * (radius / max(dist, 0.2) - 1.0)
                    accels[i] = accels[i] + push * direction
                    accels[j] = accels[j] - push * direction
    if cfg.lane_strength > 0.0 and cfg.lanes:
        for i, trk in enumerate(tracks):
            nearest = min(cfg.lanes, key=lambda y: abs(trk.pos[1] - y))
            accels[i] = accels[i] + np.array([0.0, -cfg.lane_strength * (trk.pos[1] - nearest)])
    return accels


def generate_ground_truth(cfg: ScenarioConfig, rng: Rng):
    """Per-frame ground-truth snapshots plus per-track descriptors.

    Objects follow constant velocity plus smooth per-object maneuver noise,
    pairwise repulsion inside the repulsion radius, and optional lane pull.
    Births are Poisson; tracks die on region exit or with a geometric lifetime.
    """
    class_desc = [
        class_descriptor(spec.name, cfg.map_channels, cfg.descriptor_mag)
        for spec in cfg.classes
    ]
    xmin, xmax, ymin, ymax = cfg.region
    tracks: list[_Track] = []
    next_id = 0
    frames_gt = []
    descriptors = {}
    for _ in range(cfg.init_objects):
        trk = _spawn(cfg, rng, next_id, class_desc)
        descriptors[next_id] = trk.descriptor
        tracks.append(trk)
        next_id += 1

    h = cfg.dt / SUBSTEPS
    for k in range(cfg.frames):
        frames_gt.append([trk.snapshot() for trk in tracks])
        # evolve to the next frame
        for trk in tracks:
            rho = cfg.maneuver_rho
            trk.maneuver = rho * trk.maneuver + cfg.maneuver_sigma * math.sqrt(
                1.0 - rho * rho
            ) * rng.standard_normal(2)
        for _ in range(SUBSTEPS):
            accels = _interaction_accel(tracks, cfg)
            for trk, acc in zip(tracks, accels):
                trk.vel = trk.vel + (acc + trk.maneuver) * h
                spec = cfg.classes[trk.class_id]
                speed = float(np.linalg.norm(trk.vel))
                if speed > spec.speed_max:
                    trk.vel = trk.vel * (spec.speed_max / speed)
                trk.pos = trk.pos + trk.vel * h
        survivors = []
        for trk in tracks:
            inside = xmin <= trk.pos[0] <= xmax and ymin <= trk.pos[1] <= ymax
            if inside and rng.random() >= cfg.death_prob:
                survivors.append(trk)
        tracks = survivors
        births = rng.poisson(cfg.birth_rate)
        for _ in range(births):
            trk = _spawn(cfg, rng, next_id, class_desc)
            descriptors[next_id] = trk.descriptor
            tracks.append(trk)
            next_id += 1
    return frames_gt, descriptors


def detect(gt_objects: list, cfg: ScenarioConfig, rng: Rng):
    """Detections with probability p_d plus Poisson clutter.

    Returns (measurements, is_clutter flags); flags are internal provenance
    used only for feature-map rendering, never written to scene files.
    """
    measurements = []
    flags = []
    noise_sd = np.sqrt(cfg.sigma_r_diag)
    for obj in gt_objects:
        if rng.random() < cfg.p_d:
            z = obj.state + noise_sd * rng.standard_normal(4)
            dims = obj.box[:2] * (1.0 + cfg.box_dim_noise * rng.standard_normal(2))
            yaw = obj.box[2] + cfg.yaw_sigma * rng.standard_normal()
            score = float(rng.beta(*TRUE_SCORE_BETA))
            measurements.append(Measurement(z, score, np.array([*np.abs(dims), yaw]),
                                            obj.class_id))
            flags.append(False)
    xmin, xmax, ymin, ymax = cfg.region
    vxmin, vxmax, vymin, vymax = cfg.vel_box
    for _ in range(rng.poisson(cfg.mu_fp)):
        z = np.array([
            rng.uniform(xmin, xmax),
            rng.uniform(ymin, ymax),
            rng.uniform(vxmin, vxmax),
            rng.uniform(vymin, vymax),
        ])
        dims = np.array([rng.uniform(1.0, 5.0), rng.uniform(0.5, 2.5)])
        yaw = rng.uniform(-math.pi, math.pi)
        score = float(rng.beta(*CLUTTER_SCORE_BETA))
        class_id = int(rng.integers(0, len(cfg.classes)))
        measurements.append(Measurement(z, score, np.array([*dims, yaw]), class_id))
        flags.append(True)
    order = list(range(len(measurements)))
    rng.shuffle(order)
    return [measurements[i] for i in order], [flags[i] for i in order]


def _cell_centers(cfg: ScenarioConfig):
    xmin, xmax, ymin, ymax = cfg.region
    g = cfg.grid_size
    xs = xmin + (np.arange(g) + 0.5) * (xmax - xmin) / g
    ys = ymin + (np.arange(g) + 0.5) * (ymax - ymin) / g
    return xs, ys


def _stamp(grid: np.ndarray, cfg: ScenarioConfig, center: np.ndarray, box: np.ndarray,
           value: np.ndarray):
    """Add `value` to every cell whose center lies inside the oriented box."""
    xs, ys = _cell_centers(cfg)
    xmin, xmax, ymin, ymax = cfg.region
    g = cfg.grid_size
    length, width, yaw = box
    radius = 0.5 * math.hypot(length, width)
    cell_w = (xmax - xmin) / g
    cell_h = (ymax - ymin) / g
    ix_lo = max(int((center[0] - radius - xmin) / cell_w) - 1, 0)
    ix_hi = min(int((center[0] + radius - xmin) / cell_w) + 1, g - 1)
    iy_lo = max(int((center[1] - radius - ymin) / cell_h) - 1, 0)
    iy_hi = min(int((center[1] + radius - ymin) / cell_h) + 1, g - 1)
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    stamped = False
    for ix in range(ix_lo, ix_hi + 1):
        for iy in range(iy_lo, iy_hi + 1):
            dx = xs[ix] - center[0]
            dy = ys[iy] - center[1]
            along = cos_y * dx + sin_y * dy
            across = -sin_y * dx + cos_y * dy
            if abs(along) <= 0.5 * length and abs(across) <= 0.5 * width:
                grid[ix, iy] += value
                stamped = True
    if not stamped:
        ix = min(max(int((center[0] - xmin) / cell_w), 0), g - 1)
        iy = min(max(int((center[1] - ymin) / cell_h), 0), g - 1)
        grid[ix, iy] += value


def render_feature_map(gt_objects: list, clutter_meas: list, cfg: ScenarioConfig,
                       rng: Rng, descriptors: dict) -> np.ndarray:
    """Background noise + descriptor stamps for objects and clutter."""
    g, d = cfg.grid_size, cfg.map_channels
    grid = cfg.bg_sigma * rng.standard_normal((g, g, d))
    for obj in gt_objects:
        value = descriptors[obj.track_id] + cfg.stamp_jitter * rng.standard_normal(d)
        _stamp(grid, cfg, obj.state[:2], obj.box, value)
    for meas in clutter_meas:
        value = cfg.clutter_feature_sigma * rng.standard_normal(d)
        _stamp(grid, cfg, meas.z[:2], meas.box, value)
    return grid.astype(np.float32)


def bilinear_sample(grid: np.ndarray, region: tuple, point: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of the (G, G, D) grid at a region coordinate."""
    xmin, xmax, ymin, ymax = region
    g = grid.shape[0]
    # cell centers sit at (i + 0.5) * cell; map to fractional index space
    fx = (point[0] - xmin) / (xmax - xmin) * g - 0.5
    fy = (point[1] - ymin) / (ymax - ymin) * g - 0.5
    fx = min(max(fx, 0.0), g - 1.0)
    fy = min(max(fy, 0.0), g - 1.0)
    ix, iy = int(fx), int(fy)
    ix1, iy1 = min(ix + 1, g - 1), min(iy + 1, g - 1)
    ax, ay = fx - ix, fy - iy
    top = (1 - ax) * grid[ix, iy] + ax * grid[ix1, iy]
    bot = (1 - ax) * grid[ix, iy1] + ax * grid[ix1, iy1]
    return np.asarray((1 - ay) * top + ay * bot, dtype=float)


def roi_sample_points(center: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Center + 4 corners of the oriented box, (5, 2)."""
    length, width, yaw = box
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    rot = np.array([[cos_y, -sin_y], [sin_y, cos_y]])
    half = 0.5 * np.array([
        [length, width],
        [length, -width],
        [-length, width],
        [-length, -width],
    ])
    corners = center + half @ rot.T
    return np.vstack([center[None, :], corners])


def roi_extract(grid: np.ndarray, center: np.ndarray, box: np.ndarray, region: tuple,
                head: Mlp):
    """Shape feature: bilinear ROI samples reduced by the shared feature head.

    Returns (feature, inside); a center outside the region yields a zero
    feature with inside=False.
    """
    xmin, xmax, ymin, ymax = region
    if not (xmin <= center[0] <= xmax and ymin <= center[1] <= ymax):
        out_dim = head.layers[-1].fan_out
        return np.zeros(out_dim), False
    samples = [bilinear_sample(grid, region, p) for p in roi_sample_points(center, box)]
    feature = head.forward(np.concatenate(samples))
    return np.asarray(feature, dtype=float), True


def simulate_scene(cfg: ScenarioConfig, seed: int) -> Scene:
    """Deterministic scene: ground truth, detections and feature maps."""
    rng = Rng(seed).substream("simulate")
    frames_gt, descriptors = generate_ground_truth(cfg, rng.substream("gt"))
    frames = []
    for k, gt_objects in enumerate(frames_gt):
        det_rng = rng.substream(f"detect.{k}")
        measurements, flags = detect(gt_objects, cfg, det_rng)
        clutter = [m for m, is_cl in zip(measurements, flags) if is_cl]
        map_rng = rng.substream(f"map.{k}")
        fmap = render_feature_map(gt_objects, clutter, cfg, map_rng, descriptors)
        frames.append(Frame(k, gt_objects, measurements, fmap))
    return Scene(cfg, seed, frames)
