"""Seeded multi-frame scene generator: moving boxes, radar sweeps, camera renders.

The world is constant-velocity. Radar sweeps are accumulated by placing
each older sweep's returns at the object's earlier position, and camera
"images" are painted per-class feature signatures over background noise,
together with a z-buffered depth map.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from . import io as fio
from .geometry import (
    CameraModel,
    GridSpec,
    GtObject,
    assert_disjoint,
    bev_footprint,
    rot_z,
    wrap_angle,
)
from .rng import substream
from .serde import ConfigError, from_dict, to_dict

# (length, width, height), mean RCS
CLASS_TABLE: dict[int, tuple[tuple[float, float, float], float]] = {
    0: ((4.0, 2.0, 1.6), 8.0),  # car
    1: ((6.0, 2.5, 3.0), 12.0),  # truck
    2: ((3.0, 1.8, 1.5), 5.0),  # compact
}
RADAR_FEATURES = ("rcs", "vr_x", "vr_y")
BACKGROUND_DEPTH = math.inf


class SceneOverconstrained(RuntimeError):
    def __init__(self, msg: str = "scene overconstrained"):
        super().__init__(msg)


@dataclass
class CameraRigConfig:
    n_cameras: int = 4
    image_w: int = 48
    image_h: int = 16
    hfov_deg: float = 100.0
    height: float = 1.0
    channels: int = 16
    noise: float = 0.3

    def __post_init__(self):
        if self.n_cameras < 1 or self.image_w < 1 or self.image_h < 1 or self.channels < 1:
            raise ConfigError("", "camera rig sizes must be positive")
        if not 0 < self.hfov_deg < 180:
            raise ConfigError("hfov_deg", "must be in (0, 180)")

    def cameras(self) -> list[CameraModel]:
        return [
            CameraModel.from_yaw(
                2 * math.pi * i / self.n_cameras,
                self.image_w,
                self.image_h,
                math.radians(self.hfov_deg),
                self.height,
            )
            for i in range(self.n_cameras)
        ]


def _default_grid() -> GridSpec:
    return GridSpec(64, 64, 1.0, (-32.0, -32.0))


@dataclass
class SceneConfig:
    n_objects: int = 8
    speed_range: tuple[float, float] = (0.5, 12.0)
    static_fraction: float = 0.25
    heading_mode: Literal["radial", "uniform"] = "radial"
    heading_jitter: float = 0.15
    radar_points_per_object: int = 8
    clutter_points: int = 60
    radar_noise: float = 0.15
    velocity_noise: float = 0.1
    radar_dropout: float = 0.1
    sweeps: int = 6
    sweep_period: float = 1.0 / 12.0
    t_s: float = 0.5
    seed: int = 0
    grid: GridSpec = field(default_factory=_default_grid)
    cameras: CameraRigConfig = field(default_factory=CameraRigConfig)
    min_range: float = 6.0
    min_gap: float = 2.0
    max_tries: int = 500
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    ego_yaw_rate: float = 0.0
    objects: Optional[list[GtObject]] = None

    _serde_generic = True

    def __post_init__(self):
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError("speed_range", "must satisfy 0 <= min <= max")
        for name in ("static_fraction", "radar_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, "probability must be in [0, 1]")
        for name in ("n_objects", "radar_points_per_object", "clutter_points"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.sweeps < 1:
            raise ConfigError("sweeps", "must be >= 1")
        if self.radar_noise < 0 or self.velocity_noise < 0:
            raise ConfigError("radar_noise", "noise must be >= 0")
        if not self.t_s > 0:
            raise ConfigError("t_s", "must be positive")
        if self.max_tries < 1:
            raise ConfigError("max_tries", "must be >= 1")

    @property
    def moving_ego(self) -> bool:
        return self.ego_velocity != (0.0, 0.0) or self.ego_yaw_rate != 0.0


@dataclass
class RadarPointCloud:
    xyz: np.ndarray  # (P, 3)
    features: np.ndarray  # (P, F)
    sweep: np.ndarray  # (P,) int
    timestamp: float
    source: Optional[np.ndarray] = None  # (P,) object index, -1 for clutter

    def __len__(self) -> int:
        return len(self.xyz)


@dataclass
class CameraView:
    camera: CameraModel
    features: np.ndarray  # (C, H, W)
    depth: np.ndarray  # (H, W), BACKGROUND_DEPTH where no object


@dataclass
class Frame:
    index: int
    timestamp: float
    radar: RadarPointCloud
    cameras: list[CameraView]
    objects: list[GtObject]  # world frame
    ego_pose: np.ndarray  # 4x4 world <- ego

    def objects_in_ego(self) -> list[GtObject]:
        return [to_ego(o, self.ego_pose) for o in self.objects]


@dataclass
class FrameSequence:
    frames: list[Frame]
    t_s: float
    config: Optional[SceneConfig] = None

    def __len__(self) -> int:
        return len(self.frames)


def ego_pose_matrix(x: float, y: float, yaw: float) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = rot_z(yaw)
    pose[0, 3], pose[1, 3] = x, y
    return pose


def to_ego(obj: GtObject, pose: np.ndarray) -> GtObject:
    if np.array_equal(pose, np.eye(4)):
        return obj
    r = pose[:2, :2]
    c = r.T @ (np.array(obj.center[:2]) - pose[:2, 3])
    v = r.T @ np.array(obj.velocity)
    yaw = obj.yaw - math.atan2(pose[1, 0], pose[0, 0])
    return GtObject((c[0], c[1], obj.center[2]), obj.dims, yaw, (v[0], v[1]), obj.class_id)


def class_signatures(seed: int, channels: int) -> dict[int, np.ndarray]:
    return {
        c: 1.0 + substream(seed, "signature", c).normal(size=channels) for c in sorted(CLASS_TABLE)
    }


def _clear(a: np.ndarray, ra: float, b: np.ndarray, rb: float, gap: float) -> bool:
    return bool(np.all(np.hypot(*(a - b).T) >= ra + rb + gap))


def _place_objects(cfg: SceneConfig, n_frames: int, rng: np.random.Generator):
    """Sample frame-0 object states whose whole trajectories satisfy the placement rules."""
    x0, x1, y0, y1 = cfg.grid.extent
    placed: list[tuple[GtObject, np.ndarray, float]] = []
    for _ in range(cfg.n_objects):
        for _attempt in range(cfg.max_tries):
            cls = int(rng.integers(len(CLASS_TABLE)))
            dims = CLASS_TABLE[cls][0]
            radius = 0.5 * math.hypot(dims[0], dims[1])
            margin = radius + 0.5
            if x1 - x0 <= 2 * margin or y1 - y0 <= 2 * margin:
                continue
            final = np.array([rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin)])
            if rng.random() < cfg.static_fraction:
                speed, heading = 0.0, rng.uniform(-math.pi, math.pi)
            else:
                speed = rng.uniform(*cfg.speed_range)
                if cfg.heading_mode == "radial":
                    outward = rng.random() < 0.5
                    heading = math.atan2(final[1], final[0]) + (0.0 if outward else math.pi)
                    heading += rng.uniform(-cfg.heading_jitter, cfg.heading_jitter)
                else:
                    heading = rng.uniform(-math.pi, math.pi)
            vel = np.array([speed * math.cos(heading), speed * math.sin(heading)])
            start = final - vel * (cfg.t_s * (n_frames - 1))
            traj = _trajectory(start, vel, cfg.t_s, n_frames)
            if np.any(np.hypot(traj[:, 0], traj[:, 1]) < cfg.min_range + radius):
                continue
            if not all(_clear(traj, radius, t, r, cfg.min_gap) for _, t, r in placed):
                continue
            obj = GtObject((start[0], start[1], dims[2] / 2), dims, heading, tuple(vel), cls)
            placed.append((obj, traj, radius))
            break
        else:
            raise SceneOverconstrained()
    return [p[0] for p in placed]


def _trajectory(start: np.ndarray, vel: np.ndarray, t_s: float, n: int) -> np.ndarray:
    out = np.empty((n, 2))
    cur = np.array(start, dtype=float)
    for k in range(n):
        out[k] = cur
        cur = cur + vel * t_s
    return out


def propagate(obj: GtObject, t_s: float) -> GtObject:
    """Advance one frame period at constant velocity."""
    c = np.array(obj.center[:2]) + np.array(obj.velocity) * t_s
    return GtObject((c[0], c[1], obj.center[2]), obj.dims, obj.yaw, obj.velocity, obj.class_id)


def sample_radar(
    objects: list[GtObject], cfg: SceneConfig, rng: np.random.Generator, timestamp: float = 0.0
) -> RadarPointCloud:
    """Accumulated multi-sweep radar cloud for objects given in the ego frame."""
    xyz, feats, sweeps, source = [], [], [], []
    n = cfg.radar_points_per_object
    for k, obj in enumerate(objects):
        length, width, height = obj.dims
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        rot = np.array([[c, -s], [s, c]])
        vel = np.array(obj.velocity)
        rcs_mean = CLASS_TABLE.get(obj.class_id, ((0, 0, 0), 6.0))[1]
        for sweep in range(cfg.sweeps):
            local = np.column_stack(
                [rng.uniform(-length / 2, length / 2, n), rng.uniform(-width / 2, width / 2, n)]
            )
            xy = local @ rot.T + np.array(obj.center[:2]) - vel * (sweep * cfg.sweep_period)
            if cfg.radar_noise > 0:
                xy = xy + rng.normal(0.0, cfg.radar_noise, xy.shape)
            z = obj.center[2] + rng.uniform(-height / 2, height / 2, n)
            rcs = rcs_mean + rng.normal(0.0, 1.0, n)
            keep = rng.random(n) >= cfg.radar_dropout
            unit = xy / np.maximum(np.hypot(xy[:, 0], xy[:, 1]), 1e-9)[:, None]
            vr = unit @ vel + rng.normal(0.0, cfg.velocity_noise, n)
            f = np.column_stack([rcs, vr * unit[:, 0], vr * unit[:, 1]])
            xyz.append(np.column_stack([xy, z])[keep])
            feats.append(f[keep])
            sweeps.append(np.full(int(keep.sum()), sweep))
            source.append(np.full(int(keep.sum()), k))
    m = cfg.clutter_points
    if m:
        x0, x1, y0, y1 = cfg.grid.extent
        xy = np.column_stack([rng.uniform(x0, x1, m), rng.uniform(y0, y1, m)])
        z = rng.uniform(0.0, 2.0, m)
        unit = xy / np.maximum(np.hypot(xy[:, 0], xy[:, 1]), 1e-9)[:, None]
        vr = rng.normal(0.0, cfg.velocity_noise, m)
        rcs = rng.normal(0.0, 1.0, m)
        xyz.append(np.column_stack([xy, z]))
        feats.append(np.column_stack([rcs, vr * unit[:, 0], vr * unit[:, 1]]))
        sweeps.append(rng.integers(0, cfg.sweeps, m))
        source.append(np.full(m, -1))
    if not xyz:
        return RadarPointCloud(np.zeros((0, 3)), np.zeros((0, len(RADAR_FEATURES))),
                               np.zeros(0, dtype=np.int64), timestamp, np.zeros(0, dtype=np.int64))
    return RadarPointCloud(
        np.concatenate(xyz),
        np.concatenate(feats),
        np.concatenate(sweeps).astype(np.int64),
        timestamp,
        np.concatenate(source).astype(np.int64),
    )


def ray_box_depth(origin: np.ndarray, rays: np.ndarray, obj: GtObject) -> np.ndarray:
    """Entry parameter of each ray into the object's 3-D box; inf on a miss.

    `rays` are scaled so the parameter equals optical-axis depth.
    """
    c, s = math.cos(-obj.yaw), math.sin(-obj.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - np.array(obj.center))
    d = rays.reshape(-1, 3) @ rot.T
    half = np.array(obj.dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0
    inside = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf).reshape(rays.shape[:-1])


def render_camera(
    objects: list[GtObject],
    cam: CameraModel,
    channels: int,
    signatures: dict[int, np.ndarray],
    rng: np.random.Generator,
    noise: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Painted feature map (C, H, W) and z-buffered depth (H, W) for ego-frame objects."""
    rays = cam.pixel_rays()
    depth = np.full((cam.image_h, cam.image_w), BACKGROUND_DEPTH)
    owner = np.full(depth.shape, -1)
    for k, obj in enumerate(objects):
        d = ray_box_depth(cam.translation, rays, obj)
        nearer = d < depth
        depth = np.where(nearer, d, depth)
        owner = np.where(nearer, k, owner)
    feats = rng.normal(0.0, noise, (channels, cam.image_h, cam.image_w)) if noise > 0 else np.zeros(
        (channels, cam.image_h, cam.image_w)
    )
    for k, obj in enumerate(objects):
        mask = owner == k
        if mask.any():
            feats[:, mask] += signatures[obj.class_id][:, None]
    return feats, depth


def generate_sequence(cfg: SceneConfig, n_frames: int) -> FrameSequence:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if cfg.objects is not None:
        initial = list(cfg.objects)
        assert_disjoint([bev_footprint(o) for o in initial])
    else:
        initial = _place_objects(cfg, n_frames, substream(cfg.seed, "scene"))
    cams = cfg.cameras.cameras()
    sigs = class_signatures(cfg.seed, cfg.cameras.channels)
    frames = []
    objects = initial
    ego_xy = np.zeros(2)
    ego_yaw = 0.0
    ego_v = np.array(cfg.ego_velocity, dtype=float)
    for k in range(n_frames):
        ts = k * cfg.t_s
        pose = ego_pose_matrix(ego_xy[0], ego_xy[1], ego_yaw)
        ego_objs = [to_ego(o, pose) for o in objects]
        radar = sample_radar(ego_objs, cfg, substream(cfg.seed, "radar", k), ts)
        views = []
        for i, cam in enumerate(cams):
            f, d = render_camera(ego_objs, cam, cfg.cameras.channels, sigs,
                                 substream(cfg.seed, "camera", k, i), cfg.cameras.noise)
            views.append(CameraView(cam, f, d))
        frames.append(Frame(k, ts, radar, views, list(objects), pose))
        objects = [propagate(o, cfg.t_s) for o in objects]
        if cfg.moving_ego:
            ego_xy = ego_xy + rot_z(ego_yaw)[:2, :2] @ ego_v * cfg.t_s
            ego_yaw = wrap_angle(ego_yaw + cfg.ego_yaw_rate * cfg.t_s)
    return FrameSequence(frames, cfg.t_s, cfg)


# ---------------------------------------------------------------- file format

def _radar_csv(cloud: RadarPointCloud) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", *RADAR_FEATURES, "sweep", "source"])
    src = cloud.source if cloud.source is not None else np.full(len(cloud), -1)
    for p, f, s, o in zip(cloud.xyz, cloud.features, cloud.sweep, src):
        w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in f] + [int(s), int(o)])
    return buf.getvalue()


def _read_radar_csv(path: Path, timestamp: float) -> RadarPointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    nf = len(RADAR_FEATURES)
    if not rows:
        return RadarPointCloud(np.zeros((0, 3)), np.zeros((0, nf)), np.zeros(0, dtype=np.int64),
                               timestamp, np.zeros(0, dtype=np.int64))
    arr = np.array([[float(v) for v in r[: 3 + nf]] for r in rows])
    sweep = np.array([int(r[3 + nf]) for r in rows], dtype=np.int64)
    src = np.array([int(r[4 + nf]) for r in rows], dtype=np.int64)
    return RadarPointCloud(arr[:, :3], arr[:, 3:], sweep, timestamp, src)


def save_sequence(seq: FrameSequence, out_dir) -> list[Path]:
    """Write `scene.json`, `radar_<k>.csv`, `cam_<k>_<i>.bin`, `depth_<k>_<i>.bin`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    frames = []
    for fr in seq.frames:
        rname = f"radar_{fr.index:03d}.csv"
        fio.atomic_write_text(out / rname, _radar_csv(fr.radar))
        written.append(out / rname)
        cams, cam_files, depth_files = [], [], []
        for i, view in enumerate(fr.cameras):
            cname, dname = f"cam_{fr.index:03d}_{i}.bin", f"depth_{fr.index:03d}_{i}.bin"
            fio.save_array(out / cname, view.features)
            fio.save_array(out / dname, view.depth)
            written += [out / cname, out / dname]
            cams.append(view.camera.to_dict())
            cam_files.append(cname)
            depth_files.append(dname)
        frames.append({
            "index": fr.index,
            "timestamp": fr.timestamp,
            "ego_pose": fr.ego_pose.tolist(),
            "objects": [o.to_dict() for o in fr.objects],
            "cameras": cams,
            "radar_file": rname,
            "camera_files": cam_files,
            "depth_files": depth_files,
        })
    doc = {
        "format": "crtbev-scene",
        "version": 1,
        "t_s": seq.t_s,
        "config": to_dict(seq.config) if seq.config is not None else None,
        "frames": frames,
    }
    fio.write_json(out / "scene.json", doc)
    written.append(out / "scene.json")
    return written


def load_sequence(scene_dir) -> FrameSequence:
    root = Path(scene_dir)
    doc = json.loads((root / "scene.json").read_text())
    cfg = from_dict(SceneConfig, doc["config"]) if doc.get("config") else None
    frames = []
    for fd in doc["frames"]:
        radar = _read_radar_csv(root / fd["radar_file"], fd["timestamp"])
        views = []
        for cam_d, cf, df in zip(fd["cameras"], fd["camera_files"], fd["depth_files"]):
            depth = fio.load_array(root / df)[0]
            views.append(CameraView(CameraModel.from_dict(cam_d), fio.load_array(root / cf), depth))
        objs = [GtObject.from_dict(o) for o in fd["objects"]]
        frames.append(Frame(fd["index"], fd["timestamp"], radar, views, objs, np.array(fd["ego_pose"])))
    return FrameSequence(frames, doc["t_s"], cfg)
