"""Motion-guided temporal fusion: velocity-driven warping and occupancy-gated recurrence."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from . import io as fio
from .geometry import Grid2D, GridSpec
from .mvf import LinearLayer


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class ShiftField:
    shift: Grid2D  # (2, X, Y) displacement in cells
    dynamic: np.ndarray  # (X, Y) bool

    def __post_init__(self):
        if self.shift.channels != 2 or self.dynamic.shape != self.shift.spec.shape:
            raise ValueError("shift field needs 2 channels and a matching dynamic mask")


def compute_shift(motion: Grid2D, t_s: float, tau_v: float, cell_size: float) -> ShiftField:
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    vx, vy = motion.data
    speed = np.sqrt(vx * vx + vy * vy)
    shift = np.stack([vx * t_s / cell_size, vy * t_s / cell_size])
    return ShiftField(Grid2D(motion.spec, shift), speed > tau_v)


def warp(prev: Grid2D, shifts: ShiftField, static_passthrough: bool = True) -> Grid2D:
    """Scatter every cell to its rounded shifted target and average per target.

    Static cells stay in place (or are dropped when `static_passthrough` is
    False); targets that receive nothing are zero, out-of-grid targets vanish.
    """
    spec = prev.spec
    if shifts.shift.spec != spec:
        raise ValueError("shift field and feature grid specs differ")
    nx, ny = spec.shape
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    dyn = shifts.dynamic
    if not dyn.any() and static_passthrough:
        return prev.copy()
    di = round_half_away(shifts.shift.data[0]).astype(np.int64)
    dj = round_half_away(shifts.shift.data[1]).astype(np.int64)
    ti = np.where(dyn, ii + di, ii).ravel()
    tj = np.where(dyn, jj + dj, jj).ravel()
    src = np.ones(nx * ny, dtype=bool) if static_passthrough else dyn.ravel()
    ok = src & (ti >= 0) & (ti < nx) & (tj >= 0) & (tj < ny)
    lin = (ti * ny + tj)[ok]
    count = np.bincount(lin, minlength=nx * ny)
    flat = prev.data.reshape(prev.channels, -1)
    out = np.zeros_like(flat)
    hit = count > 0
    for c in range(prev.channels):
        total = np.bincount(lin, weights=flat[c, ok], minlength=nx * ny)
        out[c, hit] = total[hit] / count[hit]
    return Grid2D(spec, out.reshape(prev.data.shape))


def averaging_reduction(channels: int) -> LinearLayer:
    """1x1 conv 2C -> C that averages the two concatenated halves."""
    eye = np.eye(channels)
    return LinearLayer(np.hstack([0.5 * eye, 0.5 * eye]), np.zeros(channels))


def fuse_step(prev_warped: Grid2D, curr: Grid2D, occ: Grid2D, reduce: LinearLayer,
              gating: Literal["soft", "hard"] = "soft", tau_b: float = 0.05,
              gate_both: bool = True) -> Grid2D:
    if prev_warped.spec != curr.spec or occ.spec != curr.spec:
        raise ValueError("grids in a fuse step must share a spec")
    if prev_warped.channels != curr.channels or occ.channels != 1:
        raise ValueError("fuse step needs equal feature channels and a 1-channel occupancy")
    gate = occ.data if gating == "soft" else (occ.data >= tau_b).astype(float)
    if gate_both:
        both = np.concatenate([prev_warped.data, curr.data]) * gate
    else:
        both = np.concatenate([prev_warped.data * gate, curr.data])
    return Grid2D(curr.spec, reduce.conv1x1(both))


class MemoryBank:
    """Fused BEV maps keyed by timestamp, oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: OrderedDict[float, Grid2D] = OrderedDict()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, ts: float) -> bool:
        return float(ts) in self._items

    def timestamps(self) -> list[float]:
        return sorted(self._items)

    def get(self, ts: float) -> Grid2D:
        return self._items[float(ts)]

    def put(self, ts: float, grid: Grid2D) -> None:
        self._items[float(ts)] = grid.copy()
        while len(self._items) > self.capacity:
            del self._items[min(self._items)]

    def clear(self) -> None:
        self._items.clear()

    def save(self, directory) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        index = []
        for k, ts in enumerate(self.timestamps()):
            name = f"bank_{k:03d}.bin"
            fio.save_array(root / name, self._items[ts].data)
            index.append({"timestamp": ts, "file": name})
        spec = next(iter(self._items.values())).spec.to_dict() if self._items else None
        fio.write_json(root / "index.json", {"capacity": self.capacity, "grid": spec, "entries": index})

    @classmethod
    def load(cls, directory) -> "MemoryBank":
        root = Path(directory)
        doc = json.loads((root / "index.json").read_text())
        bank = cls(doc["capacity"])
        if doc["grid"] is not None:
            spec = GridSpec.from_dict(doc["grid"])
            for e in doc["entries"]:
                bank.put(e["timestamp"], Grid2D(spec, fio.load_array(root / e["file"])))
        return bank


@dataclass
class MgtfConfig:
    n_frames: int = 6
    t_s: float = 0.5
    tau_v: float = 1.0
    tau_b: float = 0.05
    gating: Literal["soft", "hard"] = "soft"
    gate_both: bool = True
    static_passthrough: bool = True
    warp_enabled: bool = True

    def __post_init__(self):
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        if self.tau_v < 0:
            raise ValueError("tau_v must be >= 0")


@dataclass
class MgtfWeights:
    reduce: LinearLayer
    final: LinearLayer

    @classmethod
    def averaging(cls, channels: int) -> "MgtfWeights":
        return cls(averaging_reduction(channels), LinearLayer.identity(channels))


@dataclass
class MgtfTrace:
    output: Grid2D
    fused: list[Grid2D] = field(default_factory=list)  # B_hat per timestamp, oldest first
    recomputed: list[float] = field(default_factory=list)


def _cached_prefix(bank: Optional[MemoryBank], timestamps: list[float]) -> int:
    """Length of the longest prefix of `timestamps` already held by the bank."""
    n = 0
    if bank is not None:
        while n < len(timestamps) and timestamps[n] in bank:
            n += 1
    return n


def run_mgtf(bevs: list[Grid2D], motions: list[Grid2D], occs: list[Grid2D], cfg: MgtfConfig,
             weights: MgtfWeights, bank: Optional[MemoryBank] = None,
             timestamps: Optional[list[float]] = None,
             poses: Optional[list[np.ndarray]] = None) -> MgtfTrace:
    """Recurrent fusion over N+1 aligned maps, oldest first.

    When `bank` already holds fused maps for a prefix of `timestamps`, the
    recurrence restarts from the newest cached one. `poses` (ego-to-world,
    4x4) turns on rigid resampling of the history into each new ego frame.
    """
    n = cfg.n_frames
    if not (len(bevs) == len(motions) == len(occs) == n + 1):
        raise ValueError(f"expected {n + 1} aligned maps, got {len(bevs)}/{len(motions)}/{len(occs)}")
    if timestamps is None:
        timestamps = [k * cfg.t_s for k in range(n + 1)]
    if len(timestamps) != n + 1 or any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise ValueError("timestamps must be strictly increasing and match the sequence")
    if poses is not None and len(poses) != n + 1:
        raise ValueError("poses must match the sequence length")
    spec = bevs[0].spec
    cached = _cached_prefix(bank, timestamps)
    recomputed: list[float] = []
    if cached:
        fused = [bank.get(t) for t in timestamps[:cached]]
    else:
        fused = [bevs[0].copy()]
        recomputed.append(timestamps[0])
        if bank is not None:
            bank.put(timestamps[0], fused[0])
    hat = fused[-1]
    for k in range(len(fused), n + 1):
        motion = motions[k - 1]
        if poses is not None:
            hat = align_to_ego(hat, poses[k - 1], poses[k])
            motion = align_to_ego(motion, poses[k - 1], poses[k], vector=True)
        if cfg.warp_enabled:
            shifts = compute_shift(motion, cfg.t_s, cfg.tau_v, spec.cell_size)
            hat = warp(hat, shifts, cfg.static_passthrough)
        hat = fuse_step(hat, bevs[k], occs[k], weights.reduce, cfg.gating, cfg.tau_b, cfg.gate_both)
        fused.append(hat)
        recomputed.append(timestamps[k])
        if bank is not None:
            bank.put(timestamps[k], hat)
    out = Grid2D(spec, weights.final.conv1x1(hat.data))
    return MgtfTrace(out, fused, recomputed)


def align_to_ego(grid: Grid2D, pose_prev: np.ndarray, pose_curr: np.ndarray,
                 vector: bool = False) -> Grid2D:
    """Nearest-cell resample of a past ego-frame grid into the current ego frame.

    With `vector=True` the two channels are a planar vector field and are
    rotated along with the resampling.
    """
    spec = grid.spec
    xs, ys = spec.centers()
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size), np.ones(xs.size)])
    rel = np.linalg.inv(pose_prev) @ pose_curr  # current ego -> previous ego
    src = (rel @ pts)[:2].T
    ix, iy, ok = spec.locate(src)
    flat = grid.data.reshape(grid.channels, -1)
    out = np.zeros_like(flat)
    out[:, ok] = flat[:, (ix * spec.y_cells + iy)[ok]]
    if vector:
        if grid.channels != 2:
            raise ValueError("vector resampling needs a 2-channel grid")
        out = rel[:2, :2].T @ out
    return Grid2D(spec, out.reshape(grid.data.shape))
