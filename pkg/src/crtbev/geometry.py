"""Grid, camera and box geometry shared by every stage.

Frame conventions (fixed once, used everywhere):

* ego / world: x forward, y left, z up, meters.
* camera: identical axes to ego for an identity rotation, so the optical
  axis is camera +x; image u grows to the right (camera -y), v grows
  downward (camera -z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays.

    Only correctly rounded arithmetic is used (no trig round trip), so the
    result, and any tie built on it, is identical across platforms.
    """
    theta = np.asarray(theta, dtype=float)
    two_pi = 2.0 * np.pi
    out = theta - two_pi * np.ceil((theta - np.pi) / two_pi)
    out = np.where(out <= -np.pi, out + two_pi, out)
    out = np.where(out > np.pi, out - two_pi, out)
    # in-range values pass through untouched so wrapping is idempotent
    out = np.where((theta > -np.pi) & (theta <= np.pi), theta, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class GridSpec:
    x_cells: int
    y_cells: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.x_cells <= 0 or self.y_cells <= 0:
            raise ValueError("grid must have at least one cell per axis")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.x_cells, self.y_cells)

    @property
    def n_cells(self) -> int:
        return self.x_cells * self.y_cells

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) in meters."""
        x0, y0 = self.origin
        return (x0, x0 + self.x_cells * self.cell_size, y0, y0 + self.y_cells * self.cell_size)

    def cell_center(self, x: int, y: int) -> tuple[float, float]:
        return (
            self.origin[0] + (x + 0.5) * self.cell_size,
            self.origin[1] + (y + 0.5) * self.cell_size,
        )

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinates as two (X, Y) arrays."""
        xs = self.origin[0] + (np.arange(self.x_cells) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.y_cells) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_square(self, x: int, y: int) -> np.ndarray:
        x0 = self.origin[0] + x * self.cell_size
        y0 = self.origin[1] + y * self.cell_size
        s = self.cell_size
        return np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]])

    def locate(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map metric points (..., 2) to integer cell indices plus an in-grid mask."""
        xy = np.asarray(xy, dtype=float)
        ix = np.floor((xy[..., 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((xy[..., 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        ok = (ix >= 0) & (ix < self.x_cells) & (iy >= 0) & (iy < self.y_cells)
        return ix, iy, ok

    def to_dict(self) -> dict:
        return {
            "x_cells": self.x_cells,
            "y_cells": self.y_cells,
            "cell_size": self.cell_size,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["x_cells"]), int(d["y_cells"]), float(d["cell_size"]), tuple(d["origin"]))


@dataclass
class Grid2D:
    """Dense (channels, x, y) feature grid over a GridSpec."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[1:] != self.spec.shape:
            raise ValueError(
                f"grid data shape {self.data.shape} does not match spec {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data must be finite")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int) -> "Grid2D":
        return cls(spec, np.zeros((channels, *spec.shape)))

    def copy(self) -> "Grid2D":
        return Grid2D(self.spec, self.data.copy())


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-9
        ):
            raise ValueError("camera rotation must be orthonormal with det +1")

    @classmethod
    def from_yaw(cls, yaw: float, image_w: int, image_h: int, hfov: float, height: float = 1.0):
        """Pinhole camera on the ego z-axis looking along ego azimuth `yaw`."""
        fx = (image_w / 2.0) / math.tan(hfov / 2.0)
        return cls(
            fx=fx,
            fy=fx,
            cx=image_w / 2.0,
            cy=image_h / 2.0,
            image_w=image_w,
            image_h=image_h,
            rotation=rot_z(yaw),
            translation=np.array([0.0, 0.0, height]),
        )

    def pixel_rays(self) -> np.ndarray:
        """Ego-frame ray directions (H, W, 3) through pixel centers.

        Rays are scaled so the optical-axis component is 1, hence a point at
        optical depth d sits at translation + d * ray.
        """
        u = np.arange(self.image_w) + 0.5
        v = np.arange(self.image_h) + 0.5
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [np.ones_like(uu), -(uu - self.cx) / self.fx, -(vv - self.cy) / self.fy], axis=-1
        )
        return d_cam @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "image_w": self.image_w,
            "image_h": self.image_h,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "image_w", "image_h")},
                   rotation=np.array(d["rotation"]), translation=np.array(d["translation"]))


@dataclass
class GtObject:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float]
    class_id: int = 0

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.dims = tuple(float(c) for c in self.dims)
        self.velocity = tuple(float(c) for c in self.velocity)
        self.yaw = wrap_angle(float(self.yaw))
        if min(self.dims) <= 0:
            raise ValueError("object dims must be positive")

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)

    def to_dict(self) -> dict:
        return {
            "center": list(self.center),
            "dims": list(self.dims),
            "yaw": self.yaw,
            "velocity": list(self.velocity),
            "class_id": self.class_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GtObject":
        return cls(tuple(d["center"]), tuple(d["dims"]), d["yaw"], tuple(d["velocity"]),
                   int(d["class_id"]))


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass
class Polygon2D:
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[0] < 3 or self.vertices.shape[1] != 2:
            raise ValueError("polygon needs at least three (x, y) vertices")
        if polygon_area(self.vertices) <= 0:
            raise ValueError("polygon must be counter-clockwise with positive area")

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return (lo[0], hi[0], lo[1], hi[1])


def azimuth_of_column(cam: CameraModel, j: int) -> float:
    if not 0 <= j < cam.image_w:
        raise IndexError(f"column {j} outside image width {cam.image_w}")
    d = cam.rotation @ np.array([1.0, -(j + 0.5 - cam.cx) / cam.fx, 0.0])
    return wrap_angle(math.atan2(d[1], d[0]))


def column_azimuths(cam: CameraModel) -> np.ndarray:
    return np.array([azimuth_of_column(cam, j) for j in range(cam.image_w)])


def azimuth_of_cell(spec: GridSpec, x: int, y: int) -> float:
    if not (0 <= x < spec.x_cells and 0 <= y < spec.y_cells):
        raise IndexError(f"cell ({x}, {y}) outside grid")
    cx, cy = spec.cell_center(x, y)
    if cx == 0.0 and cy == 0.0:
        raise ValueError("degenerate azimuth")
    return wrap_angle(math.atan2(cy, cx))


def cell_azimuths(spec: GridSpec) -> np.ndarray:
    """Azimuth of every cell center, shape (X, Y)."""
    xs, ys = spec.centers()
    if np.any((xs == 0.0) & (ys == 0.0)):
        raise ValueError("degenerate azimuth")
    return wrap_angle(np.arctan2(ys, xs))


def bev_footprint(obj: GtObject) -> Polygon2D:
    half_l, half_w = obj.dims[0] / 2.0, obj.dims[1] / 2.0
    local = np.array([[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]])
    # start from the rear-right corner so yaw=0 lists (-l,-w), (l,-w), (l,w), (-l,w)
    local = np.roll(local, -2, axis=0)
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    rot = np.array([[c, -s], [s, c]])
    return Polygon2D(local @ rot.T + np.array(obj.center[:2]))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` against the convex CCW polygon `clip`."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=float).reshape(-1, 2)


def intersection_area(a: Polygon2D | np.ndarray, b: Polygon2D | np.ndarray) -> float:
    va = a.vertices if isinstance(a, Polygon2D) else a
    vb = b.vertices if isinstance(b, Polygon2D) else b
    return max(polygon_area(clip_convex(va, vb)), 0.0)


def assert_disjoint(polys: list[Polygon2D], tol: float = 1e-9) -> None:
    """Raise if any two footprints overlap with positive area."""
    for i in range(len(polys)):
        bi = polys[i].bounds()
        for j in range(i + 1, len(polys)):
            bj = polys[j].bounds()
            if bi[1] <= bj[0] or bj[1] <= bi[0] or bi[3] <= bj[2] or bj[3] <= bi[2]:
                continue
            if intersection_area(polys[i], polys[j]) > tol:
                raise ValueError(f"ground-truth footprints {i} and {j} overlap")


def _cell_range(poly: Polygon2D, spec: GridSpec) -> tuple[int, int, int, int]:
    """Inclusive index box of cells that can intersect `poly`."""
    xmin, xmax, ymin, ymax = poly.bounds()
    s = spec.cell_size
    i0 = max(int(math.floor((xmin - spec.origin[0]) / s)), 0)
    i1 = min(int(math.floor((xmax - spec.origin[0]) / s)), spec.x_cells - 1)
    j0 = max(int(math.floor((ymin - spec.origin[1]) / s)), 0)
    j1 = min(int(math.floor((ymax - spec.origin[1]) / s)), spec.y_cells - 1)
    return i0, i1, j0, j1


def cell_box_overlap_ratio(spec: GridSpec, x: int, y: int, polys: list[Polygon2D]) -> float:
    """Fraction of cell (x, y) covered by the union of disjoint footprints."""
    if not (0 <= x < spec.x_cells and 0 <= y < spec.y_cells):
        raise IndexError(f"cell ({x}, {y}) outside grid")
    square = spec.cell_square(x, y)
    covered = 0.0
    for p in polys:
        i0, i1, j0, j1 = _cell_range(p, spec)
        if i0 <= x <= i1 and j0 <= y <= j1:
            covered += intersection_area(p.vertices, square)
    ratio = covered / (spec.cell_size * spec.cell_size)
    if ratio > 1.0 + 1e-9:
        raise ValueError("footprints overlap inside a cell; union area exceeds the cell")
    return min(ratio, 1.0)


def per_object_overlap_area(spec: GridSpec, polys: list[Polygon2D]) -> np.ndarray:
    """Intersection area of every footprint with every cell, shape (n_polys, X, Y).

    Uses exactly the same clipping calls as `cell_box_overlap_ratio`, so
    summing over polygons in order reproduces it bit for bit.
    """
    out = np.zeros((len(polys), *spec.shape))
    for k, poly in enumerate(polys):
        i0, i1, j0, j1 = _cell_range(poly, spec)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                out[k, i, j] = intersection_area(poly.vertices, spec.cell_square(i, j))
    return out
