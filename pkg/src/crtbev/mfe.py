"""Motion feature estimation: velocity / occupancy heads, targets, losses, fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import io as fio
from .geometry import GridSpec, Grid2D, GtObject, assert_disjoint, bev_footprint, per_object_overlap_area
from .mvf import sigmoid
from .rng import substream

EPS = 1e-7


class IllConditionedFit(ValueError):
    def __init__(self):
        super().__init__("ill-conditioned fit; increase λ_r")


@dataclass
class LossWeights:
    depth: float = 3.0
    seg: float = 25.0
    vel: float = 1.0
    occ: float = 30.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class HeadWeights:
    """3x3 conv (no activation) followed by a 1x1 conv."""

    conv3_w: np.ndarray  # (hidden, C, 3, 3)
    conv3_b: np.ndarray  # (hidden,)
    conv1_w: np.ndarray  # (out, hidden)
    conv1_b: np.ndarray  # (out,)

    def __post_init__(self):
        for k in ("conv3_w", "conv3_b", "conv1_w", "conv1_b"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=float))
        hid, _, kh, kw = self.conv3_w.shape
        if (kh, kw) != (3, 3) or self.conv3_b.shape != (hid,):
            raise ValueError("bad 3x3 conv shapes")
        if self.conv1_w.shape[1] != hid or self.conv1_b.shape != (self.conv1_w.shape[0],):
            raise ValueError("bad 1x1 conv shapes")

    @property
    def in_channels(self) -> int:
        return self.conv3_w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.conv1_w.shape[0]

    @classmethod
    def init(cls, seed: int, in_channels: int, out_channels: int, hidden: int | None = None,
             name: str = "head") -> "HeadWeights":
        rng = substream(seed, "weights", name)
        hid = hidden or in_channels
        k3 = 1.0 / math.sqrt(9 * in_channels)
        k1 = 1.0 / math.sqrt(hid)
        return cls(rng.uniform(-k3, k3, (hid, in_channels, 3, 3)), rng.uniform(-k3, k3, hid),
                   rng.uniform(-k1, k1, (out_channels, hid)), rng.uniform(-k1, k1, out_channels))

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int) -> "HeadWeights":
        return cls.from_effective(np.zeros((out_channels, 9 * in_channels)), np.zeros(out_channels),
                                  in_channels)

    def effective(self) -> tuple[np.ndarray, np.ndarray]:
        """Collapse both convs into one (out, 9C) kernel plus bias."""
        k3 = self.conv3_w.reshape(self.conv3_w.shape[0], -1)
        return self.conv1_w @ k3, self.conv1_w @ self.conv3_b + self.conv1_b

    @classmethod
    def from_effective(cls, kernel: np.ndarray, bias: np.ndarray, in_channels: int) -> "HeadWeights":
        out = kernel.shape[0]
        return cls(kernel.reshape(out, in_channels, 3, 3), np.asarray(bias, dtype=float).copy(),
                   np.eye(out), np.zeros(out))

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{k}": getattr(self, k) for k in ("conv3_w", "conv3_b", "conv1_w", "conv1_b")}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "") -> "HeadWeights":
        return cls(*(arrays[f"{prefix}{k}"] for k in ("conv3_w", "conv3_b", "conv1_w", "conv1_b")))


def save_heads(path, heads: dict[str, HeadWeights]) -> None:
    arrays = {}
    for name, hw in heads.items():
        arrays.update(hw.to_arrays(f"{name}."))
    fio.save_bundle(path, arrays)


def load_heads(path) -> dict[str, HeadWeights]:
    arrays = fio.load_bundle(path)
    names = sorted({k.split(".", 1)[0] for k in arrays})
    return {n: HeadWeights.from_arrays(arrays, f"{n}.") for n in names}


def im2col3(data: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of a (C, X, Y) array as rows (X*Y, 9C).

    Column order is (c, dx, dy), matching `conv3_w.reshape(hidden, -1)`.
    """
    c, nx, ny = data.shape
    pad = np.pad(data, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, nx, ny))
    for dx in range(3):
        for dy in range(3):
            cols[:, dx, dy] = pad[:, dx:dx + nx, dy:dy + ny]
    return cols.reshape(9 * c, nx * ny).T


def head_logits(bev: Grid2D, w: HeadWeights) -> np.ndarray:
    if bev.channels != w.in_channels:
        raise ValueError(f"head expects {w.in_channels} channels, got {bev.channels}")
    patches = im2col3(bev.data)
    hidden = patches @ w.conv3_w.reshape(w.conv3_w.shape[0], -1).T + w.conv3_b
    out = hidden @ w.conv1_w.T + w.conv1_b
    return out.T.reshape(w.out_channels, *bev.spec.shape)


def velocity_head(bev: Grid2D, w: HeadWeights) -> Grid2D:
    if w.out_channels != 2:
        raise ValueError("velocity head must output 2 channels")
    return Grid2D(bev.spec, head_logits(bev, w))


def occupancy_head(bev: Grid2D, w: HeadWeights) -> Grid2D:
    if w.out_channels != 1:
        raise ValueError("occupancy head must output 1 channel")
    return Grid2D(bev.spec, sigmoid(head_logits(bev, w)))


def make_targets(grid: GridSpec, objects: list[GtObject], tau_iou: float = 0.5) -> tuple[Grid2D, Grid2D]:
    """Velocity and occupancy targets from overlap ratios of BEV footprints."""
    if not 0 < tau_iou <= 1:
        raise ValueError("tau_iou must be in (0, 1]")
    motion = np.zeros((2, *grid.shape))
    occ = np.zeros((1, *grid.shape))
    if not objects:
        return Grid2D(grid, motion), Grid2D(grid, occ)
    polys = [bev_footprint(o) for o in objects]
    assert_disjoint(polys)
    areas = per_object_overlap_area(grid, polys)
    ratio = np.zeros(grid.shape)
    for a in areas:
        ratio = ratio + a
    ratio = np.minimum(ratio / (grid.cell_size * grid.cell_size), 1.0)
    pos = ratio >= tau_iou
    owner = np.argmax(areas, axis=0)  # first object wins ties
    vel = np.array([o.velocity for o in objects])  # (K, 2)
    motion[:, pos] = vel[owner[pos]].T
    occ[0, pos] = 1.0
    return Grid2D(grid, motion), Grid2D(grid, occ)


# ------------------------------------------------------------------- losses

def focal_loss(p: np.ndarray, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Mean binary focal loss on probabilities clamped to [EPS, 1 - EPS]."""
    p = np.clip(np.asarray(p, dtype=float), EPS, 1 - EPS)
    y = np.asarray(y, dtype=float)
    pt = np.where(y > 0.5, p, 1 - p)
    at = np.where(y > 0.5, alpha, 1 - alpha)
    return float(np.mean(-at * (1 - pt) ** gamma * np.log(pt)))


def focal_loss_and_grad(z: np.ndarray, y: np.ndarray, alpha: float = 0.25,
                        gamma: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss of logits and its derivative d(loss)/d(logit).

    With p_t the probability of the true class and s = +1 for positives,
    -1 for negatives:  dL/dz = s * a_t * (1 - p_t)^g * (g * p_t * ln p_t - (1 - p_t)).
    The gradient is zero where the probability clamp is active.
    """
    p = sigmoid(z)
    pos = np.asarray(y) > 0.5
    pt = np.where(pos, p, 1 - p)
    at = np.where(pos, alpha, 1 - alpha)
    ln = np.log(np.clip(pt, EPS, 1 - EPS))
    q = 1 - pt
    loss = -at * q ** gamma * ln
    g = np.where(pos, at, -at) * q ** gamma * (gamma * pt * ln - q)
    clamped = (p < EPS) | (p > 1 - EPS)
    return loss, np.where(clamped, 0.0, g)


def focal_grad_logits(z: np.ndarray, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Elementwise d(focal)/d(logit), before the mean's 1/n."""
    return focal_loss_and_grad(z, y, alpha, gamma)[1]


def focal_hess_logits(z: np.ndarray, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Elementwise second derivative of the focal loss in the logit.

    d2L/dz2 = a_t p_t (1 - p_t)^g (-g^2 p_t ln p_t + (1 - p_t)(g ln p_t + 2g + 1)),
    which turns negative for confidently wrong cells. Zero under the clamp.
    """
    p = sigmoid(z)
    pos = np.asarray(y) > 0.5
    pt = np.where(pos, p, 1 - p)
    at = np.where(pos, alpha, 1 - alpha)
    ln = np.log(np.clip(pt, EPS, 1 - EPS))
    q = 1 - pt
    h = at * pt * q ** gamma * (-gamma * gamma * pt * ln + q * (gamma * ln + 2 * gamma + 1))
    clamped = (p < EPS) | (p > 1 - EPS)
    return np.where(clamped, 0.0, h)


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(np.asarray(p, dtype=float), EPS, 1 - EPS)
    y = np.asarray(y, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def depth_targets(depth_gt: np.ndarray, bin_edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-hot bin targets (b, H, W) and the valid-pixel mask (finite depth)."""
    b = len(bin_edges) - 1
    valid = np.isfinite(depth_gt)
    idx = np.clip(np.searchsorted(bin_edges, np.where(valid, depth_gt, 0.0), side="right") - 1, 0, b - 1)
    onehot = (np.arange(b)[:, None, None] == idx[None]) & valid[None]
    return onehot.astype(float), valid


def depth_loss(depth_prob: np.ndarray, depth_gt: np.ndarray, bin_edges: np.ndarray) -> float:
    """Binary cross-entropy over bins, summed per pixel and averaged over valid pixels."""
    target, valid = depth_targets(depth_gt, bin_edges)
    if not valid.any():
        return 0.0
    p = np.clip(depth_prob[:, valid], EPS, 1 - EPS)
    t = target[:, valid]
    per_pixel = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum(axis=0)
    return float(per_pixel.mean())


def mfe_loss(motion: Grid2D, occ: Grid2D, motion_gt: Grid2D, occ_gt: Grid2D,
             depth_prob: np.ndarray | None = None, depth_gt: np.ndarray | None = None,
             bin_edges: np.ndarray | None = None,
             seg_pred: np.ndarray | None = None, seg_gt: np.ndarray | None = None,
             weights: LossWeights = LossWeights()) -> tuple[float, dict[str, float]]:
    """Weighted sum of depth, segmentation, velocity and occupancy losses.

    The perspective-view terms are optional; absent ones contribute 0.
    """
    if motion.data.shape != motion_gt.data.shape or occ.data.shape != occ_gt.data.shape:
        raise ValueError("prediction and target shapes differ")
    parts = {
        "depth": 0.0,
        "seg": 0.0,
        "vel": float(np.mean((motion.data - motion_gt.data) ** 2)),
        "occ": focal_loss(occ.data, occ_gt.data, weights.focal_alpha, weights.focal_gamma),
    }
    if depth_prob is not None:
        if depth_gt is None or bin_edges is None or depth_prob.shape[1:] != depth_gt.shape:
            raise ValueError("depth prediction needs matching depth_gt and bin_edges")
        parts["depth"] = depth_loss(depth_prob, depth_gt, bin_edges)
    if seg_pred is not None:
        if seg_gt is None or np.shape(seg_pred) != np.shape(seg_gt):
            raise ValueError("segmentation prediction and target shapes differ")
        parts["seg"] = bce(seg_pred, seg_gt)
    total = (weights.depth * parts["depth"] + weights.seg * parts["seg"]
             + weights.vel * parts["vel"] + weights.occ * parts["occ"])
    return total, parts


# ------------------------------------------------------------------ fitting

@dataclass
class HeadSample:
    bev: Grid2D
    motion_gt: Grid2D
    occ_gt: Grid2D


def _design(bev: Grid2D) -> np.ndarray:
    p = im2col3(bev.data)
    return np.hstack([p, np.ones((p.shape[0], 1))])


def normal_equations(samples: list[HeadSample]) -> tuple[np.ndarray, np.ndarray, int]:
    """Accumulate X^T X and X^T Y over 3x3 patches (with an intercept column)."""
    if not samples:
        raise ValueError("need at least one sample grid")
    xtx = xty = None
    n = 0
    for s in samples:
        x = _design(s.bev)
        y = s.motion_gt.data.reshape(2, -1).T
        xtx = x.T @ x if xtx is None else xtx + x.T @ x
        xty = x.T @ y if xty is None else xty + x.T @ y
        n += x.shape[0]
    return xtx, xty, n


def solve_ridge(xtx: np.ndarray, xty: np.ndarray, ridge: float) -> np.ndarray:
    a = xtx + ridge * np.eye(xtx.shape[0])
    if ridge <= 0:
        if np.linalg.matrix_rank(a) < a.shape[0] or np.linalg.cond(a) > 1e12:
            raise IllConditionedFit()
    try:
        return np.linalg.solve(a, xty)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedFit() from exc


def fit_velocity_head(samples: list[HeadSample], ridge: float = 1e-3) -> tuple[HeadWeights, float]:
    xtx, xty, _ = normal_equations(samples)
    sol = solve_ridge(xtx, xty, ridge)  # (9C + 1, 2)
    c = samples[0].bev.channels
    head = HeadWeights.from_effective(sol[:-1].T, sol[-1], c)
    sq = 0.0
    count = 0
    for s in samples:
        r = velocity_head(s.bev, head).data - s.motion_gt.data
        sq += float(np.sum(r * r))
        count += r.size
    return head, sq / count


def occupancy_loss_and_grad(w: HeadWeights, samples: list[HeadSample], alpha: float = 0.25,
                            gamma: float = 2.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean focal loss over all cells and its gradient w.r.t. every head parameter."""
    hid = w.conv3_w.shape[0]
    k3 = w.conv3_w.reshape(hid, -1)
    total = 0.0
    n = 0
    g = {"conv3_w": np.zeros_like(k3), "conv3_b": np.zeros(hid),
         "conv1_w": np.zeros_like(w.conv1_w), "conv1_b": np.zeros_like(w.conv1_b)}
    for s in samples:
        patches = im2col3(s.bev.data)
        hidden = patches @ k3.T + w.conv3_b
        z = hidden @ w.conv1_w.T + w.conv1_b  # (n, 1)
        y = s.occ_gt.data.reshape(1, -1).T
        total += focal_loss(sigmoid(z), y, alpha, gamma) * z.shape[0]
        dz = focal_grad_logits(z, y, alpha, gamma)
        g["conv1_w"] += dz.T @ hidden
        g["conv1_b"] += dz.sum(axis=0)
        dh = dz @ w.conv1_w
        g["conv3_w"] += dh.T @ patches
        g["conv3_b"] += dh.sum(axis=0)
        n += z.shape[0]
    g = {k: v / n for k, v in g.items()}
    g["conv3_w"] = g["conv3_w"].reshape(w.conv3_w.shape)
    return total / n, g


def fit_occupancy_head(samples: list[HeadSample], alpha: float = 0.25, gamma: float = 2.0,
                       l2: float = 1e-6, max_iter: int = 100) -> tuple[HeadWeights, float]:
    """Minimise mean focal loss of a collapsed linear 3x3 head.

    Analytic gradient and Hessian drive a trust-region Newton solver; the
    loss is non-convex for confidently wrong cells, which the trust region
    tolerates.
    """
    c = samples[0].bev.channels
    x = np.vstack([_design(s.bev) for s in samples])
    y = np.concatenate([s.occ_gt.data.reshape(-1) for s in samples])
    scale = np.maximum(np.sqrt(np.mean(x * x, axis=0)), 1e-12)
    x /= scale
    n, d = x.shape
    chunk = 1 << 16

    def fun(wv):
        loss, dz = focal_loss_and_grad(x @ wv, y, alpha, gamma)
        return float(loss.mean()) + 0.5 * l2 * float(wv @ wv), dz @ x / n + l2 * wv

    def hess(wv):
        h = focal_hess_logits(x @ wv, y, alpha, gamma)
        out = l2 * n * np.eye(d)
        for i in range(0, n, chunk):
            xs = x[i:i + chunk]
            out += (xs * h[i:i + chunk, None]).T @ xs
        return out / n

    prior = min(max(float(y.mean()), 1e-3), 1 - 1e-3)
    w0 = np.zeros(d)
    w0[-1] = math.log(prior / (1 - prior)) * scale[-1]
    res = minimize(fun, w0, jac=True, hess=hess, method="trust-exact",
                   options={"maxiter": max_iter, "gtol": 1e-8})
    wv = res.x / scale
    head = HeadWeights.from_effective(wv[None, :-1], wv[-1:], c)
    return head, focal_loss(sigmoid(x @ res.x), y, alpha, gamma)


@dataclass
class FitResult:
    velocity: HeadWeights
    occupancy: HeadWeights
    l_vel: float
    l_occ: float
    n_samples: int
    ridge: float

    def report(self) -> dict:
        return {"l_vel": self.l_vel, "l_occ": self.l_occ, "n_samples": self.n_samples,
                "ridge": self.ridge}


def fit_heads(samples: list[HeadSample], ridge: float = 1e-3, alpha: float = 0.25,
              gamma: float = 2.0) -> FitResult:
    if not samples:
        raise ValueError("need at least one sample grid")
    vel, l_vel = fit_velocity_head(samples, ridge)
    occ, l_occ = fit_occupancy_head(samples, alpha, gamma)
    return FitResult(vel, occ, l_vel, l_occ, len(samples), ridge)
