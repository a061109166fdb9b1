"""Multi-view fusion: radar-enhanced perspective features, depth lift, gated BEV fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import io as fio
from .geometry import CameraModel, Grid2D, GridSpec, cell_azimuths, column_azimuths, wrap_angle
from .rng import substream
from .synth import RADAR_FEATURES, RadarPointCloud

PILLAR_INPUTS = ("x_rel", "y_rel", "z", *RADAR_FEATURES, "sweep_age")


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return expit(x)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"layer expects {self.n_in} inputs, got {x.shape[-1]}")
        return x @ self.weight.T + self.bias

    def conv1x1(self, x: np.ndarray) -> np.ndarray:
        """Apply over the channel axis of a channel-first array (C, ...)."""
        return np.moveaxis(self(np.moveaxis(x, 0, -1)), -1, 0)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "LinearLayer":
        k = 1.0 / np.sqrt(n_in)
        return cls(rng.uniform(-k, k, (n_out, n_in)), rng.uniform(-k, k, n_out))

    @classmethod
    def identity(cls, n: int) -> "LinearLayer":
        return cls(np.eye(n), np.zeros(n))


def mlp2(layers, x):
    """Two linear layers with a ReLU in between."""
    return layers[1](relu(layers[0](x)))


@dataclass
class MvfWeights:
    channels: int
    depth_bins: int
    compress_w: tuple[LinearLayer, LinearLayer]
    compress_h: tuple[LinearLayer, LinearLayer]
    mlp1: LinearLayer
    mlp2: LinearLayer
    mlp3: LinearLayer
    persp_conv: LinearLayer
    depth_seg: LinearLayer
    gate_cam: LinearLayer
    gate_radar: LinearLayer
    fuse: LinearLayer
    pillar: list[LinearLayer] = field(default_factory=list)
    init_seed: int = 0

    def __post_init__(self):
        c = self.channels
        expect = {
            "compress_w.0": (c, c), "compress_w.1": (c, c),
            "compress_h.0": (c, c), "compress_h.1": (c, c),
            "mlp1": (c, 2 * c), "mlp2": (c, c), "mlp3": (1, c),
            "persp_conv": (c, 2 * c), "depth_seg": (self.depth_bins + 1, c),
            "gate_cam": (c, 2 * c), "gate_radar": (c, 2 * c), "fuse": (c, 2 * c),
        }
        for name, layer in self.layers().items():
            if name in expect and layer.weight.shape != expect[name]:
                raise ValueError(f"{name}: expected weight {expect[name]}, got {layer.weight.shape}")
        if self.pillar and self.pillar[-1].n_out != c:
            raise ValueError("pillar encoder must end in `channels` outputs")

    def layers(self) -> dict[str, LinearLayer]:
        out = {
            "compress_w.0": self.compress_w[0], "compress_w.1": self.compress_w[1],
            "compress_h.0": self.compress_h[0], "compress_h.1": self.compress_h[1],
            "mlp1": self.mlp1, "mlp2": self.mlp2, "mlp3": self.mlp3,
            "persp_conv": self.persp_conv, "depth_seg": self.depth_seg,
            "gate_cam": self.gate_cam, "gate_radar": self.gate_radar, "fuse": self.fuse,
        }
        for i, layer in enumerate(self.pillar):
            out[f"pillar.{i}"] = layer
        return out

    @classmethod
    def init(cls, seed: int, channels: int, depth_bins: int, pillar_in: int = len(PILLAR_INPUTS)):
        rng = substream(seed, "weights", "mvf")
        c = channels
        lin = lambda i, o: LinearLayer.init(rng, i, o)  # noqa: E731
        return cls(
            channels=c,
            depth_bins=depth_bins,
            compress_w=(lin(c, c), lin(c, c)),
            compress_h=(lin(c, c), lin(c, c)),
            mlp1=lin(2 * c, c),
            mlp2=lin(c, c),
            mlp3=lin(c, 1),
            persp_conv=lin(2 * c, c),
            depth_seg=lin(c, depth_bins + 1),
            gate_cam=lin(2 * c, c),
            gate_radar=lin(2 * c, c),
            fuse=lin(2 * c, c),
            pillar=[lin(pillar_in, c)],
            init_seed=seed,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"meta": np.array([self.channels, self.depth_bins, len(self.pillar), self.init_seed],
                                   dtype=float)}
        for name, layer in self.layers().items():
            arrays[f"{name}.weight"] = layer.weight
            arrays[f"{name}.bias"] = layer.bias
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "MvfWeights":
        c, b, n_pillar, seed = (int(v) for v in arrays["meta"])
        get = lambda n: LinearLayer(arrays[f"{n}.weight"], arrays[f"{n}.bias"])  # noqa: E731
        return cls(
            channels=c,
            depth_bins=b,
            compress_w=(get("compress_w.0"), get("compress_w.1")),
            compress_h=(get("compress_h.0"), get("compress_h.1")),
            mlp1=get("mlp1"), mlp2=get("mlp2"), mlp3=get("mlp3"),
            persp_conv=get("persp_conv"), depth_seg=get("depth_seg"),
            gate_cam=get("gate_cam"), gate_radar=get("gate_radar"), fuse=get("fuse"),
            pillar=[get(f"pillar.{i}") for i in range(n_pillar)],
            init_seed=seed,
        )

    def save(self, path) -> None:
        fio.save_bundle(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "MvfWeights":
        return cls.from_arrays(fio.load_bundle(path))


@dataclass
class DepthSegOutput:
    depth_logits: np.ndarray  # (b, H, W)
    foreground: np.ndarray  # (1, H, W)
    bin_edges: np.ndarray  # (b + 1,)

    @property
    def depth_prob(self) -> np.ndarray:
        return softmax(self.depth_logits, axis=0)

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def depth_bin_edges(bins: int, near: float = 1.0, far: float = 60.0) -> np.ndarray:
    return np.linspace(near, far, bins + 1)


def compress_features(feat: np.ndarray, w: MvfWeights) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool a (C, H, W) map over height and width, then run the compress MLPs.

    Returns W_c with shape (C, 1, W) and H_c with shape (C, H, 1).
    """
    if feat.ndim != 3 or feat.shape[0] != w.channels:
        raise ValueError(f"expected ({w.channels}, H, W) features, got {feat.shape}")
    col = mlp2(w.compress_w, feat.max(axis=1).T).T  # (C, W)
    row = mlp2(w.compress_h, feat.max(axis=2).T).T  # (C, H)
    return col[:, None, :], row[:, :, None]


def azimuth_group(cam: CameraModel, grid: GridSpec, m: int) -> np.ndarray:
    """Per image column, the `m` linear cell indices with nearest azimuth.

    Ties go to the lower linear index (x * y_cells + y).
    """
    if not 1 <= m <= grid.n_cells:
        raise ValueError(f"M must be in [1, {grid.n_cells}]")
    theta_r = cell_azimuths(grid).reshape(-1)
    theta_c = column_azimuths(cam)
    diff = np.abs(wrap_angle(theta_c[:, None] - theta_r[None, :]))
    order = np.argsort(diff, axis=1, kind="stable")
    return order[:, :m]


def rca_columns(wc: np.ndarray, radar: np.ndarray, w: MvfWeights) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth attention for a batch of columns.

    wc: (J, C) compressed column features; radar: (J, M, C) grouped radar
    features. Returns the enhanced columns (J, C) and attention weights (J, M).
    """
    j, m, c = radar.shape
    pair = np.concatenate([np.broadcast_to(wc[:, None, :], (j, m, c)), radar], axis=-1)
    inter = w.mlp2(relu(w.mlp1(pair)))  # (J, M, C)
    alpha = softmax(w.mlp3(inter)[..., 0], axis=1)
    return np.einsum("jm,jmc->jc", alpha, inter), alpha


def pixelwise_fuse(wc_j: np.ndarray, radar_feats: np.ndarray, w: MvfWeights) -> np.ndarray:
    if radar_feats.shape[0] < 1:
        raise ValueError("need at least one radar feature")
    out, _ = rca_columns(np.asarray(wc_j)[None], np.asarray(radar_feats)[None], w)
    return out[0]


def radar_camera_attention(wc: np.ndarray, radar_bev: Grid2D, groups: np.ndarray,
                           w: MvfWeights) -> np.ndarray:
    """Enhance every column of W_c (C, 1, W) with its azimuth group; returns (C, 1, W)."""
    flat = radar_bev.data.reshape(radar_bev.channels, -1).T  # (cells, C)
    out, _ = rca_columns(wc[:, 0, :].T, flat[groups], w)
    return out.T[:, None, :]


def enhance_perspective(feat: np.ndarray, wbar: np.ndarray, hc: np.ndarray, w: MvfWeights) -> np.ndarray:
    c, h, wd = feat.shape
    if wbar.shape != (c, 1, wd) or hc.shape != (c, h, 1):
        raise ValueError("W_bar / H_c shapes do not match the feature map")
    fbar = wbar * hc
    return w.persp_conv.conv1x1(np.concatenate([fbar, feat], axis=0))


def depth_seg_head(feat: np.ndarray, w: MvfWeights, bin_edges: np.ndarray | None = None) -> DepthSegOutput:
    if bin_edges is None:
        bin_edges = depth_bin_edges(w.depth_bins)
    out = w.depth_seg.conv1x1(feat)
    return DepthSegOutput(out[:-1], sigmoid(out[-1:]), np.asarray(bin_edges, dtype=float))


def lift_to_bev(feat: np.ndarray, depth: DepthSegOutput, cam: CameraModel, grid: GridSpec,
                tau_p: float) -> Grid2D:
    """Splat foreground pixels along their rays at every bin center, weighted by depth prob."""
    c = feat.shape[0]
    keep = depth.foreground[0] >= tau_p  # (H, W)
    out = np.zeros((c, grid.n_cells))
    if not keep.any():
        return Grid2D(grid, out.reshape(c, *grid.shape))
    rays = cam.pixel_rays()[keep]  # (P, 3)
    prob = depth.depth_prob[:, keep]  # (b, P)
    fk = feat[:, keep]  # (C, P)
    centers = depth.bin_centers
    pts = cam.translation + centers[:, None, None] * rays[None]  # (b, P, 3)
    ix, iy, ok = grid.locate(pts[..., :2])
    lin = (ix * grid.y_cells + iy)[ok]
    wgt = prob[ok]  # (S,)
    pix = np.broadcast_to(np.arange(rays.shape[0]), ok.shape)[ok]
    for ch in range(c):
        out[ch] = np.bincount(lin, weights=wgt * fk[ch, pix], minlength=grid.n_cells)
    return Grid2D(grid, out.reshape(c, *grid.shape))


def radar_bev_encode(cloud: RadarPointCloud, grid: GridSpec, pillar: list[LinearLayer],
                     sweep_period: float = 1.0 / 12.0) -> Grid2D:
    """Per-cell max-pool of per-point embeddings (x_rel, y_rel, z, features, sweep_age)."""
    c = pillar[-1].n_out
    out = np.zeros((c, grid.n_cells))
    if len(cloud) == 0:
        return Grid2D(grid, out.reshape(c, *grid.shape))
    ix, iy, ok = grid.locate(cloud.xyz[:, :2])
    cx = grid.origin[0] + (ix + 0.5) * grid.cell_size
    cy = grid.origin[1] + (iy + 0.5) * grid.cell_size
    x = np.column_stack([
        cloud.xyz[:, 0] - cx,
        cloud.xyz[:, 1] - cy,
        cloud.xyz[:, 2],
        cloud.features,
        cloud.sweep * sweep_period,
    ])[ok]
    emb = x
    for layer in pillar:
        emb = relu(layer(emb))
    lin = (ix * grid.y_cells + iy)[ok]
    # embeddings are post-ReLU, so a zero floor leaves every per-cell max unchanged
    for ch in range(c):
        np.maximum.at(out[ch], lin, emb[:, ch])
    return Grid2D(grid, out.reshape(c, *grid.shape))


def gated_fuse(cam_bev: Grid2D, radar_bev: Grid2D, w: MvfWeights) -> Grid2D:
    if cam_bev.spec != radar_bev.spec or cam_bev.channels != radar_bev.channels:
        raise ValueError("camera and radar BEV grids must share spec and channel count")
    both = np.concatenate([cam_bev.data, radar_bev.data], axis=0)
    g_c = sigmoid(w.gate_cam.conv1x1(both))
    g_r = sigmoid(w.gate_radar.conv1x1(both))
    fused = w.fuse.conv1x1(np.concatenate([g_c * cam_bev.data, g_r * radar_bev.data], axis=0))
    return Grid2D(cam_bev.spec, fused)
