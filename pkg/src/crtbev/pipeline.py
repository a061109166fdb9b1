"""End-to-end composition: per-frame view fusion, head fitting, temporal fusion, detection."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .evaluate import (Detection, EvalConfig, EvalReport, SceneMatches, detect, gain_table,
                       match_scene, score_matches)
from .geometry import Grid2D, GridSpec
from .mfe import (FitResult, HeadSample, HeadWeights, LossWeights, fit_heads, fit_occupancy_head,
                  make_targets, occupancy_head, velocity_head)
from .mgtf import MemoryBank, MgtfConfig, MgtfWeights, run_mgtf
from .mvf import (MvfWeights, compress_features, depth_bin_edges, depth_seg_head,
                  enhance_perspective, gated_fuse, lift_to_bev, radar_bev_encode,
                  radar_camera_attention, azimuth_group)
from .synth import Frame, FrameSequence

Mode = Literal["motion-aware", "naive-concat", "camera-only"]
MODES = ("motion-aware", "naive-concat", "camera-only")


@dataclass
class MvfConfig:
    m: int = 128
    tau_p: float = 0.25
    depth_bins: int = 32
    depth_near: float = 1.0
    depth_far: float = 60.0
    channels: int = 16
    sweep_period: float = 1.0 / 12.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 <= self.tau_p <= 1.0:
            raise ValueError("tau_p must lie in [0, 1]")
        if self.depth_bins < 1 or not 0 < self.depth_near < self.depth_far:
            raise ValueError("depth bins need b >= 1 and 0 < near < far")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


@dataclass
class MfeConfig:
    tau_iou: float = 0.5
    loss: LossWeights = field(default_factory=LossWeights)
    ridge: float = 1e-3
    max_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.tau_iou <= 1.0:
            raise ValueError("tau_iou must lie in (0, 1]")


@dataclass
class PipelineConfig:
    mvf: MvfConfig = field(default_factory=MvfConfig)
    mfe: MfeConfig = field(default_factory=MfeConfig)
    mgtf: MgtfConfig = field(default_factory=MgtfConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: str = "motion-aware"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def mgtf_for(self, mode: str) -> MgtfConfig:
        cfg = MgtfConfig(**{k: getattr(self.mgtf, k) for k in self.mgtf.__dataclass_fields__})
        if mode == "naive-concat":
            cfg.warp_enabled = False
        return cfg


@dataclass
class FrameFeatures:
    bev: Grid2D
    cam_bev: Grid2D
    radar_bev: Grid2D


class GroupCache:
    """Azimuth groups depend only on the camera and grid, so compute them once."""

    def __init__(self):
        self._cache: dict[tuple, np.ndarray] = {}

    def get(self, cam, grid: GridSpec, m: int) -> np.ndarray:
        key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.image_w, cam.image_h,
               cam.rotation.tobytes(), cam.translation.tobytes(), grid, m)
        if key not in self._cache:
            self._cache[key] = azimuth_group(cam, grid, min(m, grid.n_cells))
        return self._cache[key]


def mvf_forward(frame: Frame, grid: GridSpec, w: MvfWeights, cfg: MvfConfig, mode: str = "motion-aware",
                groups: Optional[GroupCache] = None, timings: Optional[dict] = None) -> FrameFeatures:
    """Radar pillars, azimuth attention per camera, lift, then gated fusion."""
    groups = groups or GroupCache()
    t0 = time.perf_counter()
    if mode == "camera-only":
        radar = Grid2D.zeros(grid, w.channels)
    else:
        radar = radar_bev_encode(frame.radar, grid, w.pillar, cfg.sweep_period)
    t1 = time.perf_counter()
    edges = depth_bin_edges(cfg.depth_bins, cfg.depth_near, cfg.depth_far)
    cam_bev = np.zeros((w.channels, *grid.shape))
    for view in frame.cameras:
        wc, hc = compress_features(view.features, w)
        wbar = radar_camera_attention(wc, radar, groups.get(view.camera, grid, cfg.m), w)
        feat = enhance_perspective(view.features, wbar, hc, w)
        depth = depth_seg_head(feat, w, edges)
        cam_bev += lift_to_bev(feat, depth, view.camera, grid, cfg.tau_p).data
    cam = Grid2D(grid, cam_bev)
    bev = cam if mode == "camera-only" else gated_fuse(cam, radar, w)
    if timings is not None:
        timings["radar_encode"] = timings.get("radar_encode", 0.0) + (t1 - t0)
        timings["mvf"] = timings.get("mvf", 0.0) + (time.perf_counter() - t1)
    return FrameFeatures(bev, cam, radar)


def encode_sequence(seq: FrameSequence, grid: GridSpec, w: MvfWeights, cfg: MvfConfig,
                    mode: str = "motion-aware", groups: Optional[GroupCache] = None) -> list[Grid2D]:
    groups = groups or GroupCache()
    return [mvf_forward(f, grid, w, cfg, mode, groups).bev for f in seq.frames]


def sequence_targets(seq: FrameSequence, grid: GridSpec, tau_iou: float) -> list[tuple[Grid2D, Grid2D]]:
    return [make_targets(grid, f.objects_in_ego(), tau_iou) for f in seq.frames]


@dataclass
class PipelineHeads:
    """Per-frame motion/occupancy heads plus the detection head on the fused map."""

    mfe: FitResult
    detection: HeadWeights
    l_det: float

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.mfe.velocity.to_arrays("velocity."))
        out.update(self.mfe.occupancy.to_arrays("occupancy."))
        out.update(self.detection.to_arrays("detection."))
        return out

    def report(self) -> dict:
        return {**self.mfe.report(), "l_det": self.l_det}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], report: Optional[dict] = None) -> "PipelineHeads":
        r = report or {}
        nan = float("nan")
        mfe = FitResult(HeadWeights.from_arrays(arrays, "velocity."), HeadWeights.from_arrays(arrays, "occupancy."),
                        r.get("l_vel", nan), r.get("l_occ", nan), r.get("n_samples", 0), r.get("ridge", nan))
        return cls(mfe, HeadWeights.from_arrays(arrays, "detection."), r.get("l_det", nan))


@dataclass
class EncodedSuite:
    """MVF outputs and targets for a set of sequences under one mode."""

    scene_ids: list[str]
    sequences: list[FrameSequence]
    bevs: list[list[Grid2D]]
    targets: list[list[tuple[Grid2D, Grid2D]]]


def encode_suite(seqs: list[FrameSequence], scene_ids: list[str], grid: GridSpec, w: MvfWeights,
                 cfg: PipelineConfig, mode: str) -> EncodedSuite:
    groups = GroupCache()
    encoder_mode = "camera-only" if mode == "camera-only" else "motion-aware"
    bevs = [encode_sequence(s, grid, w, cfg.mvf, encoder_mode, groups) for s in seqs]
    targets = [sequence_targets(s, grid, cfg.mfe.tau_iou) for s in seqs]
    return EncodedSuite(scene_ids, seqs, bevs, targets)


def mfe_samples(suite: EncodedSuite) -> list[HeadSample]:
    return [HeadSample(b, m, o) for bs, ts in zip(suite.bevs, suite.targets) for b, (m, o) in zip(bs, ts)]


def fit_mfe(suite: EncodedSuite, cfg: MfeConfig) -> FitResult:
    return fit_heads(mfe_samples(suite), cfg.ridge, cfg.loss.focal_alpha, cfg.loss.focal_gamma)


def _window(n_frames: int, mgtf: MgtfConfig) -> int:
    if n_frames < mgtf.n_frames + 1:
        raise ValueError(f"sequence has {n_frames} frames, temporal fusion needs {mgtf.n_frames + 1}")
    return mgtf.n_frames + 1


@dataclass
class FusedFrame:
    fused: Grid2D  # final B_hat_t
    motion: Grid2D  # M_t from the per-frame head
    occupancy: Grid2D  # O_t from the per-frame head


def fuse_window(bevs: list[Grid2D], timestamps: list[float], end: int, mfe: FitResult, mgtf: MgtfConfig,
                weights: MgtfWeights, bank: Optional[MemoryBank] = None,
                poses: Optional[list[np.ndarray]] = None) -> FusedFrame:
    """Temporal fusion over the N+1 frames ending at index `end`."""
    k = _window(end + 1, mgtf)
    sl = slice(end + 1 - k, end + 1)
    window = bevs[sl]
    motions = [velocity_head(b, mfe.velocity) for b in window]
    occs = [occupancy_head(b, mfe.occupancy) for b in window]
    trace = run_mgtf(window, motions, occs, mgtf, weights, bank, timestamps[sl],
                     None if poses is None else poses[sl])
    return FusedFrame(trace.output, motions[-1], occs[-1])


def window_ends(n_frames: int, mgtf: MgtfConfig, all_windows: bool) -> list[int]:
    _window(n_frames, mgtf)
    return list(range(mgtf.n_frames, n_frames)) if all_windows else [n_frames - 1]


@dataclass
class FusedWindow:
    scene: int  # index into the suite
    frame: int  # index of the fused (current) frame
    out: FusedFrame


def fuse_suite(suite: EncodedSuite, mfe: FitResult, mgtf: MgtfConfig, weights: MgtfWeights,
               all_windows: bool = False) -> list[FusedWindow]:
    out = []
    for i, (seq, bevs) in enumerate(zip(suite.sequences, suite.bevs)):
        ts = [f.timestamp for f in seq.frames]
        poses = [f.ego_pose for f in seq.frames] if seq.config is not None and seq.config.moving_ego else None
        for end in window_ends(len(bevs), mgtf, all_windows):
            out.append(FusedWindow(i, end, fuse_window(bevs, ts, end, mfe, mgtf, weights, poses=poses)))
    return out


def fit_detection(fused: list[FusedWindow], suite: EncodedSuite, cfg: MfeConfig) -> tuple[HeadWeights, float]:
    samples = [HeadSample(f.out.fused, *suite.targets[f.scene][f.frame]) for f in fused]
    return fit_occupancy_head(samples, cfg.loss.focal_alpha, cfg.loss.focal_gamma, max_iter=cfg.max_iter)


@dataclass
class SuiteResult:
    mode: str
    report: EvalReport
    detections: dict[str, list[Detection]]
    fused: list[FusedWindow]
    heads: PipelineHeads


def in_grid(objects: list, spec: GridSpec) -> list:
    """Objects whose center lies inside the grid; the rest cannot be detected."""
    x0, x1, y0, y1 = spec.extent
    return [o for o in objects if x0 <= o.center[0] < x1 and y0 <= o.center[1] < y1]


def detect_suite(fused: list[FusedWindow], suite: EncodedSuite, det_head: HeadWeights,
                 ev: EvalConfig) -> tuple[dict[str, list[Detection]], list[SceneMatches]]:
    dets, matches = {}, []
    for f in fused:
        sid = suite.scene_ids[f.scene]
        key = f"{sid}:{f.frame}" if ev.all_windows else sid
        occ = occupancy_head(f.out.fused, det_head)
        d = detect(occ, f.out.motion, ev.tau_det, ev.nms_radius, ev.smooth)
        dets[key] = d
        gts = in_grid(suite.sequences[f.scene].frames[f.frame].objects_in_ego(), f.out.fused.spec)
        matches.append(match_scene(d, gts, ev.thresholds, key))
    return dets, matches


def fit_pipeline_heads(train: EncodedSuite, cfg: PipelineConfig, mode: str,
                       mfe: Optional[FitResult] = None) -> PipelineHeads:
    """Fit the per-frame heads (unless given) and the mode's detection head."""
    mfe = mfe or fit_mfe(train, cfg.mfe)
    fused = fuse_suite(train, mfe, cfg.mgtf_for(mode), _mgtf_weights(train), cfg.eval.all_windows)
    det, l_det = fit_detection(fused, train, cfg.mfe)
    return PipelineHeads(mfe, det, l_det)


def _mgtf_weights(suite: EncodedSuite) -> MgtfWeights:
    return MgtfWeights.averaging(suite.bevs[0][0].channels)


def evaluate_suite(suite: EncodedSuite, heads: PipelineHeads, cfg: PipelineConfig, mode: str) -> SuiteResult:
    fused = fuse_suite(suite, heads.mfe, cfg.mgtf_for(mode), _mgtf_weights(suite), cfg.eval.all_windows)
    dets, matches = detect_suite(fused, suite, heads.detection, cfg.eval)
    report = score_matches(matches, cfg.eval.bin_edges, cfg.eval.ref_threshold, per_scene=True)
    return SuiteResult(mode, report, dets, fused, heads)


def run_suite(seqs: list[FrameSequence], scene_ids: list[str], grid: GridSpec, w: MvfWeights,
              cfg: PipelineConfig, mode: Optional[str] = None, heads: Optional[PipelineHeads] = None,
              train_seqs: Optional[list[FrameSequence]] = None) -> SuiteResult:
    """Run one pipeline mode over a suite; fits heads when none are supplied.

    Heads are fitted on `train_seqs` when given, otherwise on the evaluated suite.
    """
    mode = mode or cfg.mode
    suite = encode_suite(seqs, scene_ids, grid, w, cfg, mode)
    if heads is None:
        train = suite if train_seqs is None else encode_suite(
            train_seqs, [str(i) for i in range(len(train_seqs))], grid, w, cfg, mode)
        heads = fit_pipeline_heads(train, cfg, mode)
    return evaluate_suite(suite, heads, cfg, mode)


@dataclass
class Comparison:
    gain: dict[str, Optional[float]]
    a: SuiteResult
    b: SuiteResult

    def rows(self) -> list[list[str]]:
        a, b = self.a.report.bin_mean_ap(), self.b.report.bin_mean_ap()
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        out = [["bin", f"ap_{self.a.mode}", f"ap_{self.b.mode}", "gain", "n_gt"]]
        for lb, g in self.gain.items():
            out.append([lb, fmt(a[lb]), fmt(b[lb]), fmt(g), str(self.a.report.bin_counts[lb])])
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def table(self) -> str:
        def cell(v):
            try:
                return f"{float(v):+.4f}"
            except ValueError:
                return v or "-"
        rows = self.rows()
        lines = ["  ".join(f"{c:>18}" for c in rows[0])]
        lines += [f"{r[0]:>18}  " + "  ".join(f"{cell(c):>18}" for c in r[1:4]) + f"  {r[4]:>18}"
                  for r in rows[1:]]
        return "\n".join(lines)


def compare_pipelines(seqs: list[FrameSequence], scene_ids: list[str], grid: GridSpec, w: MvfWeights,
                      cfg: PipelineConfig, mode_a: str = "motion-aware", mode_b: str = "naive-concat",
                      train_seqs: Optional[list[FrameSequence]] = None,
                      heads: Optional[PipelineHeads] = None) -> Comparison:
    """Per-bin AP gain of `mode_a` over `mode_b` on identical scenes and weights.

    Both modes share the MVF weights, the per-frame heads and one detection
    head, fitted on the pooled fused training maps of the two modes so that
    neither mode's feature distribution is favoured. The modes therefore
    differ only in their temporal fusion and encoder.
    """
    if (mode_a == "camera-only") != (mode_b == "camera-only"):
        raise ValueError("compared modes must share an encoder; camera-only is compared via velocity_mse")
    enc = "camera-only" if mode_a == "camera-only" else "motion-aware"
    suite = encode_suite(seqs, scene_ids, grid, w, cfg, enc)
    if heads is None:
        train = suite if train_seqs is None else encode_suite(
            train_seqs, [str(i) for i in range(len(train_seqs))], grid, w, cfg, enc)
        heads = fit_shared_heads(train, cfg, (mode_a, mode_b))
    res = {mode: evaluate_suite(suite, heads, cfg, mode) for mode in (mode_a, mode_b)}
    return Comparison(gain_table(res[mode_a].report, res[mode_b].report), res[mode_a], res[mode_b])


def fit_shared_heads(train: EncodedSuite, cfg: PipelineConfig, modes: tuple[str, ...]) -> PipelineHeads:
    """Per-frame heads plus one detection head fitted on every mode's fused maps."""
    mfe = fit_mfe(train, cfg.mfe)
    samples = []
    for mode in dict.fromkeys(modes):
        for f in fuse_suite(train, mfe, cfg.mgtf_for(mode), _mgtf_weights(train), cfg.eval.all_windows):
            samples.append(HeadSample(f.out.fused, *train.targets[f.scene][f.frame]))
    det, l_det = fit_occupancy_head(samples, cfg.mfe.loss.focal_alpha, cfg.mfe.loss.focal_gamma,
                                    max_iter=cfg.mfe.max_iter)
    return PipelineHeads(mfe, det, l_det)


def velocity_mse(suite: EncodedSuite, head: HeadWeights, occupied_only: bool = True) -> float:
    """Mean squared velocity error of a head, over occupied GT cells by default."""
    sq, n = 0.0, 0
    for bevs, ts in zip(suite.bevs, suite.targets):
        for b, (m, o) in zip(bevs, ts):
            r = velocity_head(b, head).data - m.data
            mask = (o.data[0] > 0) if occupied_only else np.ones(o.data.shape[1:], bool)
            sq += float(np.sum(r[:, mask] ** 2))
            n += 2 * int(mask.sum())
    return sq / n if n else float("nan")
