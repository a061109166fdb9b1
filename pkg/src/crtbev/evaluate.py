"""Peak-based detection from occupancy maps and center-distance AP evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .geometry import Grid2D, GtObject

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
DEFAULT_BIN_EDGES = (0.0, 0.5, 2.0, 5.0, 10.0, math.inf)
REPORT_VERSION = 1


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float]
    score: float
    velocity: tuple[float, float]

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass
class EvalConfig:
    tau_det: float = 0.05
    nms_radius: float = 3.0
    smooth: int = 3
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    bin_edges: tuple[float, ...] = DEFAULT_BIN_EDGES
    ref_threshold: float = 2.0
    all_windows: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau_det <= 1.0:
            raise ValueError("tau_det must lie in [0, 1]")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")
        if self.smooth < 1 or self.smooth % 2 == 0:
            raise ValueError("smooth must be a positive odd window size")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])) or not self.thresholds:
            raise ValueError("thresholds must be non-empty and increasing")
        if any(b <= a for a, b in zip(self.bin_edges, self.bin_edges[1:])) or len(self.bin_edges) < 2:
            raise ValueError("bin_edges must be increasing with at least two entries")
        if self.ref_threshold not in self.thresholds:
            raise ValueError("ref_threshold must be one of the thresholds")


def bin_labels(edges: Sequence[float]) -> list[str]:
    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:g}"
    return [f"[{fmt(a)},{fmt(b)})" for a, b in zip(edges, edges[1:])]


def speed_bin(speed: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Bin index per speed, -1 when outside every bin."""
    idx = np.searchsorted(np.asarray(edges), np.asarray(speed, dtype=float), side="right") - 1
    return np.where((idx >= 0) & (idx < len(edges) - 1), idx, -1)


# ---------------------------------------------------------------- detection

def detect(occ: Grid2D, motion: Grid2D, tau_det: float = 0.05, nms_radius: float = 3.0,
           smooth: int = 1) -> list[Detection]:
    """Local maxima of the (optionally box-smoothed) occupancy, greedily suppressed.

    Peaks are visited by descending score with ties broken by linear cell
    index; a peak survives when no kept peak lies within `nms_radius` cells.
    """
    if not 0.0 <= tau_det <= 1.0:
        raise ValueError("tau_det must lie in [0, 1]")
    score = occ.data[0]
    if smooth > 1:
        score = np.clip(uniform_filter(score, size=smooth, mode="constant"), 0.0, 1.0)
    peak = (score >= maximum_filter(score, size=3, mode="constant", cval=-np.inf)) & (score >= tau_det)
    ii, jj = np.nonzero(peak)  # row-major, so already in linear-index order
    if ii.size == 0:
        return []
    s = score[ii, jj]
    order = np.argsort(-s, kind="stable")
    kept: list[int] = []
    r2 = nms_radius * nms_radius
    for k in order:
        if all((ii[k] - ii[q]) ** 2 + (jj[k] - jj[q]) ** 2 > r2 for q in kept):
            kept.append(k)
    spec = occ.spec
    out = []
    for k in kept:
        x, y = int(ii[k]), int(jj[k])
        out.append(Detection(spec.cell_center(x, y), float(min(max(s[k], 0.0), 1.0)),
                             (float(motion.data[0, x, y]), float(motion.data[1, x, y]))))
    return out


# ---------------------------------------------------------------- matching

@dataclass
class SceneMatches:
    """Greedy matches of one scene's detections at every threshold."""

    scene_id: str
    thresholds: tuple[float, ...]
    scores: np.ndarray  # (D,) sorted descending
    det_xy: np.ndarray  # (D, 2)
    det_vel: np.ndarray  # (D, 2)
    gt_xy: np.ndarray  # (G, 2)
    gt_vel: np.ndarray  # (G, 2)
    match: np.ndarray  # (T, D) GT index or -1


def greedy_match(det_xy: np.ndarray, gt_xy: np.ndarray, threshold: float) -> np.ndarray:
    """Each det, in the given order, takes the nearest unmatched GT within `threshold`."""
    match = np.full(len(det_xy), -1, dtype=np.int64)
    if len(det_xy) == 0 or len(gt_xy) == 0:
        return match
    dist = np.linalg.norm(det_xy[:, None, :] - gt_xy[None, :, :], axis=-1)
    taken = np.zeros(len(gt_xy), dtype=bool)
    for d in range(len(det_xy)):
        cand = np.where(taken | (dist[d] > threshold), np.inf, dist[d])
        g = int(np.argmin(cand))
        if np.isfinite(cand[g]):
            match[d] = g
            taken[g] = True
    return match


def match_scene(dets: list[Detection], gts: list[GtObject], thresholds: Sequence[float],
                scene_id: str = "0") -> SceneMatches:
    thresholds = tuple(float(t) for t in thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be increasing")
    order = np.argsort(-np.array([d.score for d in dets], dtype=float), kind="stable")
    dets = [dets[i] for i in order]
    det_xy = np.array([d.center for d in dets], dtype=float).reshape(-1, 2)
    gt_xy = np.array([g.center[:2] for g in gts], dtype=float).reshape(-1, 2)
    match = np.stack([greedy_match(det_xy, gt_xy, t) for t in thresholds]) if thresholds else np.zeros((0, len(dets)), int)
    return SceneMatches(
        scene_id, thresholds,
        np.array([d.score for d in dets], dtype=float),
        det_xy,
        np.array([d.velocity for d in dets], dtype=float).reshape(-1, 2),
        gt_xy,
        np.array([g.velocity for g in gts], dtype=float).reshape(-1, 2),
        match,
    )


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> Optional[float]:
    """All-point interpolated AP; None when there is no ground truth."""
    if n_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    bin_edges: tuple[float, ...]
    ref_threshold: float
    ap: dict[float, Optional[float]]
    bin_ap: dict[str, dict[float, Optional[float]]]
    center_err: Optional[float]
    vel_err: Optional[float]
    n_gt: int
    matched: int
    missed: int
    false: int
    bin_counts: dict[str, int] = field(default_factory=dict)
    per_scene: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def mean_ap(self) -> Optional[float]:
        return _mean(self.ap.values())

    def bin_mean_ap(self) -> dict[str, Optional[float]]:
        return {b: _mean(v.values()) for b, v in self.bin_ap.items()}

    def to_json(self) -> dict:
        def keyed(d):
            return {f"{t:g}": v for t, v in d.items()}
        doc = {
            "version": REPORT_VERSION,
            "thresholds": list(self.thresholds),
            "bin_edges": ["inf" if math.isinf(e) else e for e in self.bin_edges],
            "ref_threshold": self.ref_threshold,
            "ap": keyed(self.ap),
            "mean_ap": self.mean_ap,
            "bin_ap": {b: keyed(v) for b, v in self.bin_ap.items()},
            "bin_mean_ap": self.bin_mean_ap(),
            "bin_counts": dict(self.bin_counts),
            "center_err": self.center_err,
            "vel_err": self.vel_err,
            "n_gt": self.n_gt,
            "matched": self.matched,
            "missed": self.missed,
            "false": self.false,
        }
        if self.per_scene:
            doc["per_scene"] = {k: v.to_json() for k, v in self.per_scene.items()}
        return doc

    def csv_rows(self, scene_id: str = "all") -> list[dict]:
        rows = []
        for b, per_t in [("all", self.ap), *self.bin_ap.items()]:
            for t, ap in per_t.items():
                rows.append({"scene_id": scene_id, "bin": b, "threshold": t, "ap": ap,
                             "center_err": self.center_err, "vel_err": self.vel_err})
        for sid, rep in self.per_scene.items():
            rows.extend(rep.csv_rows(sid))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["scene_id", "bin", "threshold", "ap", "center_err", "vel_err"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.csv_rows():
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def score_matches(scenes: list[SceneMatches], bin_edges: Sequence[float] = DEFAULT_BIN_EDGES,
                  ref_threshold: float = 2.0, per_scene: bool = False) -> EvalReport:
    """Pool matches across scenes and compute overall and per-speed-bin AP.

    A bin keeps its own GTs, the detections matched to them, and unmatched
    detections whose predicted speed falls in the bin; detections matched to
    GTs of other bins are left out.
    """
    if not scenes:
        raise ValueError("no scenes to score")
    thresholds = scenes[0].thresholds
    if any(s.thresholds != thresholds for s in scenes):
        raise ValueError("scenes were matched at different thresholds")
    edges = tuple(float(e) for e in bin_edges)
    labels = bin_labels(edges)
    ti = thresholds.index(ref_threshold)

    scores = np.concatenate([s.scores for s in scenes])
    det_bin = np.concatenate([speed_bin(np.linalg.norm(s.det_vel, axis=1), edges) for s in scenes])
    gt_bins = [speed_bin(np.linalg.norm(s.gt_vel, axis=1), edges) for s in scenes]
    n_gt = sum(len(s.gt_xy) for s in scenes)

    ap: dict[float, Optional[float]] = {}
    bin_ap: dict[str, dict[float, Optional[float]]] = {lb: {} for lb in labels}
    for k, t in enumerate(thresholds):
        matched = np.concatenate([s.match[k] for s in scenes])
        ap[t] = average_precision(scores, matched >= 0, n_gt)
        # bin of the GT each det matched, -2 for unmatched
        mbin = np.concatenate([np.where(s.match[k] >= 0, gb[np.maximum(s.match[k], 0)] if len(gb) else -1, -2)
                               for s, gb in zip(scenes, gt_bins)])
        for b, lb in enumerate(labels):
            keep = (mbin == b) | ((mbin == -2) & (det_bin == b))
            n_b = int(sum(np.sum(gb == b) for gb in gt_bins))
            bin_ap[lb][t] = average_precision(scores[keep], mbin[keep] == b, n_b)

    cerr, verr = [], []
    n_match = 0
    for s in scenes:
        m = s.match[ti]
        hit = m >= 0
        n_match += int(hit.sum())
        cerr.extend(np.linalg.norm(s.det_xy[hit] - s.gt_xy[m[hit]], axis=1))
        verr.extend(np.linalg.norm(s.det_vel[hit] - s.gt_vel[m[hit]], axis=1))
    report = EvalReport(
        thresholds=thresholds, bin_edges=edges, ref_threshold=ref_threshold, ap=ap, bin_ap=bin_ap,
        center_err=float(np.mean(cerr)) if cerr else None,
        vel_err=float(np.mean(verr)) if verr else None,
        n_gt=n_gt, matched=n_match, missed=n_gt - n_match, false=len(scores) - n_match,
        bin_counts={lb: int(sum(np.sum(gb == b) for gb in gt_bins)) for b, lb in enumerate(labels)},
    )
    if per_scene:
        report.per_scene = {s.scene_id: score_matches([s], edges, ref_threshold) for s in scenes}
    return report


def match_and_score(dets: list[Detection], gts: list[GtObject],
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                    bin_edges: Sequence[float] = DEFAULT_BIN_EDGES,
                    ref_threshold: float = 2.0) -> EvalReport:
    return score_matches([match_scene(dets, gts, thresholds)], bin_edges, ref_threshold)


def gain_table(a: EvalReport, b: EvalReport) -> dict[str, Optional[float]]:
    """Per-bin mean-AP difference a - b; None where a bin holds no ground truth."""
    ma, mb = a.bin_mean_ap(), b.bin_mean_ap()
    return {lb: (None if ma[lb] is None or mb[lb] is None else ma[lb] - mb[lb]) for lb in ma}
