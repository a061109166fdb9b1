"""Seeded suite experiments: speed-binned fusion gain and velocity-head quality per encoder."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

from .config import RunConfig
from .mvf import MvfWeights
from .pipeline import Comparison, compare_pipelines, encode_suite, fit_mfe, velocity_mse
from .synth import FrameSequence, generate_sequence


def generate_suite(cfg: RunConfig, tag: str, **scene_overrides) -> list[FrameSequence]:
    """`cfg.n_sequences` sequences whose seeds come from the named substream `tag`."""
    out = []
    for i in range(cfg.n_sequences):
        scene = dataclasses.replace(cfg.scene, seed=cfg.suite_seed(tag, i), **scene_overrides)
        out.append(generate_sequence(scene, cfg.n_frames))
    return out


def acceptance_config(**overrides) -> RunConfig:
    """Defaults with 20 sequences of 12 frames, scoring every full fusion window."""
    base = RunConfig(n_sequences=20, n_frames=12)
    base = dataclasses.replace(base, eval=dataclasses.replace(base.eval, all_windows=True))
    return dataclasses.replace(base, **overrides)


@dataclass
class GainResult:
    mixed: Comparison
    static: Comparison
    seconds: float


def gain_experiment(cfg: RunConfig) -> GainResult:
    """Motion-aware vs naive-concat on a mixed-speed suite and an all-static suite.

    Each suite gets its own training suite drawn from separate substreams, so
    heads are never scored on the sequences they were fitted on.
    """
    t0 = time.perf_counter()
    w = MvfWeights.init(cfg.weights_seed(), cfg.mvf.channels, cfg.mvf.depth_bins)
    ids = [f"scene_{i:03d}" for i in range(cfg.n_sequences)]
    out = {}
    for name, extra in (("mixed", {}), ("static", {"static_fraction": 1.0})):
        evals = generate_suite(cfg, name, **extra)
        train = generate_suite(cfg, f"{name}-train", **extra)
        out[name] = compare_pipelines(evals, ids, cfg.grid, w, cfg.pipeline, train_seqs=train)
    return GainResult(out["mixed"], out["static"], time.perf_counter() - t0)


@dataclass
class VelocityResult:
    fused_mse: float
    camera_mse: float


def velocity_experiment(cfg: RunConfig) -> VelocityResult:
    """Occupied-cell velocity MSE of heads fitted on fused vs camera-only features."""
    w = MvfWeights.init(cfg.weights_seed(), cfg.mvf.channels, cfg.mvf.depth_bins)
    train, evals = generate_suite(cfg, "velocity-train"), generate_suite(cfg, "velocity")
    ids = [str(i) for i in range(cfg.n_sequences)]
    mse = {}
    for mode in ("motion-aware", "camera-only"):
        fit = fit_mfe(encode_suite(train, ids, cfg.grid, w, cfg.pipeline, mode), cfg.mfe)
        mse[mode] = velocity_mse(encode_suite(evals, ids, cfg.grid, w, cfg.pipeline, mode), fit.velocity)
    return VelocityResult(mse["motion-aware"], mse["camera-only"])
