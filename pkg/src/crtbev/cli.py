"""`crtbev` command line: generate scenes, fit heads, run, compare and benchmark.

Exit codes: 0 success, 2 config error, 3 generation error, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import io as fio
from .config import RunConfig, load_config
from .evaluate import Detection, detect
from .mfe import IllConditionedFit, occupancy_head, velocity_head
from .mgtf import MgtfWeights, run_mgtf
from .mvf import MvfWeights
from .pipeline import (MODES, GroupCache, PipelineHeads, _window, compare_pipelines, encode_suite,
                       evaluate_suite, fit_pipeline_heads, fit_shared_heads, mvf_forward)
from .serde import ConfigError
from .synth import SceneOverconstrained, generate_sequence, load_sequence, save_sequence

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION, EXIT_IO = 0, 2, 3, 4
MANIFEST_VERSION = 1
BENCH_VERSION = 1
BENCH_STAGES = ("radar_encode", "mvf", "mfe", "mgtf", "detect")

BENCH_SCHEMA = {
    "type": "object",
    "required": ["version", "warmup", "iterations", "stages", "stage_sum", "total"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": BENCH_VERSION},
        "warmup": {"type": "integer", "minimum": 0},
        "iterations": {"type": "integer", "minimum": 1},
        "stages": {
            "type": "object",
            "required": list(BENCH_STAGES),
            "additionalProperties": False,
            "properties": {s: {"type": "number", "minimum": 0} for s in BENCH_STAGES},
        },
        "stage_sum": {"type": "number", "minimum": 0},
        "total": {"type": "number", "minimum": 0},
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


# ------------------------------------------------------------------ generate

def _generate_one(args: tuple[RunConfig, int, str]) -> dict:
    cfg, i, out = args
    scene_cfg = cfg.scene_config(i)
    seq = generate_sequence(scene_cfg, cfg.n_frames)
    sid = f"scene_{i:03d}"
    root = Path(out) / sid
    files = save_sequence(seq, root)
    hashes = {p.name: fio.sha256_file(p) for p in sorted(files)}
    return {"id": sid, "seed": scene_cfg.seed, "files": hashes}


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_generate(cfg: RunConfig, out: Path, workers: int = 1) -> dict:
    """Write `cfg.n_sequences` scenes plus `manifest.json` under `out`."""
    out.mkdir(parents=True, exist_ok=True)
    scenes = _map(_generate_one, [(cfg, i, str(out)) for i in range(cfg.n_sequences)], workers)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "weights_seed": cfg.weights_seed(),
        "n_sequences": cfg.n_sequences,
        "n_frames": cfg.n_frames,
        "scenes": scenes,
        "config": cfg.to_dict(),
    }
    fio.write_json(out / "manifest.json", manifest)
    return manifest


# ------------------------------------------------------------------ shared helpers

def load_scenes(scenes: Path) -> tuple[list, list[str]]:
    manifest = scenes / "manifest.json"
    if manifest.exists():
        ids = [s["id"] for s in json.loads(manifest.read_text())["scenes"]]
    else:
        ids = sorted(p.name for p in scenes.iterdir() if (p / "scene.json").exists())
    if not ids:
        raise FileNotFoundError(f"no scenes found in {scenes}")
    return [load_sequence(scenes / sid) for sid in ids], ids


def _check_scenes(cfg: RunConfig, seqs: list) -> None:
    for seq in seqs:
        sc = seq.config
        if sc is None:
            continue
        if sc.grid != cfg.grid:
            raise ConfigError("grid", "does not match the grid the scenes were generated on")
        if sc.cameras.channels != cfg.mvf.channels:
            raise ConfigError("mvf.channels", "does not match the scene camera channels")
        if seq.t_s != cfg.mgtf.t_s:
            raise ConfigError("mgtf.t_s", "does not match the scene frame period")


def mvf_weights(cfg: RunConfig, path: Optional[Path] = None) -> MvfWeights:
    if path is not None and path.exists():
        return MvfWeights.load(path)
    return MvfWeights.init(cfg.weights_seed(), cfg.mvf.channels, cfg.mvf.depth_bins)


def load_heads(path: Path) -> PipelineHeads:
    report_path = path.with_name("fit_report.json")
    report = json.loads(report_path.read_text()) if report_path.exists() else None
    return PipelineHeads.from_arrays(fio.load_bundle(path), report)


def _fit(fn, *args):
    try:
        return fn(*args)
    except IllConditionedFit as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _detections_json(dets: list[Detection]) -> list[dict]:
    return [{"center": list(d.center), "score": d.score, "velocity": list(d.velocity)} for d in dets]


# ------------------------------------------------------------------ fit / run / compare

def cmd_fit(cfg: RunConfig, scenes: Path, out: Path, mode: Optional[str] = None) -> dict:
    """Fit the per-frame heads and the mode's detection head; writes `heads.bin`."""
    mode = mode or cfg.mode
    seqs, ids = load_scenes(scenes)
    _check_scenes(cfg, seqs)
    w = mvf_weights(cfg)
    suite = encode_suite(seqs, ids, cfg.grid, w, cfg.pipeline, mode)
    heads = _fit(fit_pipeline_heads, suite, cfg.pipeline, mode)
    out.mkdir(parents=True, exist_ok=True)
    w.save(out / "mvf_weights.bin")
    fio.save_bundle(out / "heads.bin", heads.to_arrays())
    report = {"version": MANIFEST_VERSION, "mode": mode, "scenes": ids, **heads.report()}
    fio.write_json(out / "fit_report.json", report)
    return report


def cmd_run(cfg: RunConfig, scenes: Path, out: Path, mode: Optional[str] = None,
            heads_path: Optional[Path] = None) -> dict:
    """Per-scene fused grids, detections and the evaluation report."""
    mode = mode or cfg.mode
    seqs, ids = load_scenes(scenes)
    _check_scenes(cfg, seqs)
    w = mvf_weights(cfg, heads_path.with_name("mvf_weights.bin") if heads_path else None)
    suite = encode_suite(seqs, ids, cfg.grid, w, cfg.pipeline, mode)
    heads = load_heads(heads_path) if heads_path else _fit(fit_pipeline_heads, suite, cfg.pipeline, mode)
    res = evaluate_suite(suite, heads, cfg.pipeline, mode)
    out.mkdir(parents=True, exist_ok=True)
    for f in res.fused:
        sid = ids[f.scene]
        fio.save_array(out / sid / f"fused_{f.frame:03d}.bin", f.out.fused.data)
    fio.write_json(out / "detections.json",
                   {"version": MANIFEST_VERSION, "mode": mode,
                    "detections": {k: _detections_json(v) for k, v in res.detections.items()}})
    report = {"mode": mode, **res.report.to_json()}
    fio.write_json(out / "report.json", report)
    fio.atomic_write_text(out / "report.csv", res.report.to_csv())
    return report


def cmd_compare(cfg: RunConfig, scenes: Path, out: Path, mode_a: str = "motion-aware",
                mode_b: str = "naive-concat", heads_path: Optional[Path] = None) -> str:
    """Per-speed-bin AP gain of `mode_a` over `mode_b`, written as `gain.csv`."""
    seqs, ids = load_scenes(scenes)
    _check_scenes(cfg, seqs)
    w = mvf_weights(cfg, heads_path.with_name("mvf_weights.bin") if heads_path else None)
    heads = load_heads(heads_path) if heads_path else None
    try:
        cmp = compare_pipelines(seqs, ids, cfg.grid, w, cfg.pipeline, mode_a, mode_b, heads=heads)
    except IllConditionedFit as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    fio.atomic_write_text(out / "gain.csv", cmp.csv())
    fio.write_json(out / "comparison.json", {
        "version": MANIFEST_VERSION,
        "modes": [mode_a, mode_b],
        "gain": cmp.gain,
        "reports": {mode_a: cmp.a.report.to_json(), mode_b: cmp.b.report.to_json()},
    })
    return cmp.table()


# ------------------------------------------------------------------ bench

def cmd_bench(cfg: RunConfig) -> dict:
    """Median wall-clock per stage for one fused window on a generated sequence."""
    b = cfg.bench
    if b.iterations < 1:
        raise ConfigError("bench.iterations", "iterations must be ≥ 1")
    if b.warmup < 0:
        raise ConfigError("bench.warmup", "must be >= 0")
    pcfg = cfg.pipeline
    k = _window(cfg.mgtf.n_frames + 1, cfg.mgtf)
    seq = generate_sequence(cfg.scene_config(0), k)
    w = mvf_weights(cfg)
    heads = _fit(fit_shared_heads, encode_suite([seq], ["bench"], cfg.grid, w, pcfg, cfg.mode),
                 pcfg, (cfg.mode,))
    mgtf = pcfg.mgtf_for(cfg.mode)
    weights = MgtfWeights.averaging(cfg.mvf.channels)
    ts = [f.timestamp for f in seq.frames]
    samples = {s: [] for s in BENCH_STAGES}
    totals = []
    for it in range(b.warmup + b.iterations):
        t = dict.fromkeys(BENCH_STAGES, 0.0)
        start = time.perf_counter()
        groups = GroupCache()
        bevs = [mvf_forward(f, cfg.grid, w, cfg.mvf, cfg.mode, groups, t).bev for f in seq.frames]
        t0 = time.perf_counter()
        motions = [velocity_head(x, heads.mfe.velocity) for x in bevs]
        occs = [occupancy_head(x, heads.mfe.occupancy) for x in bevs]
        t1 = time.perf_counter()
        fused = run_mgtf(bevs, motions, occs, mgtf, weights, timestamps=ts).output
        t2 = time.perf_counter()
        detect(occupancy_head(fused, heads.detection), motions[-1], cfg.eval.tau_det,
               cfg.eval.nms_radius, cfg.eval.smooth)
        end = time.perf_counter()
        t["mfe"], t["mgtf"], t["detect"] = t1 - t0, t2 - t1, end - t2
        if it >= b.warmup:
            for s in BENCH_STAGES:
                samples[s].append(t[s])
            totals.append(end - start)
    stages = {s: statistics.median(v) for s, v in samples.items()}
    doc = {
        "version": BENCH_VERSION,
        "warmup": b.warmup,
        "iterations": b.iterations,
        "stages": stages,
        "stage_sum": math.fsum(stages.values()),
        "total": statistics.median(totals),
    }
    jsonschema.validate(doc, BENCH_SCHEMA)
    return doc


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crtbev", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "run", "fit", "compare", "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="YAML run config (defaults when omitted)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: config out_dir)")
        sp.add_argument("--workers", type=int, default=None, help="scene-level worker processes")
        if name != "generate":
            sp.add_argument("--mode", choices=MODES, default=None)
        if name in ("run", "fit", "compare"):
            sp.add_argument("--scenes", type=Path, required=True, help="directory written by `generate`")
        if name in ("run", "compare"):
            sp.add_argument("--heads", type=Path, default=None, help="heads.bin written by `fit`")
        if name == "compare":
            sp.add_argument("--baseline", choices=MODES, default="naive-concat")
    return p


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    out = args.out or Path(cfg.out_dir)
    workers = args.workers if args.workers is not None else cfg.workers
    if workers < 1:
        raise ConfigError("workers", "must be >= 1")
    if args.command == "generate":
        m = cmd_generate(cfg, out, workers)
        print(f"wrote {len(m['scenes'])} scenes to {out}")
    elif args.command == "fit":
        r = cmd_fit(cfg, args.scenes, out, args.mode)
        print(json.dumps(r, indent=2, sort_keys=True))
    elif args.command == "run":
        r = cmd_run(cfg, args.scenes, out, args.mode, args.heads)
        print(f"mode {r['mode']}: mean AP {r['mean_ap']}")
    elif args.command == "compare":
        print(cmd_compare(cfg, args.scenes, out, args.mode or "motion-aware", args.baseline, args.heads))
    elif args.command == "bench":
        doc = cmd_bench(cfg)
        if args.out is not None:
            fio.write_json(out / "bench.json", doc)
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except SceneOverconstrained as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GENERATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
