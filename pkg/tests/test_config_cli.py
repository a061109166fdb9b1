import hashlib
import json
import math
from pathlib import Path

import jsonschema
import pytest
import yaml
from hypothesis import given, strategies as st

from crtbev.cli import BENCH_SCHEMA, BENCH_STAGES, EXIT_CONFIG, EXIT_GENERATION, EXIT_IO, EXIT_OK, main
from crtbev.config import SEED_ENV, load_config, parse_config
from crtbev.serde import ConfigError

SMALL = {
    "seed": 1,
    "n_sequences": 2,
    "n_frames": 3,
    "grid": {"x_cells": 24, "y_cells": 24, "cell_size": 1.0, "origin": [-12.0, -12.0]},
    "scene": {"n_objects": 3, "min_range": 3.0, "min_gap": 1.0,
              "cameras": {"n_cameras": 2, "image_w": 12, "image_h": 4, "channels": 4}},
    "mvf": {"m": 32, "depth_bins": 6, "channels": 4},
    "mfe": {"max_iter": 30},
    "mgtf": {"n_frames": 2},
    "bench": {"warmup": 1, "iterations": 3},
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def merged(**over):
    out = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- config

def test_defaults():
    cfg = parse_config({})
    assert (cfg.n_sequences, cfg.n_frames) == (10, 7)
    assert (cfg.mvf.m, cfg.mvf.tau_p, cfg.mgtf.tau_v, cfg.mgtf.tau_b, cfg.mgtf.n_frames) == (128, 0.25, 1.0, 0.05, 6)
    assert (cfg.mfe.tau_iou, cfg.eval.tau_det, cfg.mgtf.t_s) == (0.5, 0.05, 0.5)
    lw = cfg.mfe.loss
    assert (lw.depth, lw.seg, lw.vel, lw.occ) == (3, 25, 1, 30)
    assert cfg.scene.grid == cfg.grid


def test_round_trip_defaults():
    cfg = parse_config({})
    again = parse_config(yaml.safe_load(cfg.to_yaml()))
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


@given(st.integers(0, 2**31 - 1), st.integers(1, 50), st.integers(1, 20), st.floats(0.0, 5.0),
       st.sampled_from(["motion-aware", "naive-concat", "camera-only"]), st.sampled_from(["soft", "hard"]),
       st.floats(0.01, 1.0))
def test_round_trip_property(seed, n_seq, n_frames, tau_v, mode, gating, tau_iou):
    data = merged(seed=seed, n_sequences=n_seq, n_frames=n_frames, mode=mode,
                  mgtf={"n_frames": 2, "tau_v": tau_v, "gating": gating}, mfe={"tau_iou": tau_iou})
    cfg = parse_config(data)
    assert parse_config(yaml.safe_load(cfg.to_yaml())) == cfg
    assert parse_config(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_infinite_values_round_trip():
    cfg = parse_config({"mgtf": {"tau_v": math.inf}})
    assert parse_config(yaml.safe_load(cfg.to_yaml())).mgtf.tau_v == math.inf


@pytest.mark.parametrize("data,path", [
    ({"mgtf": {"tau_v": -1.0}}, "mgtf"),
    ({"n_sequences": 0}, "n_sequences"),
    ({"mode": "fastest"}, "mode"),
    ({"mvf": {"channels": 8}}, "mvf.channels"),
    ({"mvf": {"unknown_key": 1}}, "mvf"),
    ({"grid": {"x_cells": "wide"}}, "grid"),
    ({"mgtf": {"t_s": 0.25}}, "mgtf.t_s"),
    ({"scene": {"grid": {"x_cells": 8, "y_cells": 8, "cell_size": 1.0}}}, "scene.grid"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert str(info.value).startswith(path)


def test_seed_env_override(tmp_path):
    p = write_cfg(tmp_path, {"seed": 3})
    assert load_config(p, env={}).seed == 3
    assert load_config(p, env={SEED_ENV: "17"}).seed == 17
    with pytest.raises(ConfigError, match="seed"):
        load_config(p, env={SEED_ENV: "many"})


def test_seed_substreams_are_independent():
    a, b = parse_config({"seed": 5}), parse_config({"seed": 6})
    assert len({a.scene_seed(i) for i in range(10)}) == 10
    assert a.scene_seed(0) != b.scene_seed(0)
    assert a.weights_seed() not in {a.scene_seed(i) for i in range(10)}


def test_invalid_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(p, env={})


# ---------------------------------------------------------------- CLI

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root, SMALL)
    assert main(["generate", "--config", str(cfg), "--out", str(root / "scenes")]) == EXIT_OK
    return root, cfg


def test_generate_manifest(workspace):
    root, cfg = workspace
    m = json.loads((root / "scenes" / "manifest.json").read_text())
    assert m["n_sequences"] == 2 and len(m["scenes"]) == 2
    run = parse_config(SMALL)
    for i, s in enumerate(m["scenes"]):
        assert s["seed"] == run.scene_seed(i)
        for name, digest in s["files"].items():
            assert hashlib.sha256((root / "scenes" / s["id"] / name).read_bytes()).hexdigest() == digest
    assert parse_config(m["config"]) == run


def test_generate_is_deterministic_and_parallel_safe(workspace, tmp_path):
    root, cfg = workspace
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    assert tree_hashes(root / "scenes") == tree_hashes(tmp_path / "b")


def test_default_config_counts(tmp_path):
    # the default run writes 10 sequences of 7 frames each
    cfg = parse_config({})
    assert (cfg.n_sequences, cfg.n_frames) == (10, 7)
    small = write_cfg(tmp_path, {"scene": {"cameras": {"n_cameras": 1, "image_w": 8, "image_h": 4}}})
    assert main(["generate", "--config", str(small), "--out", str(tmp_path / "d")]) == EXIT_OK
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(m["scenes"]) == 10
    assert {len(json.loads((tmp_path / "d" / s["id"] / "scene.json").read_text())["frames"])
            for s in m["scenes"]} == {7}


def test_fit_run_compare_deterministic(workspace, tmp_path):
    root, cfg = workspace
    scenes = str(root / "scenes")
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["fit", "--config", str(cfg), "--scenes", scenes, "--out", str(out / "fit")]) == EXIT_OK
        assert main(["run", "--config", str(cfg), "--scenes", scenes, "--out", str(out / "run"),
                     "--heads", str(out / "fit" / "heads.bin")]) == EXIT_OK
        assert main(["compare", "--config", str(cfg), "--scenes", scenes, "--out", str(out / "cmp")]) == EXIT_OK
    assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")
    fit = json.loads((tmp_path / "a" / "fit" / "fit_report.json").read_text())
    assert {"l_vel", "l_occ", "n_samples", "ridge", "l_det"} <= set(fit)
    report = json.loads((tmp_path / "a" / "run" / "report.json").read_text())
    assert report["matched"] + report["missed"] == report["n_gt"]
    assert (tmp_path / "a" / "run" / "scene_000" / "fused_002.bin").exists()
    gain = (tmp_path / "a" / "cmp" / "gain.csv").read_text().splitlines()
    assert gain[0] == "bin,ap_motion-aware,ap_naive-concat,gain,n_gt"


def test_run_camera_only_and_naive(workspace, tmp_path):
    root, cfg = workspace
    for mode in ("camera-only", "naive-concat"):
        assert main(["run", "--config", str(cfg), "--scenes", str(root / "scenes"), "--out", str(tmp_path / mode),
                     "--mode", mode]) == EXIT_OK
        assert json.loads((tmp_path / mode / "report.json").read_text())["mode"] == mode


def test_exit_code_config_error(tmp_path, capsys):
    p = write_cfg(tmp_path, merged(mgtf={"tau_v": -1.0}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "mgtf" in capsys.readouterr().err


def test_exit_code_overconstrained(tmp_path, capsys):
    p = write_cfg(tmp_path, merged(scene={"n_objects": 300, "max_tries": 20}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_GENERATION
    assert "scene overconstrained" in capsys.readouterr().err


def test_exit_code_io_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    p = write_cfg(tmp_path, SMALL)
    assert main(["run", "--config", str(p), "--scenes", str(tmp_path / "nothing")]) == EXIT_IO


def test_ill_conditioned_fit_surfaces_verbatim(tmp_path, capsys):
    # no objects, no clutter and noiseless cameras leave a rank-deficient design
    data = merged(mfe={"ridge": 0.0}, scene={"n_objects": 0, "clutter_points": 0,
                                             "cameras": {**SMALL["scene"]["cameras"], "noise": 0.0}})
    p = write_cfg(tmp_path, data)
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "s")]) == EXIT_OK
    code = main(["fit", "--config", str(p), "--scenes", str(tmp_path / "s"), "--out", str(tmp_path / "f"),
                 "--mode", "camera-only"])
    assert code == EXIT_CONFIG
    assert "ill-conditioned fit; increase λ_r" in capsys.readouterr().err


def test_bench_schema_and_consistency(tmp_path, capsys):
    p = write_cfg(tmp_path, SMALL)
    assert main(["bench", "--config", str(p), "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "bench.json").read_text())
    jsonschema.validate(doc, BENCH_SCHEMA)
    assert set(doc["stages"]) == set(BENCH_STAGES)
    assert abs(doc["stage_sum"] - doc["total"]) <= 0.1 * doc["total"]


def test_bench_zero_iterations(tmp_path, capsys):
    p = write_cfg(tmp_path, merged(bench={"iterations": 0}))
    assert main(["bench", "--config", str(p)]) == EXIT_CONFIG
    assert "iterations must be ≥ 1" in capsys.readouterr().err
