"""Run configuration: one YAML document covering every stage, with full defaults."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import yaml

from .evaluate import EvalConfig
from .geometry import GridSpec
from .mgtf import MgtfConfig
from .pipeline import MfeConfig, MvfConfig, PipelineConfig
from .rng import substream
from .serde import ConfigError, from_dict, to_dict
from .synth import SceneConfig, _default_grid

SEED_ENV = "CRTBEV_SEED"


@dataclass
class BenchConfig:
    warmup: int = 1
    iterations: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    n_sequences: int = 10
    n_frames: int = 7
    grid: GridSpec = field(default_factory=_default_grid)
    scene: SceneConfig = field(default_factory=SceneConfig)
    mvf: MvfConfig = field(default_factory=MvfConfig)
    mfe: MfeConfig = field(default_factory=MfeConfig)
    mgtf: MgtfConfig = field(default_factory=MgtfConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: Literal["motion-aware", "naive-concat", "camera-only"] = "motion-aware"
    out_dir: str = "out"
    workers: int = 1
    bench: BenchConfig = field(default_factory=BenchConfig)

    _serde_generic = True

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ConfigError("n_sequences", "must be >= 1")
        if self.n_frames < 1:
            raise ConfigError("n_frames", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        # `grid` is canonical; a scene grid left at its default follows it
        if self.scene.grid != self.grid:
            if self.scene.grid != _default_grid():
                raise ConfigError("scene.grid", "must match grid")
            self.scene = dataclasses.replace(self.scene, grid=self.grid)
        if self.scene.cameras.channels != self.mvf.channels:
            raise ConfigError("mvf.channels", f"must equal scene.cameras.channels ({self.scene.cameras.channels})")
        if self.mgtf.t_s != self.scene.t_s:
            raise ConfigError("mgtf.t_s", f"must equal scene.t_s ({self.scene.t_s})")
        if self.mvf.sweep_period != self.scene.sweep_period:
            raise ConfigError("mvf.sweep_period", f"must equal scene.sweep_period ({self.scene.sweep_period})")

    @property
    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.mvf, self.mfe, self.mgtf, self.eval, self.mode)

    def suite_seed(self, tag: str, i: int) -> int:
        return int(substream(self.seed, tag, i).integers(2**31))

    def scene_seed(self, i: int) -> int:
        return self.suite_seed("scene", i)

    def weights_seed(self) -> int:
        return int(substream(self.seed, "weights").integers(2**31))

    def scene_config(self, i: int) -> SceneConfig:
        return dataclasses.replace(self.scene, seed=self.scene_seed(i))

    def to_dict(self) -> dict:
        return to_dict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def parse_config(data: dict | None) -> RunConfig:
    return from_dict(RunConfig, data or {})


def load_config(path: str | os.PathLike | None, env: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults when `path` is None) and apply the seed override."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"invalid YAML: {exc}") from exc
    cfg = parse_config(data)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError("seed", f"{SEED_ENV} must be an integer") from exc
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg
