"""Layered run configuration: presets -> config file -> CLI overrides.

A ``RunConfig`` bundles every module's knobs.  The ``desk`` preset runs a
full pipeline in minutes on a laptop CPU; ``paper`` mirrors the published
hyperparameter table (hidden 256, 6 layers, 200 epochs, batch 8, 64-beam
sensor).  The training-relevant part of a config hashes to a 12-hex
digest embedded in checkpoints and evaluation reports, so artifacts from
mismatched training setups fail loudly while inference knobs (sampler
depth, occupancy threshold, metric settings) stay free to vary.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .metrics import FsvrConfig
from .network import NetworkConfig
from .prior import Stage0Config
from .diffusion import SDEditConfig
from .simulator import SENSOR_PRESETS, SensorModel
from .training import CurriculumSchedule, TrainConfig

ENV_CONFIG_DIR = "RANGEDIFF_CONFIG_DIR"


@dataclass
class RunConfig:
    sensor: SensorModel = field(default_factory=SensorModel)
    dense_factor: tuple[int, int] = (2, 2)  # (beam, azimuth) refinement
    stage0: Stage0Config = field(default_factory=Stage0Config)
    sdedit: SDEditConfig = field(default_factory=SDEditConfig)
    timesteps: int = 1000
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    fsvr: FsvrConfig = field(default_factory=FsvrConfig)
    occupancy_threshold: float = 0.5
    densify_multiplier: float | None = None  # None -> curriculum end ratio
    emd_max_pts: int = 512

    def __post_init__(self) -> None:
        if self.timesteps < 10:
            raise ValueError("timesteps must be >= 10")
        if not 0.0 <= self.occupancy_threshold <= 1.0:
            raise ValueError("occupancy_threshold must be in [0, 1]")
        fb, fa = self.dense_factor
        if fb < 2 or fa < 2:
            raise ValueError("dense_factor entries must be >= 2")

    def dense_sensor(self) -> SensorModel:
        fb, fa = self.dense_factor
        return SensorModel(beam_count=self.sensor.beam_count * fb,
                           azimuth_steps=self.sensor.azimuth_steps * fa,
                           vertical_fov=self.sensor.vertical_fov,
                           max_range=self.sensor.max_range)

    def effective_multiplier(self) -> float:
        if self.densify_multiplier is not None:
            return self.densify_multiplier
        return self.curriculum.end_ratio


def desk_config() -> RunConfig:
    """Laptop-scale defaults: small sensor, small net, 30 epochs."""
    return RunConfig(
        sensor=SensorModel(beam_count=16, azimuth_steps=180),
        network=NetworkConfig(hidden=64, layers=4, bev_res=64),
        # small nets on few scenes tolerate (and need) a much hotter lr; the
        # timestep band stops at the partial-diffusion depth actually sampled
        train=TrainConfig(epochs=30, batch_size=2, lr=3e-3, t_max_frac=0.25),
        curriculum=CurriculumSchedule(total_epochs=30),
    )


def paper_config() -> RunConfig:
    """Published-table settings; impractical without a GPU-class budget."""
    return RunConfig(
        sensor=SENSOR_PRESETS["spin-64"],
        network=NetworkConfig(hidden=256, layers=6, bev_res=64,
                              bev_extent=120.0),
        train=TrainConfig(epochs=200, batch_size=8),
        curriculum=CurriculumSchedule(total_epochs=200),
        stage0=Stage0Config(grid_extent=120.0),
    )


PRESETS = {"desk": desk_config, "paper": paper_config}


# ---------------------------------------------------------------------------
# (de)serialisation


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["sensor"]["vertical_fov"] = list(cfg.sensor.vertical_fov)
    d["dense_factor"] = list(cfg.dense_factor)
    return d


def config_from_dict(doc: dict) -> RunConfig:
    def build(cls, sub):
        return cls(**sub) if sub is not None else cls()

    sensor = doc.get("sensor", {})
    if "vertical_fov" in sensor:
        sensor = dict(sensor, vertical_fov=tuple(sensor["vertical_fov"]))
    return RunConfig(
        sensor=build(SensorModel, sensor),
        dense_factor=tuple(doc.get("dense_factor", (2, 2))),
        stage0=build(Stage0Config, doc.get("stage0")),
        sdedit=build(SDEditConfig, doc.get("sdedit")),
        timesteps=doc.get("timesteps", 1000),
        network=build(NetworkConfig, doc.get("network")),
        weights=build(LossWeights, doc.get("weights")),
        curriculum=build(CurriculumSchedule, doc.get("curriculum")),
        train=build(TrainConfig, doc.get("train")),
        fsvr=build(FsvrConfig, doc.get("fsvr")),
        occupancy_threshold=doc.get("occupancy_threshold", 0.5),
        densify_multiplier=doc.get("densify_multiplier"),
        emd_max_pts=doc.get("emd_max_pts", 512),
    )


# keys that shaped the checkpoint; the rest only steer inference, and one
# checkpoint must serve different sampler depths / filter thresholds
_HASHED_KEYS = ("sensor", "dense_factor", "stage0", "timesteps", "network",
                "weights", "curriculum", "train")


def config_hash(cfg: RunConfig) -> str:
    """12 hex chars over the training-relevant part of the canonical form."""
    full = config_to_dict(cfg)
    canon = json.dumps({k: full[k] for k in _HASHED_KEYS}, sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def resolve_config_path(name: str | None) -> Path | None:
    """A bare filename may live in $RANGEDIFF_CONFIG_DIR."""
    if name is None:
        return None
    p = Path(name)
    if p.exists():
        return p
    env = os.environ.get(ENV_CONFIG_DIR)
    if env and (Path(env) / name).exists():
        return Path(env) / name
    raise FileNotFoundError(f"config file {name!r} not found")


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("null", "none"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config(path=None, preset: str = "desk",
                overrides: list[str] | None = None) -> RunConfig:
    """preset defaults <- file contents <- dotted ``key=value`` overrides."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
    doc = config_to_dict(PRESETS[preset]())
    if path is not None:
        doc = _deep_update(doc, json.loads(Path(path).read_text()))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _coerce(val)
    return config_from_dict(doc)
