"""Range-space diffusion for LiDAR sweep densification.

A sparse sweep is lifted to ray space (unit direction + scalar range), a
cheap structural prior proposes candidate rays, and a learned denoiser
refines only the ranges through a partial reverse diffusion, so every
generated point stays on a physically realizable ray.
"""
from .config import (RunConfig, config_hash, desk_config, load_config,
                     paper_config)
from .diffusion import (NoiseSchedule, RangeNormalizer, SDEditConfig,
                        build_cosine_schedule, ddim_reverse, forward_diffuse)
from .geometry import PointCloud, decompose, reconstruct
from .losses import LossWeights, composite_loss
from .metrics import EvalReport, FsvrConfig, chamfer, emd, evaluate, fsvr, reap
from .network import Denoiser, NetworkConfig
from .pipeline import DensifyResult, densify
from .prior import Stage0Config, build_prior
from .simulator import (SceneSpec, SensorModel, SENSOR_PRESETS, SweepPair,
                        generate_scene, make_sweep_pair, random_scene_spec)
from .training import CurriculumSchedule, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "config_hash", "desk_config", "load_config", "paper_config",
    "NoiseSchedule", "RangeNormalizer", "SDEditConfig",
    "build_cosine_schedule", "ddim_reverse", "forward_diffuse",
    "PointCloud", "decompose", "reconstruct",
    "LossWeights", "composite_loss",
    "EvalReport", "FsvrConfig", "chamfer", "emd", "evaluate", "fsvr", "reap",
    "Denoiser", "NetworkConfig",
    "DensifyResult", "densify",
    "Stage0Config", "build_prior",
    "SceneSpec", "SensorModel", "SENSOR_PRESETS", "SweepPair",
    "generate_scene", "make_sweep_pair", "random_scene_spec",
    "CurriculumSchedule", "TrainConfig", "train",
    "__version__",
]
