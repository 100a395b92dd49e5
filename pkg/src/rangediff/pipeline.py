"""End-to-end densification: prior -> partial noising -> reverse -> filter.

The reverse pass is shared between the CLI, evaluation, and the training
loop's validation hook: candidate ranges (normalized) are noised to
T' = round(alpha_frac * T), denoised by the network under DDIM, occupancy-
filtered, and denormalized back to metric points along their rays.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (NoiseSchedule, RangeNormalizer, RangeState,
                        SDEditConfig, ddim_reverse, forward_diffuse)
from .geometry import PointCloud, decompose
from .network import (Denoiser, assemble_features, bev_density,
                      build_ray_batch, neighbor_profile, scanline_encoding)
from .prior import Stage0Config, build_prior


def make_denoiser_fn(model: Denoiser, directions: np.ndarray,
                     prior_range_norm: np.ndarray, density: np.ndarray,
                     normalizer: RangeNormalizer,
                     vertical_fov: tuple[float, float],
                     neigh_ang: np.ndarray | None = None,
                     neigh_dr: np.ndarray | None = None):
    """Close over static conditioning; rebuild dynamic features per call."""
    batch = build_ray_batch(directions, prior_range_norm, density,
                            vertical_fov, neigh_ang=neigh_ang,
                            neigh_dr=neigh_dr,
                            neighbor_k=model.config.neighbor_k)
    embed = model.config.time_embed_dim

    def fn(r_t: np.ndarray, t: int, x0_prev: np.ndarray):
        feats = assemble_features(batch, r_t, t, x0_prev, embed)
        positions = (directions * normalizer.denormalize(r_t)[:, None])[:, :2]
        eps, b, occ = model.forward(feats, positions)
        return eps.data, b.data, occ.data

    return fn


def reverse_denoise(model: Denoiser, directions: np.ndarray,
                    prior_range_norm: np.ndarray, density: np.ndarray,
                    normalizer: RangeNormalizer, schedule: NoiseSchedule,
                    sdedit: SDEditConfig, vertical_fov: tuple[float, float],
                    seed: int, neigh_ang: np.ndarray | None = None,
                    neigh_dr: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise candidate ranges to T' and denoise back; no filtering.

    Returns (xyz (N, 3), b_hat (N,), occ_logits (N,)); negative denoised
    ranges are clamped to zero (callers usually drop them via the
    occupancy filter or the validity mask from the normalizer).
    """
    t_prime = sdedit.t_prime(schedule.timesteps)
    state = forward_diffuse(RangeState(prior_range_norm, 0), t_prime,
                            schedule, seed=seed)
    fn = make_denoiser_fn(model, directions, prior_range_norm, density,
                          normalizer, vertical_fov, neigh_ang=neigh_ang,
                          neigh_dr=neigh_dr)
    result = ddim_reverse(state, fn, sdedit, schedule, seed=seed)
    ranges_m, _ = normalizer.denormalize_clamped(result.state.ranges)
    xyz = directions * ranges_m[:, None]
    return xyz, result.b_hat, result.occ_logits


@dataclass
class DensifyResult:
    cloud: PointCloud            # occupancy-filtered output
    b_hat: np.ndarray            # (kept,) uncertainty scales
    occ_prob: np.ndarray         # (kept,) sigmoid occupancy
    n_candidates: int
    kept_mask: np.ndarray        # (n_candidates,) bool
    timings: dict[str, float] = field(default_factory=dict)


def densify(sparse: PointCloud, model: Denoiser, *, stage0: Stage0Config,
            schedule: NoiseSchedule, sdedit: SDEditConfig,
            vertical_fov: tuple[float, float], seed: int,
            occupancy_threshold: float = 0.5,
            target_multiplier: float | None = None) -> DensifyResult:
    """Full two-stage densification of one sparse sweep.

    ``target_multiplier`` overrides the Stage-0 candidate budget (the
    trained curriculum's final ratio is the usual choice).  Points whose
    occupancy probability falls below ``occupancy_threshold``, or whose
    denoised range collapses to non-physical (<= 0), are dropped.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    s0 = dataclasses.replace(stage0, target_multiplier=target_multiplier)
    prior_cloud, decomp = build_prior(sparse, s0, seed)
    timings["stage0_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    input_decomp = decompose(sparse.xyz)
    normalizer = RangeNormalizer.from_ranges(input_decomp.range)
    prior_norm = normalizer.normalize(decomp.range)
    density = bev_density(prior_cloud.xyz[:, :2], prior_cloud.xyz[:, :2],
                          model.config.bev_extent, model.config.bev_res)
    neigh_ang, neigh_dr = neighbor_profile(
        decomp.direction, input_decomp.direction,
        normalizer.normalize(input_decomp.range), prior_norm,
        model.config.neighbor_k)
    xyz, b_hat, occ_logits = reverse_denoise(
        model, decomp.direction, prior_norm, density, normalizer, schedule,
        sdedit, vertical_fov, seed=seed, neigh_ang=neigh_ang,
        neigh_dr=neigh_dr)
    timings["diffusion_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    # clip keeps sigma strictly inside (0, 1) in float64, so threshold 1.0
    # filters everything and 0.0 keeps everything
    occ_prob = 1.0 / (1.0 + np.exp(-np.clip(occ_logits, -30, 30)))
    ranges = np.linalg.norm(xyz, axis=1)
    kept = (occ_prob >= occupancy_threshold) & (ranges > 0.0)
    cloud = PointCloud(xyz=xyz[kept])
    timings["filter_s"] = time.perf_counter() - t0

    return DensifyResult(cloud=cloud, b_hat=b_hat[kept],
                         occ_prob=occ_prob[kept],
                         n_candidates=len(prior_cloud), kept_mask=kept,
                         timings=timings)
