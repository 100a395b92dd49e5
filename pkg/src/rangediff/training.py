"""Training loop: curriculum, supervision matching, augmentation, AdamW.

Supervision is built per scene: every Stage-0 candidate ray is matched to
the angularly nearest dense ground-truth ray; matches within 1 degree that
hit a surface define the clean range ``r_0`` for the noise-prediction
target, everything else is supervised as occupancy-negative.  Each step
additionally replaces a fraction of the rays with verified free-space
probes (negative ray augmentation), which contribute only to the
occupancy term.

One timestep is drawn per scene per step: a scene's rays share one BEV
grid, and a grid mixing several noise levels would cross-contaminate the
convolution features.  Scenes in a batch accumulate gradients before a
single clipped AdamW update, so a duplicated scene contributes exactly
twice the gradient.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import (NoiseSchedule, RangeNormalizer, SDEditConfig)
from .geometry import PointCloud, decompose
from .losses import (LossWeights, composite_loss, loss_diff, loss_free_ranges,
                     loss_occ)
from .network import (Denoiser, NetworkConfig, RayBatch, assemble_features,
                      bev_density, build_ray_batch, neighbor_profile)
from .prior import Stage0Config, build_prior, farthest_point_order
from .simulator import SweepPair, sample_negative_rays

log = logging.getLogger(__name__)


class DivergenceDetected(RuntimeError):
    """Training loss went non-finite; carries the model for checkpointing."""

    def __init__(self, msg: str, model: Denoiser | None = None):
        super().__init__(msg)
        self.model = model


@dataclass
class CurriculumSchedule:
    """Linear ramp of the candidate-density target over training."""

    start_ratio: float = 2.0
    end_ratio: float = 8.0
    total_epochs: int = 30

    def __post_init__(self) -> None:
        if self.start_ratio > self.end_ratio:
            raise ValueError("start_ratio must be <= end_ratio")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def ratio(self, epoch: int) -> float:
        if not 0 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs}]")
        frac = epoch / self.total_epochs
        return self.start_ratio + (self.end_ratio - self.start_ratio) * frac


@dataclass
class TrainConfig:
    """Loop shape and optimizer hyperparameters."""

    epochs: int = 30
    batch_size: int = 2          # scenes per optimizer step
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0       # global norm
    inner_steps: int = 4         # optimizer steps per scene batch per epoch
    max_rays: int = 1024         # candidate rays per scene per step
    self_cond_prob: float = 0.5
    warmup_steps: int = 20       # linear LR warmup
    neighbor_k: int = 4          # input-ray neighbours for the free-space term
    match_tol_deg: float = 1.0   # supervision matching tolerance
    neg_margin: float = 0.5      # [m] clearance for free-space probes
    t_max_frac: float = 1.0      # sample t from [1, round(frac * T)]
    val_ddim_steps: int = 8
    val_max_rays: int = 1024

    def __post_init__(self) -> None:
        if not 0.0 < self.t_max_frac <= 1.0:
            raise ValueError("t_max_frac must be in (0, 1]")


class AdamW:
    """Decoupled-weight-decay Adam over tape Tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        lr = self.lr * lr_scale
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                    + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# per-scene supervision cache


@dataclass
class SceneCache:
    """Everything derivable once per scene and reused every step."""

    pair: SweepPair
    prior: PointCloud
    batch: RayBatch              # full-prior conditioning
    fps_order: np.ndarray        # farthest-point ordering of the prior
    r0_norm: np.ndarray          # clean target (matched GT else prior), normalized
    match_valid: np.ndarray      # bool: has a GT range target
    neigh_cos: np.ndarray        # (n, K) cos angle to input-ray neighbours
    neigh_range: np.ndarray      # (n, K) metric neighbour returns
    neigh_mask: np.ndarray       # (n, K)
    input_dirs: np.ndarray       # hit input-return directions (for profiles)
    input_range_norm: np.ndarray
    normalizer: RangeNormalizer
    n_input: int
    bev_extent: float
    bev_res: int


def build_scene_cache(pair: SweepPair, stage0: Stage0Config,
                      net_cfg: NetworkConfig, cfg: TrainConfig,
                      seed: int, max_ratio: float | None = None) -> SceneCache:
    """Stage-0 prior + supervision matching for one sweep pair.

    ``max_ratio`` bounds the farthest-point ordering to the largest
    candidate budget the curriculum will ever request; the full union is
    ordered when it is None.
    """
    s0 = dataclasses.replace(stage0, target_multiplier=None)
    prior, decomp = build_prior(pair.sparse, s0, seed)
    n = len(prior)
    fps_budget = None
    if max_ratio is not None:
        fps_budget = max(int(round(max_ratio * len(pair.sparse))), 1)

    normalizer = RangeNormalizer.from_ranges(
        decompose(pair.sparse.xyz).range)

    # nearest dense GT ray per candidate (chord distance ~ angle)
    tree = cKDTree(pair.gt_rays.directions)
    chord, nearest = tree.query(decomp.direction, k=1)
    chord_tol = 2.0 * math.sin(math.radians(cfg.match_tol_deg) / 2.0)
    match_valid = (chord <= chord_tol) & pair.gt_rays.hit[nearest]
    gt_range = pair.gt_rays.ranges[nearest]
    r0_m = np.where(match_valid, gt_range, decomp.range)

    # angularly nearest *hit* input rays for the free-space term
    hit = pair.sparse_rays.hit
    sdirs = pair.sparse_rays.directions[hit]
    sranges = pair.sparse_rays.ranges[hit]
    k = min(cfg.neighbor_k, sdirs.shape[0])
    _, jj = cKDTree(sdirs).query(decomp.direction, k=k)
    jj = jj.reshape(n, k)
    neigh_cos = np.clip(
        np.einsum("nd,nkd->nk", decomp.direction, sdirs[jj]), -1.0, 1.0)
    neigh_range = sranges[jj]
    neigh_mask = np.ones((n, k), dtype=bool)

    density = bev_density(prior.xyz[:, :2], prior.xyz[:, :2],
                          net_cfg.bev_extent, net_cfg.bev_res)
    prior_norm = normalizer.normalize(decomp.range)
    sranges_norm = normalizer.normalize(sranges)
    feat_ang, feat_dr = neighbor_profile(decomp.direction, sdirs,
                                         sranges_norm, prior_norm,
                                         net_cfg.neighbor_k)
    batch = build_ray_batch(decomp.direction, prior_norm, density,
                            vertical_fov=_pair_fov(pair),
                            neigh_ang=feat_ang, neigh_dr=feat_dr)
    return SceneCache(pair=pair, prior=prior, batch=batch,
                      fps_order=farthest_point_order(prior.xyz, m=fps_budget),
                      r0_norm=normalizer.normalize(r0_m),
                      match_valid=match_valid, neigh_cos=neigh_cos,
                      neigh_range=neigh_range, neigh_mask=neigh_mask,
                      input_dirs=sdirs, input_range_norm=sranges_norm,
                      normalizer=normalizer, n_input=len(pair.sparse),
                      bev_extent=net_cfg.bev_extent, bev_res=net_cfg.bev_res)


def _pair_fov(pair: SweepPair) -> tuple[float, float]:
    """Recover an elevation band for scanline encoding from the rays."""
    z = pair.gt_rays.directions[:, 2]
    lo = float(np.arcsin(z.min()))
    hi = float(np.arcsin(z.max()))
    if hi <= lo:
        hi = lo + 1e-3
    return lo, hi


# ---------------------------------------------------------------------------
# step batches


@dataclass
class TrainBatch:
    """One scene's rays for one optimizer step."""

    directions: np.ndarray
    r0_norm: np.ndarray          # diffusion target ranges (normalized)
    prior_range_norm: np.ndarray
    density: np.ndarray
    occ_labels: np.ndarray       # float 0/1
    diff_mask: np.ndarray        # bool: contributes to the noise MSE
    free_mask: np.ndarray        # bool: contributes to the free-space term
    is_negative: np.ndarray      # bool: augmentation slots
    neigh_cos: np.ndarray
    neigh_range: np.ndarray
    neigh_mask: np.ndarray
    feat_ang: np.ndarray         # (n, K) neighbour-profile feature columns
    feat_dr: np.ndarray
    scene: SceneCache

    def __len__(self) -> int:
        return self.directions.shape[0]


def make_train_batch(cache: SceneCache, idx: np.ndarray) -> TrainBatch:
    b = cache.batch
    return TrainBatch(
        directions=b.directions[idx],
        r0_norm=cache.r0_norm[idx],
        prior_range_norm=b.prior_range_norm[idx],
        density=b.density[idx],
        occ_labels=cache.match_valid[idx].astype(np.float64),
        diff_mask=cache.match_valid[idx].copy(),
        free_mask=np.ones(idx.size, dtype=bool),
        is_negative=np.zeros(idx.size, dtype=bool),
        neigh_cos=cache.neigh_cos[idx],
        neigh_range=cache.neigh_range[idx],
        neigh_mask=cache.neigh_mask[idx],
        feat_ang=cache.batch.neigh_ang[idx],
        feat_dr=cache.batch.neigh_dr[idx],
        scene=cache,
    )


def augment_negative_rays(batch: TrainBatch, fraction: float, pair: SweepPair,
                          seed: int, margin: float = 0.5) -> TrainBatch:
    """Replace round(fraction * len(batch)) rays with free-space probes.

    Replaced slots carry occupancy label 0 and are excluded from both the
    noise MSE and the free-space term.  ``fraction`` 0 returns the batch
    unchanged; NoFreeSpace propagates from the sampler.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n_rep = int(round(fraction * len(batch)))
    if n_rep == 0:
        return batch
    rng = np.random.default_rng(seed)
    slots = rng.choice(len(batch), size=n_rep, replace=False)
    negs = sample_negative_rays(pair, fraction, seed=int(rng.integers(2 ** 31)),
                                margin=margin, count=n_rep)
    cache = batch.scene
    out = dataclasses.replace(
        batch,
        directions=batch.directions.copy(),
        r0_norm=batch.r0_norm.copy(),
        prior_range_norm=batch.prior_range_norm.copy(),
        density=batch.density.copy(),
        occ_labels=batch.occ_labels.copy(),
        diff_mask=batch.diff_mask.copy(),
        free_mask=batch.free_mask.copy(),
        is_negative=batch.is_negative.copy(),
        feat_ang=batch.feat_ang.copy(),
        feat_dr=batch.feat_dr.copy(),
    )
    probe_norm = cache.normalizer.normalize(negs.probe_range)
    probe_xy = (negs.directions * negs.probe_range[:, None])[:, :2]
    out.directions[slots] = negs.directions
    out.r0_norm[slots] = probe_norm
    out.prior_range_norm[slots] = probe_norm
    out.density[slots] = bev_density(probe_xy, cache.prior.xyz[:, :2],
                                     cache.bev_extent, cache.bev_res)
    # the probe sits mid-air on a recorded ray, so its profile carries the
    # free-space signature: a near-collinear return well behind the probe
    out.feat_ang[slots], out.feat_dr[slots] = neighbor_profile(
        negs.directions, cache.input_dirs, cache.input_range_norm,
        probe_norm, batch.feat_ang.shape[1])
    out.occ_labels[slots] = 0.0
    out.diff_mask[slots] = False
    out.free_mask[slots] = False
    out.is_negative[slots] = True
    return out


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: Denoiser
    trace: list[dict]
    config_note: str = ""


def _scene_step(model: Denoiser, batch: TrainBatch, schedule: NoiseSchedule,
                weights: LossWeights, cfg: TrainConfig,
                rng: np.random.Generator, scale: float) -> dict[str, float]:
    """Forward + backward for one scene; gradients accumulate on the params."""
    cache = batch.scene
    n = len(batch)
    # a sampler that starts at T' = frac * T never queries deeper timesteps,
    # so the training distribution can stop at the deployment depth
    t_hi = max(1, int(round(cfg.t_max_frac * schedule.timesteps)))
    t = int(rng.integers(1, t_hi + 1))
    eps = rng.standard_normal(n)
    ab = schedule.alpha_bar[t]
    sig = math.sqrt(1.0 - ab)
    r_t = math.sqrt(ab) * batch.r0_norm + sig * eps

    ray_batch = _make_ray_batch(batch, cache)
    positions = (batch.directions
                 * cache.normalizer.denormalize(r_t)[:, None])[:, :2]
    embed = model.config.time_embed_dim

    x0_sc = np.zeros(n)
    if rng.uniform() < cfg.self_cond_prob:
        feats0 = assemble_features(ray_batch, r_t, t, x0_sc, embed)
        e0, _, _ = model.forward(feats0, positions)
        x0_sc = (r_t - sig * e0.data) / math.sqrt(ab)

    feats = assemble_features(ray_batch, r_t, t, x0_sc, embed)
    eps_hat, b_hat, occ = model.forward(feats, positions)

    l_diff = loss_diff(eps, eps_hat, batch.diff_mask)
    l_occ = loss_occ(occ, batch.occ_labels)

    free_idx = np.flatnonzero(batch.free_mask)
    if free_idx.size and weights.lambda_free > 0.0:
        eps_sub = ad.take(eps_hat, free_idx)
        x0_sub = ad.mul(ad.add(Tensor(r_t[free_idx]),
                               ad.mul(eps_sub, -sig)), 1.0 / math.sqrt(ab))
        r_m = ad.add(ad.mul(x0_sub, cache.normalizer.sigma),
                     cache.normalizer.mu)
        l_free = loss_free_ranges(r_m, batch.directions[free_idx],
                                  batch.neigh_cos[free_idx],
                                  batch.neigh_range[free_idx],
                                  batch.neigh_mask[free_idx],
                                  ad.take(b_hat, free_idx),
                                  weights.lambda_logb)
        # the term acts on the x0 estimate, whose error is amplified by
        # 1/sqrt(alpha_bar); weight by alpha_bar so near-pure-noise steps
        # don't flood the shared trunk with garbage occlusion gradients
        l_free = ad.mul(l_free, ab)
    else:
        l_free = Tensor(0.0)

    total, parts = composite_loss(l_diff, l_occ, l_free, weights)
    if not np.isfinite(total.data):
        raise DivergenceDetected(
            f"non-finite loss at t={t}: {parts}", model=model)
    scaled = ad.mul(total, scale)
    scaled.backward()
    return parts


def _make_ray_batch(batch: TrainBatch, cache: SceneCache) -> RayBatch:
    from .network import scanline_encoding
    fov = _pair_fov(cache.pair)
    sin_az, cos_az, elev, phase = scanline_encoding(batch.directions, fov)
    return RayBatch(directions=batch.directions,
                    prior_range_norm=batch.prior_range_norm,
                    density=batch.density, sin_az=sin_az, cos_az=cos_az,
                    elev_norm=elev, phase=phase,
                    neigh_ang=batch.feat_ang, neigh_dr=batch.feat_dr)


def train(pairs: list[SweepPair], *, network: NetworkConfig,
          stage0: Stage0Config, weights: LossWeights,
          curriculum: CurriculumSchedule, train_cfg: TrainConfig,
          schedule: NoiseSchedule, sdedit: SDEditConfig, seed: int,
          val_pair: SweepPair | None = None) -> TrainResult:
    """Fit the denoiser on sweep pairs; returns the model and an epoch trace.

    Deterministic for a fixed seed: one generator drives the whole loop in
    a fixed iteration order.  Raises DivergenceDetected (carrying the
    model) if the loss goes non-finite.
    """
    if not pairs:
        raise ValueError("need at least one sweep pair")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(7,)))
    ratio_cap = max(curriculum.start_ratio, curriculum.end_ratio)
    caches = [build_scene_cache(p, stage0, network, train_cfg,
                                seed=int(rng.integers(2 ** 31)),
                                max_ratio=ratio_cap)
              for p in pairs]
    val_cache = (build_scene_cache(val_pair, stage0, network, train_cfg,
                                   seed=int(rng.integers(2 ** 31)),
                                   max_ratio=ratio_cap)
                 if val_pair is not None else None)

    model = Denoiser(network, seed=int(rng.integers(2 ** 31)))
    opt = AdamW([t for _, t in model.parameters], lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay)

    epochs = train_cfg.epochs
    trace: list[dict] = []
    step_count = 0
    for epoch in range(epochs):
        ratio = curriculum.ratio(min(epoch, curriculum.total_epochs))
        sums: dict[str, float] = {}
        n_steps = 0
        grad_norm_last = 0.0
        for lo in range(0, len(caches), train_cfg.batch_size):
            group = caches[lo:lo + train_cfg.batch_size]
            for _ in range(train_cfg.inner_steps):
                opt.zero_grad()
                scale = 1.0 / len(group)
                for cache in group:
                    m_active = int(round(ratio * cache.n_input))
                    m_active = min(max(m_active, 1), cache.fps_order.size)
                    active = cache.fps_order[:m_active]
                    take_n = min(train_cfg.max_rays, active.size)
                    idx = rng.choice(active, size=take_n, replace=False)
                    batch = make_train_batch(cache, idx)
                    if weights.neg_ray_fraction > 0.0:
                        batch = augment_negative_rays(
                            batch, weights.neg_ray_fraction, cache.pair,
                            seed=int(rng.integers(2 ** 31)),
                            margin=train_cfg.neg_margin)
                    parts = _scene_step(model, batch, schedule, weights,
                                        train_cfg, rng, scale)
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v * scale
                grad_norm_last = clip_global_norm(opt.params,
                                                  train_cfg.grad_clip)
                step_count += 1
                warm = min(1.0, step_count / max(train_cfg.warmup_steps, 1))
                opt.step(lr_scale=warm)
                n_steps += 1
        row = {"epoch": epoch, "ratio": ratio,
               "grad_norm": grad_norm_last,
               **{k: v / max(n_steps, 1) for k, v in sums.items()}}
        if val_cache is not None:
            row.update(_validate(model, val_cache, schedule, sdedit,
                                 train_cfg, ratio,
                                 seed=int(rng.integers(2 ** 31))))
        trace.append(row)
        log.info("epoch %d: %s", epoch,
                 {k: (f"{v:.4f}" if isinstance(v, float) else v)
                  for k, v in row.items()})
    return TrainResult(model=model, trace=trace)


def _validate(model: Denoiser, cache: SceneCache, schedule: NoiseSchedule,
              sdedit: SDEditConfig, cfg: TrainConfig, ratio: float,
              seed: int) -> dict[str, float]:
    """Cheap densification of the validation scene: CD + FSVR trace columns."""
    from .metrics import FsvrConfig, chamfer, fsvr
    from .pipeline import reverse_denoise

    m = int(round(ratio * cache.n_input))
    m = min(max(m, 1), cache.fps_order.size, cfg.val_max_rays)
    idx = cache.fps_order[:m]
    small = dataclasses.replace(sdedit,
                                ddim_steps=min(cfg.val_ddim_steps,
                                               sdedit.t_prime(schedule.timesteps)))
    cloud, _, occ_logits = reverse_denoise(
        model, cache.batch.directions[idx],
        cache.batch.prior_range_norm[idx], cache.batch.density[idx],
        cache.normalizer, schedule, small, _pair_fov(cache.pair), seed=seed,
        neigh_ang=cache.batch.neigh_ang[idx],
        neigh_dr=cache.batch.neigh_dr[idx])
    kept = occ_logits >= 0.0
    eval_xyz = cloud[kept] if np.count_nonzero(kept) else cloud
    out = {}
    try:
        out["val_cd"] = chamfer(eval_xyz, cache.pair.dense_gt.xyz)
    except Exception:
        out["val_cd"] = float("nan")
    pct, _ = fsvr(eval_xyz, cache.pair.gt_rays.directions,
                  cache.pair.gt_rays.ranges, FsvrConfig())
    out["val_fsvr"] = pct
    out["val_kept"] = float(np.count_nonzero(kept)) / max(kept.size, 1)
    return out
