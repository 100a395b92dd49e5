"""Physics-aware training objectives.

Three terms, combined as ``L = L_diff + lambda_occ * L_occ + lambda_free *
L_free``:

* ``loss_diff`` -- mean squared error between true and predicted noise on
  the range channel, over supervised rays only;
* ``loss_occ`` -- binary cross-entropy on the occupancy logits over *all*
  rays (free-space negatives carry label 0), in the numerically stable
  softplus form;
* ``loss_free`` -- the isotropic free-space consistency penalty: each
  predicted point is softly associated with its neighbouring input rays by
  a Gaussian lateral weight exp(-d_perp^2 / (2 b^2)) and pays
  d_par / b + lam * log b there, where d_par = ReLU(r_in - r_proj) is the
  radial occlusion depth (signed projection: no clamping of r_proj).

All losses accept tape Tensors where gradients are needed and plain
arrays for constants, and return scalar Tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    """Composite-objective weights; all dimensionless and non-negative."""

    lambda_occ: float = 1.0
    lambda_free: float = 0.5
    lambda_logb: float = 1.0   # the lam multiplying log b inside the free term
    neg_ray_fraction: float = 0.2

    def __post_init__(self) -> None:
        for name in ("lambda_occ", "lambda_free", "lambda_logb",
                     "neg_ray_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_diff(eps_true: np.ndarray, eps_hat, valid_mask=None) -> Tensor:
    """Mean squared noise-prediction error over supervised rays.

    ``valid_mask`` restricts the mean to rays with a defined noise target;
    an all-invalid mask yields a well-defined zero.
    """
    eps_hat = _wrap(eps_hat)
    eps_true = np.asarray(eps_true, dtype=np.float64)
    diff = eps_hat - eps_true
    sq = ad.power(diff, 2.0)
    if valid_mask is None:
        return ad.tmean(sq)
    mask = np.asarray(valid_mask, dtype=np.float64)
    n = max(float(mask.sum()), 1.0)
    return ad.mul(ad.tsum(ad.mul(sq, mask)), 1.0 / n)


def loss_occ(occ_logits, valid_mask) -> Tensor:
    """Mean BCE(sigmoid(o), valid) over all rays, stable for large |o|.

    Uses BCE = softplus(o) - o * y, which never exponentiates a large
    positive number.
    """
    o = _wrap(occ_logits)
    y = np.asarray(valid_mask, dtype=np.float64)
    bce = ad.softplus(o) - ad.mul(o, y)
    return ad.tmean(bce)


def free_space_term(d_perp_sq, d_par, b_hat, lam: float) -> Tensor:
    """Elementwise Eq.-style penalty: exp(-d_perp^2/(2 b^2))(d_par/b + lam log b)."""
    d_perp_sq = _wrap(d_perp_sq)
    d_par = _wrap(d_par)
    b = _wrap(b_hat)
    w = ad.exp(ad.mul(ad.div(d_perp_sq, ad.power(b, 2.0)), -0.5))
    inner = ad.add(ad.div(d_par, b), ad.mul(ad.log(b), lam))
    return ad.mul(w, inner)


def _normalize_neighbors(n_points: int, neighbor_rays):
    """Accept per-point [(direction, range), ...] lists or padded arrays.

    Returns (dirs (N, K, 3), ranges (N, K), mask (N, K)).
    """
    if isinstance(neighbor_rays, tuple) and len(neighbor_rays) == 3:
        dirs, ranges, mask = neighbor_rays
        return (np.asarray(dirs, dtype=np.float64),
                np.asarray(ranges, dtype=np.float64),
                np.asarray(mask, dtype=bool))
    if len(neighbor_rays) != n_points:
        raise ValueError("need one neighbour list per predicted point")
    k = max((len(nb) for nb in neighbor_rays), default=0)
    k = max(k, 1)
    dirs = np.zeros((n_points, k, 3))
    dirs[..., 0] = 1.0  # placeholder unit vectors under the mask
    ranges = np.zeros((n_points, k))
    mask = np.zeros((n_points, k), dtype=bool)
    for i, nb in enumerate(neighbor_rays):
        for j, (d, r) in enumerate(nb):
            dirs[i, j] = d
            ranges[i, j] = r
            mask[i, j] = True
    return dirs, ranges, mask


def loss_free(pred_points: np.ndarray, b_hat, neighbor_rays,
              weights: LossWeights) -> Tensor:
    """Free-space consistency over predicted *points* (positions constant).

    ``neighbor_rays`` pairs each predicted point with its nearby input
    rays, either as a per-point list of (unit direction, gt_range) tuples
    or as a pre-padded (dirs, ranges, mask) triple.  The term is averaged
    over each point's neighbours, then over points.  Gradients flow
    through ``b_hat`` only; for a range-differentiable variant see
    :func:`loss_free_ranges`.
    """
    p = np.asarray(pred_points, dtype=np.float64)
    n = p.shape[0]
    dirs, ranges, mask = _normalize_neighbors(n, neighbor_rays)
    if not np.all(np.isfinite(ranges[mask])):
        raise ValueError("neighbour rays must have finite returns")

    proj = np.einsum("nd,nkd->nk", p, dirs)
    d_perp_sq = np.maximum(np.sum(p * p, axis=1)[:, None] - proj ** 2, 0.0)
    d_par = np.maximum(ranges - proj, 0.0)

    b = _wrap(b_hat)
    b2 = ad.reshape(b, (n, 1))
    term = free_space_term(Tensor(d_perp_sq), Tensor(d_par * mask), b2,
                           weights.lambda_logb)
    cnt = np.maximum(mask.sum(axis=1), 1)
    per_point = ad.div(ad.tsum(ad.mul(term, mask.astype(np.float64)), axis=1),
                       Tensor(cnt.astype(np.float64)))
    return ad.tmean(per_point)


def loss_free_ranges(r_hat, directions: np.ndarray, neigh_cos: np.ndarray,
                     neigh_range: np.ndarray, neigh_mask: np.ndarray,
                     b_hat, lam: float) -> Tensor:
    """Free-space consistency with gradients through predicted ranges.

    The predicted point is r_hat * direction, so against a neighbour ray
    at angle theta (cos theta = ``neigh_cos``):

        r_proj     = r_hat * cos
        d_perp^2   = r_hat^2 * (1 - cos^2)
        d_par      = ReLU(r_in - r_proj)

    which holds for negative r_hat too (the point sits behind the sensor
    and registers as a deep occluder).  ``neigh_mask`` marks real
    neighbours; points keep a defined (zero) term with an empty mask.
    """
    r = _wrap(r_hat)
    b = _wrap(b_hat)
    n, k = neigh_cos.shape
    cosk = np.asarray(neigh_cos, dtype=np.float64)
    rin = np.asarray(neigh_range, dtype=np.float64)
    mask = np.asarray(neigh_mask, dtype=np.float64)

    r2 = ad.reshape(r, (n, 1))
    b2 = ad.reshape(b, (n, 1))
    proj = ad.mul(r2, cosk)
    d_perp_sq = ad.mul(ad.power(r2, 2.0), np.maximum(1.0 - cosk ** 2, 0.0))
    d_par = ad.relu(ad.mul(Tensor(rin) - proj, mask))
    term = free_space_term(d_perp_sq, d_par, b2, lam)
    cnt = np.maximum(mask.sum(axis=1), 1.0)
    per_point = ad.div(ad.tsum(ad.mul(term, mask), axis=1), Tensor(cnt))
    return ad.tmean(per_point)


def composite_loss(l_diff, l_occ, l_free,
                   weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum plus a float breakdown for the training trace."""
    l_diff, l_occ, l_free = _wrap(l_diff), _wrap(l_occ), _wrap(l_free)
    total = ad.add(l_diff,
                   ad.add(ad.mul(l_occ, weights.lambda_occ),
                          ad.mul(l_free, weights.lambda_free)))
    parts = {
        "loss_diff": float(l_diff.data),
        "loss_occ": float(l_occ.data),
        "loss_free": float(l_free.data),
        "loss_total": float(total.data),
    }
    return total, parts
