"""Geometry and physical-validity metrics.

* Chamfer distance: symmetric mean-of-means of *Euclidean* (not squared)
  nearest-neighbour distances, in metres.  KD-tree accelerated, exact.
* EMD: both clouds are subsampled to equal size (seeded farthest-point
  sampling, cap 512) and matched by an exact assignment; the score is the
  mean matched distance.
* FSVR: percentage of generated points that sit laterally *strictly*
  within ``lateral_tol`` of a ground-truth ray while projecting closer
  than that ray's return (minus a small radial slack).  Miss rays carry
  an infinite return, so any on-ray point violates them.
* REAP: relative point-count error in percent.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .prior import farthest_point_order


class EmptyCloud(ValueError):
    """A metric that needs points got an empty cloud."""


class EmptyGroundTruth(ValueError):
    """REAP needs a non-empty ground truth."""


@dataclass
class FsvrConfig:
    lateral_tol: float = 0.1     # [m], strict inequality
    radial_slack: float = 1e-3   # [m], float safety on the depth test
    include_miss_rays: bool = True

    def __post_init__(self) -> None:
        if self.lateral_tol <= 0:
            raise ValueError("lateral_tol must be positive")
        if self.radial_slack < 0:
            raise ValueError("radial_slack must be non-negative")


def _xyz(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.xyz
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("expected (N, 3) points")
    return arr


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance in metres (mean-of-means, Euclidean)."""
    pa, pb = _xyz(a), _xyz(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


def emd(a, b, max_pts: int = 512, seed: int = 0) -> float:
    """Mean matched distance under an exact assignment on FPS subsamples.

    Both clouds are reduced to ``min(max_pts, |a|, |b|)`` points with
    farthest-point sampling started at a seeded uniform index, so the
    score is deterministic for a given seed.
    """
    pa, pb = _xyz(a), _xyz(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptyCloud("emd needs two non-empty clouds")
    m = min(max_pts, pa.shape[0], pb.shape[0])
    # one shared draw, reduced per cloud: identical clouds subsample
    # identically, so emd(a, a) stays 0 even above the cap
    start = int(np.random.default_rng(seed).integers(2 ** 62))
    if pa.shape[0] > m:
        pa = pa[farthest_point_order(pa, m, start=start % pa.shape[0])]
    if pb.shape[0] > m:
        pb = pb[farthest_point_order(pb, m, start=start % pb.shape[0])]
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def fsvr(gen, ray_directions: np.ndarray, ray_ranges: np.ndarray,
         cfg: FsvrConfig | None = None,
         chunk: int = 512) -> tuple[float, list[tuple[int, int, float, float]]]:
    """Free-space violation ratio, with per-point witness records.

    A generated point violates if *some* ray has lateral distance
    d_perp < lateral_tol (strict) and the point's projection onto that ray
    is shorter than the ray's return minus ``radial_slack``.  Returns
    (percent, violations) where each violation is
    (point index, witness ray index, d_perp, depth deficit); the witness
    is the tolerated ray with the largest deficit.

    ``ray_ranges`` may contain +inf (miss rays); they participate unless
    ``include_miss_rays`` is off.
    """
    cfg = cfg or FsvrConfig()
    pts = _xyz(gen)
    n = pts.shape[0]
    if n == 0:
        return 0.0, []
    dirs = np.asarray(ray_directions, dtype=np.float64)
    rng_m = np.asarray(ray_ranges, dtype=np.float64)
    if not cfg.include_miss_rays:
        keep = np.isfinite(rng_m)
        dirs, rng_m = dirs[keep], rng_m[keep]
    ray_index = np.arange(rng_m.shape[0])
    if rng_m.shape[0] == 0:
        return 0.0, []

    norms_sq = np.sum(pts * pts, axis=1)
    violations: list[tuple[int, int, float, float]] = []
    for lo in range(0, n, chunk):
        p = pts[lo:lo + chunk]
        proj = p @ dirs.T                                  # (c, M)
        d_perp = np.sqrt(np.maximum(norms_sq[lo:lo + chunk, None] - proj ** 2,
                                    0.0))
        deficit = rng_m[None, :] - cfg.radial_slack - proj
        # the traversed segment starts at the origin: a point projecting
        # behind the sensor is not on this ray's path (antiparallel rays
        # would otherwise flag every surface point at d_perp = 0)
        bad = (proj > 0.0) & (d_perp < cfg.lateral_tol) & (deficit > 0.0)
        hit_rows = np.flatnonzero(bad.any(axis=1))
        for i in hit_rows:
            cand = np.flatnonzero(bad[i])
            j = cand[np.argmax(deficit[i, cand])]
            violations.append((int(lo + i), int(ray_index[j]),
                               float(d_perp[i, j]), float(deficit[i, j])))
    return 100.0 * len(violations) / n, violations


def reap(gen, gt) -> float:
    """Relative point-count error, percent of the ground-truth count."""
    n_gen = len(gen) if isinstance(gen, PointCloud) else _xyz(gen).shape[0]
    n_gt = len(gt) if isinstance(gt, PointCloud) else _xyz(gt).shape[0]
    if n_gt == 0:
        raise EmptyGroundTruth("reap needs a non-empty ground truth")
    return 100.0 * abs(n_gen - n_gt) / n_gt


@dataclass
class EvalReport:
    cd: float
    emd: float
    fsvr: float
    reap: float
    n_generated: int
    n_gt: int
    config_hash: str = ""
    violations: list[tuple[int, int, float, float]] = field(default_factory=list)

    CSV_FIELDS = ("cd", "emd", "fsvr", "reap", "n_generated", "n_gt",
                  "config_hash")

    def to_csv(self) -> str:
        """One header + one data row; floats via repr so parsing is lossless."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(self.CSV_FIELDS)
        w.writerow([repr(self.cd), repr(self.emd), repr(self.fsvr),
                    repr(self.reap), self.n_generated, self.n_gt,
                    self.config_hash])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2 or tuple(rows[0]) != cls.CSV_FIELDS:
            raise ValueError("not an EvalReport CSV")
        r = rows[1]
        return cls(cd=float(r[0]), emd=float(r[1]), fsvr=float(r[2]),
                   reap=float(r[3]), n_generated=int(r[4]), n_gt=int(r[5]),
                   config_hash=r[6])


def evaluate(gen, gt, ray_directions: np.ndarray, ray_ranges: np.ndarray,
             cfg: FsvrConfig | None = None, emd_max_pts: int = 512,
             seed: int = 0, config_hash: str = "") -> EvalReport:
    """Full report against a dense ground truth and its fired-ray set."""
    pct, viol = fsvr(gen, ray_directions, ray_ranges, cfg)
    return EvalReport(
        cd=chamfer(gen, gt),
        emd=emd(gen, gt, max_pts=emd_max_pts, seed=seed),
        fsvr=pct,
        reap=reap(gen, gt),
        n_generated=len(gen) if isinstance(gen, PointCloud) else _xyz(gen).shape[0],
        n_gt=len(gt) if isinstance(gt, PointCloud) else _xyz(gt).shape[0],
        config_hash=config_hash,
        violations=viol,
    )
