"""Coarse structural prior: jittered replication plus BEV infill.

Two cheap, training-free densifiers run on the sparse input:

* every input point spawns ``k_neighbors`` Gaussian-jittered copies, which
  thickens observed surfaces;
* a bird's-eye-view occupancy grid of the input is dilated by a Chebyshev
  ball, and each newly occupied cell is back-projected at a height
  aggregated from the occupied cells around it, which fills lateral gaps
  between scan rings.

The union (optionally trimmed/padded to a target point budget with
farthest-point ordering) becomes the candidate set that the diffusion
stage refines along each candidate's own ray.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import PointCloud, RayDecomposition, concat_clouds, decompose

log = logging.getLogger(__name__)


class EmptyInput(ValueError):
    """The sparse input cloud has no points."""


@dataclass
class Stage0Config:
    """Knobs for the structural prior.

    ``target_multiplier`` is optional: when None, the union of jittered and
    infilled points is returned untrimmed (guaranteeing at least
    ``k_neighbors`` candidates per input point); when set, the union is
    trimmed or cyclically padded to ``round(target_multiplier * n_input)``
    points in farthest-point order.
    """

    k_neighbors: int = 8
    jitter_sigma: float = 0.10   # [m]
    bev_cell: float = 0.20       # [m]
    dilation_radius: int = 2     # [cells], Chebyshev
    height_stat: str = "mean"    # "mean" or "median"
    grid_extent: float = 60.0    # [m], half-width of the BEV square
    target_multiplier: float | None = None

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        if self.bev_cell <= 0:
            raise ValueError("bev_cell must be positive")
        if self.dilation_radius < 1:
            raise ValueError("dilation_radius must be >= 1")
        if self.height_stat not in ("mean", "median"):
            raise ValueError(f"unknown height_stat {self.height_stat!r}")
        if self.grid_extent <= 0:
            raise ValueError("grid_extent must be positive")
        if self.target_multiplier is not None and self.target_multiplier <= 0:
            raise ValueError("target_multiplier must be positive")


def knn_jitter(cloud: PointCloud, cfg: Stage0Config, seed: int) -> PointCloud:
    """Spawn ``k_neighbors`` Gaussian copies of every input point.

    Output order is point-major: the ``k`` copies of input point ``i``
    occupy rows ``i*k .. i*k + k - 1``.  Copies inherit the source point's
    scanline attributes.

    Raises EmptyInput on an empty cloud.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyInput("cannot jitter an empty cloud")
    k = cfg.k_neighbors
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, cfg.jitter_sigma, size=(n, k, 3))
    xyz = (cloud.xyz[:, None, :] + noise).reshape(n * k, 3)
    rep = np.repeat(np.arange(n), k)
    return PointCloud(
        xyz=xyz,
        ring=None if cloud.ring is None else cloud.ring[rep],
        azimuth=None if cloud.azimuth is None else cloud.azimuth[rep],
        time=None if cloud.time is None else cloud.time[rep],
    )


def bev_cell_index(xy: np.ndarray, extent: float, cell: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Map xy coordinates to (ix, iy) cells of a square grid.

    The grid covers [-extent, extent) per axis with ``floor`` binning;
    out-of-extent points get index -1 in both axes.  Returns
    (ix, iy, cells_per_side).
    """
    ncells = int(np.ceil(2.0 * extent / cell))
    ix = np.floor((xy[:, 0] + extent) / cell).astype(np.int64)
    iy = np.floor((xy[:, 1] + extent) / cell).astype(np.int64)
    bad = (ix < 0) | (ix >= ncells) | (iy < 0) | (iy >= ncells)
    ix = np.where(bad, -1, ix)
    iy = np.where(bad, -1, iy)
    return ix, iy, ncells


def bev_expand(cloud: PointCloud, cfg: Stage0Config) -> PointCloud:
    """Dilate the BEV occupancy of ``cloud`` and back-project the new cells.

    Returns only the *new* points (one per newly occupied cell), placed at
    the cell center with height aggregated (mean or median, per config)
    over occupied cells within the dilation radius.  Points outside the
    grid extent are dropped from the occupancy with a logged warning.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyInput("cannot expand an empty cloud")
    ix, iy, nc = bev_cell_index(cloud.xyz[:, :2], cfg.grid_extent, cfg.bev_cell)
    ok = ix >= 0
    n_clipped = int(n - np.count_nonzero(ok))
    if n_clipped:
        log.warning("bev_expand: %d point(s) outside the %.1f m grid extent",
                    n_clipped, cfg.grid_extent)
    ix, iy = ix[ok], iy[ok]
    z = cloud.xyz[ok, 2]
    if ix.size == 0:
        return PointCloud(xyz=np.empty((0, 3)))

    occ = np.zeros((nc, nc), dtype=bool)
    occ[ix, iy] = True

    dilated = ndimage.binary_dilation(
        occ, structure=np.ones((3, 3), dtype=bool),
        iterations=cfg.dilation_radius)
    new_ix, new_iy = np.nonzero(dilated & ~occ)
    if new_ix.size == 0:
        return PointCloud(xyz=np.empty((0, 3)))

    # per-cell source height (mean or median of the points that landed there)
    height = np.full((nc, nc), np.nan)
    if cfg.height_stat == "mean":
        sums = np.zeros((nc, nc))
        cnts = np.zeros((nc, nc))
        np.add.at(sums, (ix, iy), z)
        np.add.at(cnts, (ix, iy), 1.0)
        with np.errstate(invalid="ignore"):
            height = np.where(cnts > 0, sums / np.maximum(cnts, 1.0), np.nan)
    else:
        order = np.lexsort((iy, ix))
        sx, sy, sz = ix[order], iy[order], z[order]
        key = sx * nc + sy
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        for a, b in zip(starts, np.r_[starts[1:], key.size]):
            height[sx[a], sy[a]] = np.median(sz[a:b])

    # aggregate heights from occupied cells in the Chebyshev neighbourhood
    r = cfg.dilation_radius
    offs = np.arange(-r, r + 1)
    oxx, oyy = np.meshgrid(offs, offs, indexing="ij")
    offsets = np.stack([oxx.ravel(), oyy.ravel()], axis=1)  # ((2r+1)^2, 2)
    nbr_x = new_ix[:, None] + offsets[None, :, 0]
    nbr_y = new_iy[:, None] + offsets[None, :, 1]
    in_grid = (nbr_x >= 0) & (nbr_x < nc) & (nbr_y >= 0) & (nbr_y < nc)
    vals = np.full(nbr_x.shape, np.nan)
    vals[in_grid] = height[nbr_x[in_grid], nbr_y[in_grid]]
    with np.errstate(invalid="ignore"):
        if cfg.height_stat == "mean":
            agg = np.nanmean(vals, axis=1)
        else:
            agg = np.nanmedian(vals, axis=1)
    # dilation guarantees every new cell has an occupied neighbour in range
    assert not np.any(np.isnan(agg))

    half = cfg.grid_extent
    px = (new_ix + 0.5) * cfg.bev_cell - half
    py = (new_iy + 0.5) * cfg.bev_cell - half
    xyz = np.stack([px, py, agg], axis=1)
    return PointCloud(xyz=xyz)


def farthest_point_order(xyz: np.ndarray, m: int | None = None,
                         start: int | None = None) -> np.ndarray:
    """Greedy farthest-point ordering of ``xyz``.

    Starts at the point farthest from the centroid unless ``start`` gives
    an explicit index; ties resolve to the lowest index.  Returns the
    first ``m`` selected indices (all of them when ``m`` is None).
    """
    n = xyz.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    m = n if m is None else min(m, n)
    if start is None:
        centroid = xyz.mean(axis=0)
        start = int(np.argmax(np.linalg.norm(xyz - centroid, axis=1)))
    order = np.empty(m, dtype=np.int64)
    order[0] = start
    # squared distances via |x|^2 - 2 x.p + |p|^2: the matvec is the only
    # pass over all coordinates, which keeps the greedy loop memory-lean
    sq = np.einsum("ij,ij->i", xyz, xyz)
    d2 = sq - 2.0 * (xyz @ xyz[start]) + sq[start]
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        order[i] = nxt
        np.minimum(d2, sq - 2.0 * (xyz @ xyz[nxt]) + sq[nxt], out=d2)
    return order


def build_prior(cloud: PointCloud, cfg: Stage0Config,
                seed: int) -> tuple[PointCloud, RayDecomposition]:
    """Full Stage-0 pass: jitter + BEV infill (+ optional budget trim).

    Returns the candidate cloud together with its ray decomposition
    (unit direction + range per candidate).  With ``target_multiplier``
    set, candidates are returned in farthest-point order, trimmed to the
    budget or cyclically repeated when the budget exceeds the union.
    """
    jittered = knn_jitter(cloud, cfg, seed)
    expanded = bev_expand(cloud, cfg)
    union = concat_clouds([jittered, expanded]) if len(expanded) else jittered

    if cfg.target_multiplier is not None:
        target = int(round(cfg.target_multiplier * len(cloud)))
        target = max(target, 1)
        order = farthest_point_order(union.xyz, m=min(target, len(union)))
        idx = order[np.arange(target) % order.size]
        union = union.select(idx)

    return union, decompose(union.xyz)
