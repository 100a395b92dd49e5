"""Sensor-frame point/ray primitives.

Everything downstream treats a LiDAR return as a unit direction plus a
scalar range measured from the sensor origin.  Rays are represented as
plain ``(..., 3)`` float64 unit vectors (no wrapper class); point clouds
carry optional per-point scanline attributes alongside the coordinates.

All functions broadcast over leading axes, so a single point ``(3,)`` and
a cloud ``(N, 3)`` go through the same code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Returns closer to the origin than this are degenerate: the direction of
# a zero-length vector is undefined. [m]
ORIGIN_EPS = 1e-9

# Tolerance on |1 - ||d||| when validating caller-supplied unit vectors.
UNIT_TOL = 1e-6


class DegeneratePoint(ValueError):
    """A point coincides with the sensor origin (norm <= ORIGIN_EPS)."""


class NegativeRange(ValueError):
    """A reconstruction was asked for a negative range."""


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) points, got shape {p.shape}")
    return p


def check_unit(d, tol: float = UNIT_TOL) -> np.ndarray:
    """Validate that ``d`` holds unit vectors; returns it as float64.

    Raises ValueError if any norm deviates from 1 by more than ``tol``.
    """
    d = _as_points(d)
    norms = np.linalg.norm(d, axis=-1)
    err = np.abs(norms - 1.0)
    if np.any(err > tol):
        raise ValueError(
            f"direction is not unit length (max |norm-1| = {err.max():.3e})"
        )
    return d


@dataclass
class RayDecomposition:
    """A cloud factored into unit directions and ranges.

    ``valid`` marks rays whose range is finite and positive; callers that
    inject placeholder rays (e.g. free-space probes) may clear entries.
    """

    direction: np.ndarray  # (..., 3) float64, unit
    range: np.ndarray      # (...,)   float64, metres
    valid: np.ndarray      # (...,)   bool

    def __len__(self) -> int:
        return int(np.prod(self.range.shape))


def decompose(points) -> RayDecomposition:
    """Factor points into (unit direction, range) about the origin.

    Parameters
    ----------
    points : array_like, shape (..., 3)
        Sensor-frame coordinates in metres.

    Returns
    -------
    RayDecomposition
        ``direction * range[..., None]`` reproduces the input to float64
        round-off.

    Raises
    ------
    DegeneratePoint
        If any point lies within ``ORIGIN_EPS`` of the origin.
    """
    p = _as_points(points)
    r = np.linalg.norm(p, axis=-1)
    if np.any(r <= ORIGIN_EPS):
        n_bad = int(np.count_nonzero(r <= ORIGIN_EPS))
        raise DegeneratePoint(
            f"{n_bad} point(s) coincide with the sensor origin"
        )
    d = p / r[..., None]
    return RayDecomposition(direction=d, range=r, valid=np.isfinite(r) & (r > 0))


def reconstruct(direction, range_m) -> np.ndarray:
    """Inverse of :func:`decompose`: ``p = direction * range_m``.

    Raises NegativeRange if any range is negative (zero is allowed: it
    encodes a degenerate point deliberately placed at the origin, which
    :func:`decompose` would then reject).
    """
    d = check_unit(direction)
    r = np.asarray(range_m, dtype=np.float64)
    if np.any(r < 0):
        raise NegativeRange(f"negative range (min {r.min():.6g} m)")
    return d * r[..., None]


def lateral_distance(points, ray_direction) -> np.ndarray:
    """Perpendicular distance from each point to the ray through the origin.

    ``ray_direction`` must be a single unit vector ``(3,)`` or broadcastable
    against ``points``.  Computed as ||p - (p.d) d||, which is exact for
    points behind the origin too (the ray is treated as a full line here;
    radial sidedness is the projection's job).
    """
    p = _as_points(points)
    d = check_unit(ray_direction)
    proj = np.sum(p * d, axis=-1)
    closest = proj[..., None] * d
    return np.linalg.norm(p - closest, axis=-1)


def radial_projection(points, ray_direction) -> np.ndarray:
    """Signed projection of each point onto the ray direction (metres)."""
    p = _as_points(points)
    d = check_unit(ray_direction)
    return np.sum(p * d, axis=-1)


def radial_occlusion(points, ray_direction, gt_range) -> np.ndarray:
    """How far in front of a known return each point sits along its ray.

    Returns max(0, gt_range - p.d): zero when the point is at or beyond
    the return, positive when the point would occlude it.  ``gt_range``
    may be +inf (a miss ray), which makes every finite projection an
    occlusion with infinite margin.
    """
    proj = radial_projection(points, ray_direction)
    gt = np.asarray(gt_range, dtype=np.float64)
    return np.maximum(0.0, gt - proj)


@dataclass
class PointCloud:
    """Sensor-frame point cloud with optional scanline attributes.

    Attributes
    ----------
    xyz : (N, 3) float64
        Coordinates in metres, sensor at the origin.
    ring : (N,) int32, optional
        Beam index of the return.
    azimuth : (N,) float64, optional
        Horizontal angle in radians, in [-pi, pi).
    time : (N,) float64, optional
        Offset within the sweep, seconds.
    """

    xyz: np.ndarray
    ring: np.ndarray | None = None
    azimuth: np.ndarray | None = None
    time: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64))
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (N, 3), got {self.xyz.shape}")
        n = self.xyz.shape[0]
        if self.ring is not None:
            self.ring = np.asarray(self.ring, dtype=np.int32)
            if self.ring.shape != (n,):
                raise ValueError("ring length mismatch")
        if self.azimuth is not None:
            self.azimuth = np.asarray(self.azimuth, dtype=np.float64)
            if self.azimuth.shape != (n,):
                raise ValueError("azimuth length mismatch")
        if self.time is not None:
            self.time = np.asarray(self.time, dtype=np.float64)
            if self.time.shape != (n,):
                raise ValueError("time length mismatch")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def has_scanline(self) -> bool:
        return self.ring is not None and self.azimuth is not None and self.time is not None

    def select(self, index) -> "PointCloud":
        """Subset/reorder by an index array or boolean mask."""
        return PointCloud(
            xyz=self.xyz[index],
            ring=None if self.ring is None else self.ring[index],
            azimuth=None if self.azimuth is None else self.azimuth[index],
            time=None if self.time is None else self.time[index],
        )


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Concatenate clouds; an attribute survives only if every part has it."""
    if not clouds:
        raise ValueError("nothing to concatenate")
    xyz = np.concatenate([c.xyz for c in clouds], axis=0)

    def _cat(name):
        parts = [getattr(c, name) for c in clouds]
        if any(p is None for p in parts):
            return None
        return np.concatenate(parts, axis=0)

    return PointCloud(xyz=xyz, ring=_cat("ring"), azimuth=_cat("azimuth"),
                      time=_cat("time"))
