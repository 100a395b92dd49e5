"""Synthetic spinning-LiDAR simulator.

Scenes are a ground plane plus axis-aligned boxes; the sensor sits at the
origin and fires a regular beam/azimuth grid.  Ranges come from exact
ray/plane and ray/box (slab) intersection, so every simulated return is
the *nearest* surface along its ray -- the property the free-space and
occlusion machinery downstream relies on.

Sweep pairs (sparse input vs dense ground truth) are built by raycasting
the dense grid once and striding it: with the lower-edge angular
convention used here, a dense grid subsampled by integer strides in both
axes *is* the sparse sensor's grid, bit for bit.  Every sparse return
therefore lies exactly on a dense ground-truth ray.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, reconstruct

log = logging.getLogger(__name__)

# One full rotation of the sensor head. [s]
SWEEP_PERIOD = 0.1

# Rays closer to axis-parallel than this are treated as parallel to the
# corresponding slab (avoids 0/0 in the intersection math).
_PARALLEL_EPS = 1e-15

# Intersections closer than this are ignored: the sensor cannot see its
# own origin. [m]
_MIN_HIT = 1e-9

# Hit-count ratio band expected from a dense/sparse pair with strides
# (2, 2); scenes outside it are suspicious (warning, not an error).
RATIO_BAND = (1.8, 4.6)


class InvalidSpec(ValueError):
    """Scene specification violates a structural requirement."""


class ResolutionMismatch(ValueError):
    """Dense sensor is not an integer >=2x refinement of the sparse one."""


class NoFreeSpace(RuntimeError):
    """No ray in the sweep has verifiable free space to sample from."""


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and full side lengths, metres."""

    center: tuple[float, float, float]
    extents: tuple[float, float, float]


@dataclass
class SceneSpec:
    """Declarative scene: a ground plane at ``ground_z`` plus boxes.

    ``max_extent`` bounds the horizontal footprint of all geometry; specs
    that place boxes outside it are rejected rather than silently clipped.
    """

    ground_z: float = -1.7
    boxes: list[Box] = field(default_factory=list)
    seed: int = 0
    max_extent: float = 60.0


@dataclass
class SceneGeometry:
    """Validated, array-packed scene ready for raycasting."""

    box_lo: np.ndarray  # (B, 3) float64, min corners
    box_hi: np.ndarray  # (B, 3) float64, max corners
    ground_z: float
    max_extent: float


def generate_scene(spec: SceneSpec) -> SceneGeometry:
    """Validate a spec and pack it into raycastable arrays.

    Raises
    ------
    InvalidSpec
        On non-positive box extents, geometry outside ``max_extent``,
        a ground plane at or above the sensor, or a box containing the
        sensor origin.
    """
    if not spec.ground_z < 0:
        raise InvalidSpec(f"ground_z must be below the sensor, got {spec.ground_z}")
    if spec.max_extent <= 0:
        raise InvalidSpec("max_extent must be positive")

    n = len(spec.boxes)
    centers = np.array([b.center for b in spec.boxes], dtype=np.float64).reshape(n, 3)
    extents = np.array([b.extents for b in spec.boxes], dtype=np.float64).reshape(n, 3)
    if n and np.any(extents <= 0):
        raise InvalidSpec("box extents must be strictly positive")

    half = extents / 2.0
    lo = centers - half
    hi = centers + half

    if n:
        corner_xy = np.abs(centers[:, :2]) + half[:, :2]
        if np.any(np.hypot(corner_xy[:, 0], corner_xy[:, 1]) > spec.max_extent):
            raise InvalidSpec(
                f"box geometry extends beyond max_extent={spec.max_extent} m"
            )
        inside = np.all((lo <= 0.0) & (0.0 <= hi), axis=1)
        if np.any(inside):
            raise InvalidSpec("a box contains the sensor origin")

    return SceneGeometry(box_lo=lo, box_hi=hi, ground_z=float(spec.ground_z),
                         max_extent=float(spec.max_extent))


def random_scene_spec(seed: int, n_boxes: int | None = None,
                      ground_z: float = -1.7,
                      radial_band: tuple[float, float] = (4.0, 28.0),
                      max_extent: float = 60.0) -> SceneSpec:
    """Draw a reproducible random scene: boxes scattered around the sensor.

    Most boxes rest on the ground; roughly one in four floats (overhangs,
    so that rays can pass underneath).
    """
    rng = np.random.default_rng(seed)
    if n_boxes is None:
        n_boxes = int(rng.integers(4, 11))
    boxes = []
    for _ in range(n_boxes):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        rad = rng.uniform(*radial_band)
        ext = rng.uniform(0.6, 6.0, size=3)
        cx = rad * math.cos(theta)
        cy = rad * math.sin(theta)
        if rng.uniform() < 0.25:
            cz = ground_z + ext[2] / 2 + rng.uniform(0.5, 3.0)
        else:
            cz = ground_z + ext[2] / 2
        boxes.append(Box(center=(cx, cy, float(cz)),
                         extents=(float(ext[0]), float(ext[1]), float(ext[2]))))
    return SceneSpec(ground_z=ground_z, boxes=boxes, seed=seed,
                     max_extent=max_extent)


# ---------------------------------------------------------------------------
# sensor model


@dataclass(frozen=True)
class SensorModel:
    """Spinning sensor: ``beam_count`` elevations x ``azimuth_steps`` columns.

    Angles follow the lower-edge convention: beam ``i`` sits at
    ``fov_min + i * (fov_max - fov_min) / beam_count`` and azimuth column
    ``j`` at ``-pi + j * 2*pi / azimuth_steps``.  Neither axis includes its
    upper endpoint, which is what makes integer-strided subsampling of a
    finer grid land exactly on a coarser sensor's grid.
    """

    beam_count: int = 16
    azimuth_steps: int = 360
    vertical_fov: tuple[float, float] = (math.radians(-22.0), math.radians(2.0))
    max_range: float = 60.0

    def __post_init__(self) -> None:
        if self.beam_count < 2:
            raise ValueError("beam_count must be >= 2")
        if self.azimuth_steps < 8:
            raise ValueError("azimuth_steps must be >= 8")
        lo, hi = self.vertical_fov
        if not lo < hi:
            raise ValueError("vertical_fov must satisfy min < max")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def ray_count(self) -> int:
        return self.beam_count * self.azimuth_steps

    def elevations(self) -> np.ndarray:
        lo, hi = self.vertical_fov
        step = (hi - lo) / self.beam_count
        return lo + step * np.arange(self.beam_count)

    def azimuths(self) -> np.ndarray:
        step = 2.0 * math.pi / self.azimuth_steps
        return -math.pi + step * np.arange(self.azimuth_steps)


SENSOR_PRESETS: dict[str, SensorModel] = {
    # Small grid for quick experiments on a laptop CPU.
    "desk-16": SensorModel(beam_count=16, azimuth_steps=360),
    # Classic 32-beam mid-range unit.
    "spin-32": SensorModel(beam_count=32, azimuth_steps=1080,
                           vertical_fov=(math.radians(-30.67), math.radians(10.67)),
                           max_range=100.0),
    # 64-beam highway-grade unit.
    "spin-64": SensorModel(beam_count=64, azimuth_steps=2048,
                           vertical_fov=(math.radians(-24.9), math.radians(2.0)),
                           max_range=120.0),
}


def beam_directions(sensor: SensorModel) -> np.ndarray:
    """Unit directions for the full sweep, shape (beams, steps, 3).

    Row-major in (ring, azimuth): flattening gives the sweep's canonical
    ray order.
    """
    elev = sensor.elevations()[:, None]
    az = sensor.azimuths()[None, :]
    ce = np.cos(elev)
    d = np.empty((sensor.beam_count, sensor.azimuth_steps, 3), dtype=np.float64)
    d[..., 0] = ce * np.cos(az)
    d[..., 1] = ce * np.sin(az)
    d[..., 2] = np.broadcast_to(np.sin(elev), d.shape[:2])
    return d


# ---------------------------------------------------------------------------
# raycasting


def raycast(geom: SceneGeometry, directions: np.ndarray,
            max_range: float) -> np.ndarray:
    """Range of the nearest surface along each unit direction; +inf = miss.

    Parameters
    ----------
    geom : SceneGeometry
    directions : (..., 3) float64 unit vectors.
    max_range : float
        Returns farther than this are reported as misses.

    Notes
    -----
    Box intersection uses the slab method with explicit handling of
    axis-parallel rays; the ground plane is an exact division.  Because
    directions are unit length, the ray parameter *is* metric range.
    """
    d = np.asarray(directions, dtype=np.float64)
    flat = d.reshape(-1, 3)
    m = flat.shape[0]
    best = np.full(m, np.inf)

    # ground plane z = ground_z (below the sensor): only downward rays hit
    dz = flat[:, 2]
    down = dz < -_PARALLEL_EPS
    with np.errstate(divide="ignore"):
        t_ground = np.where(down, geom.ground_z / dz, np.inf)
    t_ground = np.where(t_ground > _MIN_HIT, t_ground, np.inf)
    best = np.minimum(best, t_ground)

    nbox = geom.box_lo.shape[0]
    if nbox:
        tmin = np.full((m, nbox), -np.inf)
        tmax = np.full((m, nbox), np.inf)
        for ax in range(3):
            d_ax = flat[:, ax:ax + 1]                     # (m, 1)
            lo_ax = geom.box_lo[None, :, ax]              # (1, B)
            hi_ax = geom.box_hi[None, :, ax]
            parallel = np.abs(d_ax) < _PARALLEL_EPS
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = lo_ax / d_ax
                t2 = hi_ax / d_ax
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            # parallel to this slab: the ray hits iff the origin sits
            # between the slab planes (origin is at 0)
            inside = (lo_ax <= 0.0) & (0.0 <= hi_ax)
            near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
            far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
        hit = tmax >= np.maximum(tmin, _MIN_HIT)
        # origin strictly outside every box (validated), so entry is tmin;
        # keep the tmax fallback for rays starting on a face
        entry = np.where(tmin > _MIN_HIT, tmin, tmax)
        entry = np.where(hit, entry, np.inf)
        best = np.minimum(best, entry.min(axis=1))

    best = np.where(best <= max_range, best, np.inf)
    return best.reshape(d.shape[:-1])


@dataclass
class RayBundle:
    """Every ray fired in a sweep, hits and misses alike.

    Flat arrays in canonical order (ring-major, then azimuth).  ``ranges``
    is +inf on misses.
    """

    directions: np.ndarray  # (M, 3) float64 unit
    ranges: np.ndarray      # (M,)   float64, +inf = miss
    ring: np.ndarray        # (M,)   int32
    azimuth: np.ndarray     # (M,)   float64 rad
    time: np.ndarray        # (M,)   float64 s
    max_range: float

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.ranges)

    @property
    def hit_count(self) -> int:
        return int(np.count_nonzero(self.hit))

    def select(self, index) -> "RayBundle":
        return RayBundle(self.directions[index], self.ranges[index],
                         self.ring[index], self.azimuth[index],
                         self.time[index], self.max_range)

    def to_cloud(self) -> PointCloud:
        """Hit returns as a point cloud with scanline attributes."""
        mask = self.hit
        xyz = reconstruct(self.directions[mask], self.ranges[mask])
        return PointCloud(xyz=xyz, ring=self.ring[mask],
                          azimuth=self.azimuth[mask], time=self.time[mask])


def raycast_sweep(geom: SceneGeometry, sensor: SensorModel) -> RayBundle:
    """Fire the full sweep grid; deterministic for fixed inputs."""
    dirs = beam_directions(sensor).reshape(-1, 3)
    ranges = raycast(geom, dirs, sensor.max_range)
    ring = np.repeat(np.arange(sensor.beam_count, dtype=np.int32),
                     sensor.azimuth_steps)
    az = np.tile(sensor.azimuths(), sensor.beam_count)
    time = (az + math.pi) / (2.0 * math.pi) * SWEEP_PERIOD
    return RayBundle(directions=dirs, ranges=ranges, ring=ring, azimuth=az,
                     time=time, max_range=sensor.max_range)


# ---------------------------------------------------------------------------
# sweep pairs


@dataclass
class SweepPair:
    """Sparse input sweep plus its dense ground truth over one scene."""

    sparse: PointCloud       # hit returns of the sparse sweep
    dense_gt: PointCloud     # hit returns of the dense sweep
    gt_rays: RayBundle       # every dense ray, misses included
    sparse_rays: RayBundle   # every sparse ray (strided subset of gt_rays)
    ratio: float             # dense hit count / sparse hit count


def make_sweep_pair(geom: SceneGeometry, sparse_sensor: SensorModel,
                    dense_sensor: SensorModel) -> SweepPair:
    """Raycast the dense sensor once and stride it down to the sparse one.

    Requires the dense grid to be an integer multiple (>= 2) of the sparse
    grid in both axes with identical FOV and max range, so that the sparse
    sweep is an exact subset of the dense rays.

    Raises
    ------
    ResolutionMismatch
        If the two sensors do not nest as required.
    """
    if dense_sensor.beam_count % sparse_sensor.beam_count:
        raise ResolutionMismatch("dense beam count is not a multiple of sparse")
    if dense_sensor.azimuth_steps % sparse_sensor.azimuth_steps:
        raise ResolutionMismatch("dense azimuth steps is not a multiple of sparse")
    kb = dense_sensor.beam_count // sparse_sensor.beam_count
    ka = dense_sensor.azimuth_steps // sparse_sensor.azimuth_steps
    if kb < 2 or ka < 2:
        raise ResolutionMismatch(
            f"dense grid must refine sparse by >= 2x per axis, got {kb}x{ka}"
        )
    if not (np.isclose(dense_sensor.vertical_fov[0], sparse_sensor.vertical_fov[0])
            and np.isclose(dense_sensor.vertical_fov[1], sparse_sensor.vertical_fov[1])):
        raise ResolutionMismatch("vertical FOV differs between the two sensors")
    if not np.isclose(dense_sensor.max_range, sparse_sensor.max_range):
        raise ResolutionMismatch("max_range differs between the two sensors")

    gt_rays = raycast_sweep(geom, dense_sensor)

    rows = np.arange(sparse_sensor.beam_count) * kb
    cols = np.arange(sparse_sensor.azimuth_steps) * ka
    flat = (rows[:, None] * dense_sensor.azimuth_steps + cols[None, :]).ravel()

    sparse_rays = gt_rays.select(flat)
    # relabel rings in the sparse sensor's own numbering
    sparse_rays.ring = np.repeat(
        np.arange(sparse_sensor.beam_count, dtype=np.int32),
        sparse_sensor.azimuth_steps)
    sparse_rays.max_range = sparse_sensor.max_range

    sparse_cloud = sparse_rays.to_cloud()
    dense_cloud = gt_rays.to_cloud()

    n_sparse = len(sparse_cloud)
    if n_sparse == 0:
        raise InvalidSpec("sparse sweep saw nothing; scene is empty to the sensor")
    ratio = len(dense_cloud) / n_sparse
    if not RATIO_BAND[0] <= ratio <= RATIO_BAND[1]:
        log.warning("dense/sparse hit ratio %.2f outside expected band %s",
                    ratio, RATIO_BAND)

    return SweepPair(sparse=sparse_cloud, dense_gt=dense_cloud,
                     gt_rays=gt_rays, sparse_rays=sparse_rays, ratio=ratio)


# ---------------------------------------------------------------------------
# negative (free-space) rays


@dataclass
class NegativeRaySet:
    """Rays whose probe range is verified to lie in free space.

    Directions are copied from recorded sweep rays, so free space follows
    from the nearest-return semantics of the simulator: anything strictly
    closer than the recorded return (minus a safety margin) is empty, and
    the whole length of a miss ray is empty.
    """

    directions: np.ndarray    # (K, 3)
    probe_range: np.ndarray   # (K,) m, strictly inside free space
    ring: np.ndarray          # (K,) int32, source ray's ring
    azimuth: np.ndarray       # (K,)
    time: np.ndarray          # (K,)
    source_index: np.ndarray  # (K,) int64 index into the source bundle

    def __len__(self) -> int:
        return self.directions.shape[0]


def sample_negative_rays(pair: SweepPair, fraction: float, seed: int,
                         margin: float = 0.5,
                         count: int | None = None) -> NegativeRaySet:
    """Draw verified free-space probes from a sweep pair's dense rays.

    ``count`` defaults to round(fraction * hit count).  Miss rays are
    preferred (their entire extent is free); once exhausted, hit rays with
    at least ``margin`` metres of clearance are drawn with replacement.
    Probe ranges are uniform in [0.05, 1.0] x the free extent, keeping
    probes away from the sensor origin.

    Raises
    ------
    NoFreeSpace
        If probes are requested but no ray offers verifiable free space.
    """
    rays = pair.gt_rays
    n_valid = rays.hit_count
    if count is None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        count = int(round(fraction * n_valid))

    miss_idx = np.flatnonzero(~rays.hit)
    eligible = np.flatnonzero(rays.hit & (rays.ranges > margin))
    if count > 0 and miss_idx.size == 0 and eligible.size == 0:
        raise NoFreeSpace(
            f"no miss rays and every return is closer than margin={margin} m"
        )

    rng = np.random.default_rng(seed)
    n_miss = min(count, miss_idx.size)
    chosen = []
    if n_miss:
        chosen.append(rng.choice(miss_idx, size=n_miss, replace=False))
    rest = count - n_miss
    if rest:
        if eligible.size == 0:
            raise NoFreeSpace("miss rays exhausted and no return clears the margin")
        chosen.append(rng.choice(eligible, size=rest,
                                 replace=rest > eligible.size))
    idx = (np.concatenate(chosen) if chosen
           else np.empty(0, dtype=np.int64)).astype(np.int64)

    free_extent = np.where(np.isfinite(rays.ranges[idx]),
                           rays.ranges[idx] - margin, rays.max_range)
    u = rng.uniform(0.05, 1.0, size=idx.size)
    probe = u * free_extent

    return NegativeRaySet(directions=rays.directions[idx],
                          probe_range=probe, ring=rays.ring[idx],
                          azimuth=rays.azimuth[idx], time=rays.time[idx],
                          source_index=idx)
