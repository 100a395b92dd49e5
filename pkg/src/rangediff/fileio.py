"""Binary point-cloud I/O, ray sidecars, PLY export, scene-spec JSON.

Native sweep format (little-endian throughout)::

    magic  b"RDNS"  | version u16 | count u64 | flags u32
    count records:  x, y, z float32
                    [+ ring u16]    if flags & FLAG_RING
                    [+ azimuth f32] if flags & FLAG_AZIMUTH
                    [+ time f32]    if flags & FLAG_TIME

Files without the magic fall back to the common raw-volume layout of
driving benchmarks (float32 x, y, z, intensity records; the intensity is
dropped): any file whose size is a multiple of 16 parses that way.
Non-finite rows are dropped with a logged warning count, never an error.

Ray sidecars are headerless fixed records (unit direction 3x f64, range
f64 with +inf for misses, hit flag u8 -- 33 bytes), enough to rebuild the
ground-truth ray set for evaluation.
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

SWEEP_MAGIC = b"RDNS"
SWEEP_VERSION = 1
FLAG_RING = 1
FLAG_AZIMUTH = 2
FLAG_TIME = 4

_HEADER = struct.Struct("<4sHQI")
_RAY_RECORD = np.dtype([("direction", "<f8", (3,)), ("range", "<f8"),
                        ("hit", "u1")])


class IoFailure(RuntimeError):
    """An OS-level read/write failed."""


class BadMagic(ValueError):
    """File is neither the native format nor a recognisable fallback."""


class TruncatedFile(ValueError):
    """File ends before its declared payload does."""


class UnsupportedVersion(ValueError):
    """File written by a newer/unknown format revision."""


def _record_dtype(flags: int) -> np.dtype:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if flags & FLAG_RING:
        fields.append(("ring", "<u2"))
    if flags & FLAG_AZIMUTH:
        fields.append(("azimuth", "<f4"))
    if flags & FLAG_TIME:
        fields.append(("time", "<f4"))
    return np.dtype(fields)


def write_sweep(path, cloud: PointCloud) -> None:
    """Write a cloud in the native format, keeping whatever attributes it has."""
    flags = 0
    if cloud.ring is not None:
        flags |= FLAG_RING
    if cloud.azimuth is not None:
        flags |= FLAG_AZIMUTH
    if cloud.time is not None:
        flags |= FLAG_TIME
    rec = np.empty(len(cloud), dtype=_record_dtype(flags))
    rec["x"], rec["y"], rec["z"] = cloud.xyz.T.astype(np.float32)
    if flags & FLAG_RING:
        rec["ring"] = cloud.ring.astype(np.uint16)
    if flags & FLAG_AZIMUTH:
        rec["azimuth"] = cloud.azimuth.astype(np.float32)
    if flags & FLAG_TIME:
        rec["time"] = cloud.time.astype(np.float32)
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(SWEEP_MAGIC, SWEEP_VERSION, len(cloud), flags))
            fh.write(rec.tobytes())
    except OSError as e:
        raise IoFailure(f"writing {path}: {e}") from e


def read_sweep(path) -> PointCloud:
    """Read a sweep file; native when the magic matches, fallback otherwise.

    Raises BadMagic / UnsupportedVersion / TruncatedFile on malformed
    native files, BadMagic when the fallback heuristic does not apply.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"reading {path}: {e}") from e

    if blob[:4] == SWEEP_MAGIC:
        if len(blob) < _HEADER.size:
            raise TruncatedFile(f"{path}: header cut short")
        _, version, count, flags = _HEADER.unpack_from(blob)
        if version != SWEEP_VERSION:
            raise UnsupportedVersion(f"{path}: version {version}")
        dt = _record_dtype(flags)
        need = _HEADER.size + count * dt.itemsize
        if len(blob) < need:
            raise TruncatedFile(
                f"{path}: {count} records declared, file holds fewer")
        rec = np.frombuffer(blob, dtype=dt, count=count, offset=_HEADER.size)
        xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        ring = rec["ring"].astype(np.int32) if flags & FLAG_RING else None
        az = rec["azimuth"].astype(np.float64) if flags & FLAG_AZIMUTH else None
        tm = rec["time"].astype(np.float64) if flags & FLAG_TIME else None
        cloud = PointCloud(xyz=xyz, ring=ring, azimuth=az, time=tm)
        return _drop_nonfinite(cloud, path)

    if len(blob) % 16 == 0 and len(blob) > 0:
        pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
        cloud = PointCloud(xyz=pts[:, :3].astype(np.float64))
        return _drop_nonfinite(cloud, path)

    raise BadMagic(f"{path}: no native magic and size is not 16-byte aligned")


def _drop_nonfinite(cloud: PointCloud, path) -> PointCloud:
    ok = np.all(np.isfinite(cloud.xyz), axis=1)
    bad = len(cloud) - int(np.count_nonzero(ok))
    if bad:
        log.warning("%s: dropped %d non-finite point(s)", path, bad)
        return cloud.select(ok)
    return cloud


# ---------------------------------------------------------------------------
# ray sidecars


def write_rays(path, directions: np.ndarray, ranges: np.ndarray) -> None:
    """Write (direction, range) records; hit flag derived from finiteness."""
    n = directions.shape[0]
    rec = np.empty(n, dtype=_RAY_RECORD)
    rec["direction"] = directions
    rec["range"] = ranges
    rec["hit"] = np.isfinite(ranges).astype(np.uint8)
    try:
        Path(path).write_bytes(rec.tobytes())
    except OSError as e:
        raise IoFailure(f"writing {path}: {e}") from e


def read_rays(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ray sidecar; returns (directions (M, 3), ranges (M,))."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"reading {path}: {e}") from e
    if len(blob) % _RAY_RECORD.itemsize:
        raise TruncatedFile(
            f"{path}: size {len(blob)} is not a multiple of "
            f"{_RAY_RECORD.itemsize}-byte ray records")
    rec = np.frombuffer(blob, dtype=_RAY_RECORD)
    return rec["direction"].astype(np.float64), rec["range"].astype(np.float64)


# ---------------------------------------------------------------------------
# PLY export


def colorize(values: np.ndarray, vmin: float | None = None,
             vmax: float | None = None) -> np.ndarray:
    """Map scalars onto a blue->red ramp, returning (N, 3) uint8."""
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    vmin = float(finite.min()) if vmin is None and finite.size else (vmin or 0.0)
    vmax = float(finite.max()) if vmax is None and finite.size else (vmax or 1.0)
    if vmax <= vmin:
        vmax = vmin + 1.0
    t = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0)
    t = np.where(np.isfinite(t), t, 1.0)
    rgb = np.stack([255 * t, 64 * np.ones_like(t), 255 * (1 - t)], axis=1)
    return rgb.astype(np.uint8)


def write_ply(path, xyz: np.ndarray, colors: np.ndarray | None = None,
              binary: bool = True) -> None:
    """Write points (optionally colored) as a PLY file."""
    n = xyz.shape[0]
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                if colors is None:
                    fh.write(xyz.astype("<f4").tobytes())
                else:
                    rec = np.empty(n, dtype=[("xyz", "<f4", (3,)),
                                             ("rgb", "u1", (3,))])
                    rec["xyz"] = xyz
                    rec["rgb"] = colors
                    fh.write(rec.tobytes())
            else:
                for i in range(n):
                    row = f"{xyz[i, 0]:.6f} {xyz[i, 1]:.6f} {xyz[i, 2]:.6f}"
                    if colors is not None:
                        row += f" {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
                    fh.write((row + "\n").encode("ascii"))
    except OSError as e:
        raise IoFailure(f"writing {path}: {e}") from e


_COLOR_MODES = ("none", "b_hat", "occupancy", "violation")


def export_cloud_ply(path, xyz: np.ndarray, color_by: str = "none",
                     values: np.ndarray | None = None,
                     violation_indices=None, binary: bool = True) -> None:
    """PLY export with a named coloring mode.

    ``b_hat`` ramps the per-point scale values, ``occupancy`` ramps
    probabilities on a fixed [0, 1] scale, ``violation`` paints the listed
    point indices red over a gray base.
    """
    if color_by not in _COLOR_MODES:
        raise ValueError(f"color_by must be one of {_COLOR_MODES}")
    colors = None
    if color_by in ("b_hat", "occupancy"):
        if values is None:
            raise ValueError(f"color_by={color_by!r} needs per-point values")
        if color_by == "occupancy":
            colors = colorize(values, vmin=0.0, vmax=1.0)
        else:
            colors = colorize(values)
    elif color_by == "violation":
        colors = np.full((xyz.shape[0], 3), 160, dtype=np.uint8)
        if violation_indices is not None and len(violation_indices):
            idx = np.asarray(violation_indices, dtype=np.int64)
            colors[idx] = (220, 30, 30)
    write_ply(path, xyz, colors, binary=binary)


# ---------------------------------------------------------------------------
# scene specs


def save_scene_spec(path, spec) -> None:
    from .simulator import SceneSpec  # local import to keep fileio leaf-like
    assert isinstance(spec, SceneSpec)
    doc = {
        "ground_z": spec.ground_z,
        "max_extent": spec.max_extent,
        "seed": spec.seed,
        "boxes": [{"center": list(b.center), "extents": list(b.extents)}
                  for b in spec.boxes],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as e:
        raise IoFailure(f"writing {path}: {e}") from e


def load_scene_spec(path):
    from .simulator import Box, SceneSpec
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"reading {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise BadMagic(f"{path}: not a scene spec ({e})") from e
    boxes = [Box(center=tuple(b["center"]), extents=tuple(b["extents"]))
             for b in doc.get("boxes", [])]
    return SceneSpec(ground_z=doc["ground_z"], boxes=boxes,
                     seed=doc.get("seed", 0),
                     max_extent=doc.get("max_extent", 60.0))
