"""Hybrid point/BEV denoiser with range, uncertainty, and occupancy heads.

Per-ray features run through a small MLP trunk; halfway through, point
features are max-scattered into a bird's-eye grid, mixed by two 3x3
convolutions, bilinearly gathered back to the rays, and merged residually.
Three linear heads close the network: predicted noise, a strictly positive
uncertainty scale b = exp(log b), and an occupancy logit.  Heads are
zero-initialised so an untrained network predicts eps = 0, b = 1, logit 0.

Everything runs on the autodiff tape in float64; the same forward serves
training and inference.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .fileio import BadMagic, TruncatedFile, UnsupportedVersion

# representable band for the predicted tolerance scale, metres
B_HAT_MIN = 0.05
B_HAT_MAX = 20.0

CHECKPOINT_MAGIC = b"RDNC"
CHECKPOINT_VERSION = 1


class NonFiniteActivation(FloatingPointError):
    """A head produced NaN/Inf activations."""


class CheckpointMismatch(ValueError):
    """Checkpoint was written under a different configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    """Denoiser shape.

    ``bev_channels`` defaults to ``hidden // 2``: the BEV mixer runs at
    reduced width behind linear projections, which keeps the parameter
    count modest without touching the trunk width.
    """

    hidden: int = 64
    layers: int = 4
    bev_res: int = 64
    bev_extent: float = 60.0  # [m] half-width of the BEV square
    bev_channels: int | None = None
    time_embed_dim: int = 16
    neighbor_k: int = 4       # angular neighbours fed as local surface profile

    def __post_init__(self) -> None:
        if self.hidden < 8:
            raise ValueError("hidden must be >= 8")
        if self.layers < 2:
            raise ValueError("layers must be >= 2")
        if self.bev_res < 2 or self.bev_res & (self.bev_res - 1):
            raise ValueError("bev_res must be a power of two")
        if self.bev_extent <= 0:
            raise ValueError("bev_extent must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.neighbor_k < 0:
            raise ValueError("neighbor_k must be >= 0")

    @property
    def bev_width(self) -> int:
        return self.bev_channels if self.bev_channels is not None else self.hidden // 2

    @property
    def feature_dim(self) -> int:
        # r_t, direction (3), sin/cos azimuth, elevation coord, sweep phase,
        # prior range, local density, self-conditioning x0, time embedding,
        # and per-neighbour (angle, range offset) pairs
        return 11 + 2 * self.neighbor_k + self.time_embed_dim


# ---------------------------------------------------------------------------
# feature assembly


@dataclass
class RayBatch:
    """Static per-ray conditioning, shared across denoiser invocations."""

    directions: np.ndarray        # (N, 3) unit
    prior_range_norm: np.ndarray  # (N,) normalized Stage-0 range
    density: np.ndarray           # (N,) local BEV density of the prior
    sin_az: np.ndarray
    cos_az: np.ndarray
    elev_norm: np.ndarray         # elevation mapped to [0, 1] over the FOV
    phase: np.ndarray             # sweep phase in [0, 1)
    neigh_ang: np.ndarray         # (N, K) angles to nearest input returns
    neigh_dr: np.ndarray          # (N, K) their range offsets, normalized

    def __len__(self) -> int:
        return self.directions.shape[0]


def scanline_encoding(directions: np.ndarray,
                      vertical_fov: tuple[float, float]) -> tuple[np.ndarray, ...]:
    """(sin az, cos az, normalized elevation, sweep phase) for any rays.

    Works for rays that fall between physical beams: the ring coordinate is
    the continuous elevation normalized over the FOV (clipped), and the
    time coordinate is the azimuthal sweep phase.
    """
    d = np.asarray(directions, dtype=np.float64)
    az = np.arctan2(d[:, 1], d[:, 0])
    elev = np.arcsin(np.clip(d[:, 2], -1.0, 1.0))
    lo, hi = vertical_fov
    elev_norm = np.clip((elev - lo) / (hi - lo), 0.0, 1.0)
    phase = (az + math.pi) / (2.0 * math.pi)
    return np.sin(az), np.cos(az), elev_norm, phase


def grid_cells(xy: np.ndarray, extent: float, res: int) -> np.ndarray:
    """Flat BEV cell index per xy position; -1 outside the extent square."""
    u = np.floor((xy[:, 0] + extent) * (res / (2.0 * extent))).astype(np.int64)
    v = np.floor((xy[:, 1] + extent) * (res / (2.0 * extent))).astype(np.int64)
    ok = (u >= 0) & (u < res) & (v >= 0) & (v < res)
    return np.where(ok, u * res + v, -1)


def bev_density(query_xy: np.ndarray, prior_xy: np.ndarray, extent: float,
                res: int) -> np.ndarray:
    """log1p count of prior points in each query's BEV cell, lightly scaled."""
    counts = np.zeros(res * res + 1, dtype=np.int64)
    pc = grid_cells(prior_xy, extent, res)
    np.add.at(counts, np.where(pc >= 0, pc, res * res), 1)
    qc = grid_cells(query_xy, extent, res)
    hits = np.where(qc >= 0, counts[np.where(qc >= 0, qc, 0)], 0)
    return np.log1p(hits.astype(np.float64)) / 3.0


# angle units for the neighbour profile: 5 degrees -> 1.0 keeps the
# channel in the same numeric band as the other features
ANG_SCALE = math.radians(5.0)
# padding for absent neighbours: far enough that no real beam lands there
PAD_ANG = math.radians(30.0) / ANG_SCALE


def neighbor_profile(directions: np.ndarray, input_dirs: np.ndarray,
                     input_range_norm: np.ndarray,
                     prior_range_norm: np.ndarray,
                     k: int) -> tuple[np.ndarray, np.ndarray]:
    """Local surface profile: the k angularly nearest input returns per ray.

    Returns (angles, range offsets), both (N, k): the angle to each
    neighbouring return (in 5-degree units) and that return's range minus
    the query's prior range (normalized units).  Queries with fewer than k
    available returns are padded with a far angle and zero offset, which the
    trunk can learn to ignore.
    """
    n = directions.shape[0]
    ang = np.full((n, k), PAD_ANG, dtype=np.float64)
    dr = np.zeros((n, k), dtype=np.float64)
    k_eff = min(k, input_dirs.shape[0])
    if k_eff == 0 or n == 0:
        return ang, dr
    chord, jj = cKDTree(input_dirs).query(directions, k=k_eff)
    chord = chord.reshape(n, k_eff)
    jj = jj.reshape(n, k_eff)
    ang[:, :k_eff] = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)) / ANG_SCALE
    dr[:, :k_eff] = (input_range_norm[jj]
                     - np.asarray(prior_range_norm, dtype=np.float64)[:, None])
    return ang, dr


def build_ray_batch(directions: np.ndarray, prior_range_norm: np.ndarray,
                    density: np.ndarray, vertical_fov: tuple[float, float],
                    neigh_ang: np.ndarray | None = None,
                    neigh_dr: np.ndarray | None = None,
                    neighbor_k: int = 0) -> RayBatch:
    """Assemble static conditioning; absent neighbour profiles are padded."""
    directions = np.asarray(directions, dtype=np.float64)
    n = directions.shape[0]
    if neigh_ang is None:
        neigh_ang = np.full((n, neighbor_k), PAD_ANG, dtype=np.float64)
    if neigh_dr is None:
        neigh_dr = np.zeros((n, neighbor_k), dtype=np.float64)
    sin_az, cos_az, elev_norm, phase = scanline_encoding(directions, vertical_fov)
    return RayBatch(directions=directions,
                    prior_range_norm=np.asarray(prior_range_norm, dtype=np.float64),
                    density=np.asarray(density, dtype=np.float64),
                    sin_az=sin_az, cos_az=cos_az, elev_norm=elev_norm,
                    phase=phase,
                    neigh_ang=np.asarray(neigh_ang, dtype=np.float64),
                    neigh_dr=np.asarray(neigh_dr, dtype=np.float64))


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Standard sinusoidal embedding of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def assemble_features(batch: RayBatch, r_t: np.ndarray, t: int,
                      x0_sc: np.ndarray, embed_dim: int) -> np.ndarray:
    """Stack the full (N, F) feature matrix for one denoiser invocation."""
    n = len(batch)
    emb = np.broadcast_to(timestep_embedding(t, embed_dim), (n, embed_dim))
    return np.column_stack([
        np.asarray(r_t, dtype=np.float64),
        batch.directions,
        batch.sin_az, batch.cos_az, batch.elev_norm, batch.phase,
        batch.prior_range_norm, batch.density,
        np.asarray(x0_sc, dtype=np.float64),
        batch.neigh_ang, batch.neigh_dr,
        emb,
    ])


# ---------------------------------------------------------------------------
# the model


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Denoiser:
    """The denoiser network: parameters, forward pass, checkpointing."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        h = config.hidden
        cb = config.bev_width
        f = config.feature_dim
        p: list[tuple[str, Tensor]] = []

        def lin(name, nin, nout, zero=False):
            w = np.zeros((nin, nout)) if zero else _he_uniform(rng, (nin, nout), nin)
            p.append((f"{name}.w", Tensor(w)))
            p.append((f"{name}.b", Tensor(np.zeros(nout))))

        lin("in_proj", f, h)
        for i in range(config.layers):
            lin(f"block{i}", h, h)
        lin("bev_in", h, cb)
        for name in ("conv1", "conv2"):
            w = _he_uniform(rng, (3, 3, cb, cb), 9 * cb)
            p.append((f"{name}.w", Tensor(w)))
            p.append((f"{name}.b", Tensor(np.zeros(cb))))
        lin("bev_out", cb, h)
        lin("head_eps", h, 1, zero=True)
        lin("head_logb", h, 1, zero=True)
        lin("head_occ", h, 1, zero=True)

        self._params = p
        self._index = {name: t for name, t in p}
        # the BEV block runs after this many point blocks, so at least one
        # block always post-processes the gathered context (layers >= 2)
        self._scg_after = (config.layers + 1) // 2

    # -- parameter plumbing ------------------------------------------

    @property
    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def param(self, name: str) -> Tensor:
        return self._index[name]

    def n_parameters(self) -> int:
        return sum(t.data.size for _, t in self._params)

    def zero_grad(self) -> None:
        for _, t in self._params:
            t.zero_grad()

    def param_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for _, t in self._params])

    def set_param_vector(self, vec: np.ndarray) -> None:
        off = 0
        for _, t in self._params:
            n = t.data.size
            t.data = vec[off:off + n].reshape(t.data.shape).astype(np.float64)
            off += n
        if off != vec.size:
            raise ValueError("parameter vector size mismatch")

    # -- forward -------------------------------------------------------

    def forward(self, features: np.ndarray, positions_xy: np.ndarray
                ) -> tuple[Tensor, Tensor, Tensor]:
        """One denoiser invocation.

        Parameters
        ----------
        features : (N, F) float64
            Output of :func:`assemble_features`.
        positions_xy : (N, 2) float64
            Current metric xy of each candidate (constant w.r.t. the tape;
            gradients route through pooling argmaxes and gather weights).

        Returns
        -------
        (eps_hat, b_hat, occ_logits) : Tensors of shape (N,)

        Raises
        ------
        NonFiniteActivation
            If any head output is NaN or infinite.
        """
        cfg = self.config
        if features.shape[1] != cfg.feature_dim:
            raise ValueError(
                f"expected {cfg.feature_dim} features, got {features.shape[1]}")
        P = self.param

        x = Tensor(features)
        hcur = ad.silu(ad.add(ad.matmul(x, P("in_proj.w")), P("in_proj.b")))
        for i in range(cfg.layers):
            hcur = ad.silu(ad.add(ad.matmul(hcur, P(f"block{i}.w")),
                                  P(f"block{i}.b")))
            if i + 1 == self._scg_after:
                hcur = self._bev_mix(hcur, positions_xy)

        n = features.shape[0]

        def head(name):
            out = ad.add(ad.matmul(hcur, P(f"{name}.w")), P(f"{name}.b"))
            return ad.reshape(out, (n,))

        eps_hat = head("head_eps")
        log_b = head("head_logb")
        # bound the tolerance scale to [5 cm, 20 m]: the log-b regularizer
        # in the free-space objective is unbounded below for perfectly
        # aligned candidates, and an unbounded head collapses b to 0
        lo, hi = math.log(B_HAT_MIN), math.log(B_HAT_MAX)
        log_b = ad.add(ad.relu(ad.add(log_b, -lo)),
                       ad.mul(ad.relu(ad.add(log_b, -hi)), -1.0))
        b_hat = ad.exp(ad.add(log_b, lo))
        occ = head("head_occ")
        for t in (eps_hat, b_hat, occ):
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteActivation("non-finite head activation")
        return eps_hat, b_hat, occ

    def _bev_mix(self, hcur: Tensor, positions_xy: np.ndarray) -> Tensor:
        cfg = self.config
        P = self.param
        res = cfg.bev_res
        ext = cfg.bev_extent
        pf = ad.add(ad.matmul(hcur, P("bev_in.w")), P("bev_in.b"))
        cells = grid_cells(positions_xy, ext, res)
        grid = ad.scatter_max(pf, cells, (res, res))
        grid = ad.silu(ad.conv2d_3x3(grid, P("conv1.w"), P("conv1.b")))
        grid = ad.silu(ad.conv2d_3x3(grid, P("conv2.w"), P("conv2.b")))
        gathered = ad.gather_bilinear(grid, positions_xy, ext,
                                      2.0 * ext / res)
        back = ad.silu(ad.add(ad.matmul(gathered, P("bev_out.w")),
                              P("bev_out.b")))
        return ad.add(hcur, back)

    # -- checkpointing ---------------------------------------------------

    def save(self, path, config_hash: str) -> None:
        """Write parameters as little-endian float32 in declaration order."""
        hash12 = config_hash[:12].encode("ascii")
        if len(hash12) != 12:
            raise ValueError("config_hash must provide at least 12 hex chars")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            fh.write(hash12)
            fh.write(struct.pack("<I", len(self._params)))
            for _, t in self._params:
                fh.write(t.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, config: NetworkConfig, config_hash: str,
             seed: int = 0) -> "Denoiser":
        """Rebuild a model from a checkpoint written under ``config``.

        Raises BadMagic / UnsupportedVersion / CheckpointMismatch /
        TruncatedFile as appropriate.
        """
        model = cls(config, seed=seed)
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise BadMagic(f"not a checkpoint: magic {blob[:4]!r}")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersion(f"checkpoint version {version}")
        stored = blob[6:18].decode("ascii", errors="replace")
        if stored != config_hash[:12]:
            raise CheckpointMismatch(
                f"checkpoint built under config {stored}, loading {config_hash[:12]}")
        (ntens,) = struct.unpack_from("<I", blob, 18)
        if ntens != len(model._params):
            raise CheckpointMismatch(
                f"checkpoint has {ntens} tensors, config implies {len(model._params)}")
        off = 22
        for _, t in model._params:
            nbytes = t.data.size * 4
            chunk = blob[off:off + nbytes]
            if len(chunk) != nbytes:
                raise TruncatedFile(f"checkpoint ends inside a tensor at {off}")
            t.data = np.frombuffer(chunk, dtype="<f4").astype(np.float64)\
                .reshape(t.data.shape)
            off += nbytes
        if off != len(blob):
            raise TruncatedFile(f"{len(blob) - off} trailing byte(s) in checkpoint")
        return model
