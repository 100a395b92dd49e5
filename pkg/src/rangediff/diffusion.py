"""Range-channel diffusion: cosine schedule, partial noising, DDIM reverse.

The diffusion state is the vector of *normalized ranges* of the candidate
rays -- directions never change.  Densification is partial: clean ranges
are noised only up to an intermediate timestep T' = round(alpha_frac * T)
and denoised back from there, so the structural prior anchors the result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule as cumulative signal fractions.

    ``alpha_bar[t]`` is the squared signal coefficient after ``t`` steps;
    ``alpha_bar[0] == 1`` and the array is strictly decreasing.
    """

    timesteps: int
    alpha_bar: np.ndarray  # (T + 1,) float64

    def __post_init__(self) -> None:
        if self.alpha_bar.shape != (self.timesteps + 1,):
            raise ValueError("alpha_bar must have length timesteps + 1")


def build_cosine_schedule(timesteps: int = 1000, s: float = 0.008,
                          max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine schedule with the usual small-offset parameterisation.

    f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2); alpha_bar is f(t)/f(0) with
    the per-step beta clipped at ``max_beta`` and alpha_bar rebuilt from the
    clipped steps, so monotonicity survives the clip.

    Requires timesteps >= 10.
    """
    if timesteps < 10:
        raise ValueError(f"timesteps must be >= 10, got {timesteps}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    f = np.cos(((t / timesteps + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    raw = f / f[0]
    beta = 1.0 - raw[1:] / raw[:-1]
    beta = np.clip(beta, 0.0, max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(timesteps=timesteps, alpha_bar=alpha_bar)


@dataclass
class SDEditConfig:
    """Partial-diffusion knobs.

    ``alpha_frac`` sets the noising depth as a fraction of the schedule;
    ``ddim_steps`` the number of reverse updates; ``eta`` the stochasticity
    of the reverse sampler (0 = deterministic).
    """

    alpha_frac: float = 0.25
    ddim_steps: int = 50
    eta: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha_frac <= 1.0:
            raise ValueError("alpha_frac must be in (0, 1]")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")

    def t_prime(self, timesteps: int) -> int:
        return max(1, min(timesteps, int(round(self.alpha_frac * timesteps))))


@dataclass
class RangeState:
    """Normalized ranges at a diffusion timestep (0 = clean)."""

    ranges: np.ndarray  # (N,) float64, normalized
    timestep: int

    def __post_init__(self) -> None:
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.ranges.ndim != 1:
            raise ValueError("ranges must be a flat vector")
        if self.timestep < 0:
            raise ValueError("timestep must be non-negative")


def forward_diffuse(state: RangeState, t_prime: int, schedule: NoiseSchedule,
                    seed: int | None = None,
                    noise: np.ndarray | None = None) -> RangeState:
    """Jump a clean state to timestep ``t_prime`` in closed form.

    r_t = sqrt(alpha_bar_t) * r_0 + sqrt(1 - alpha_bar_t) * eps with
    eps ~ N(0, I) (or the supplied ``noise``, for tests).
    """
    if state.timestep != 0:
        raise ValueError("forward_diffuse expects a clean (t=0) state")
    if not 1 <= t_prime <= schedule.timesteps:
        raise ValueError(f"t_prime must be in [1, {schedule.timesteps}]")
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal(state.ranges.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != state.ranges.shape:
            raise ValueError("noise shape mismatch")
    ab = schedule.alpha_bar[t_prime]
    noised = math.sqrt(ab) * state.ranges + math.sqrt(1.0 - ab) * noise
    return RangeState(ranges=noised, timestep=t_prime)


# denoiser callback: (r_t, t, x0_prev) -> (eps_hat, b_hat, occ_logits)
Denoiser = Callable[[np.ndarray, int, np.ndarray],
                    tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class ReverseResult:
    """Output of the reverse pass: clean state plus the heads' last outputs."""

    state: RangeState
    b_hat: np.ndarray        # (N,) predicted uncertainty scale, at t ~ 0
    occ_logits: np.ndarray   # (N,) occupancy logits, at t ~ 0
    timesteps_visited: list[int] = field(default_factory=list)


def ddim_timesteps(t_start: int, steps: int) -> list[int]:
    """Monotone grid from ``t_start`` down to 0 with ``steps`` intervals."""
    return [int(round(t_start * (1.0 - i / steps))) for i in range(steps + 1)]


def ddim_reverse(state: RangeState, denoiser: Denoiser, cfg: SDEditConfig,
                 schedule: NoiseSchedule,
                 seed: int | None = None) -> ReverseResult:
    """Deterministic (eta=0) or stochastic DDIM from ``state`` down to t=0.

    Invokes ``denoiser`` exactly ``cfg.ddim_steps`` times.  Each update
    reconstructs x0 from the predicted noise and re-noises to the next grid
    point:

        x0    = (r_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
        r_t'  = sqrt(ab_t') * x0 + sqrt(1 - ab_t' - sigma^2) * eps + sigma * z

    with sigma = 0 when eta = 0.  The previous step's x0 is fed back to the
    denoiser (self-conditioning);  zeros on the first call.  Exceptions from
    the callback propagate unchanged.
    """
    t_start = state.timestep
    if t_start < 1:
        raise ValueError("reverse pass needs a noised state (timestep >= 1)")
    if cfg.ddim_steps > t_start:
        raise ValueError(
            f"ddim_steps={cfg.ddim_steps} exceeds start timestep {t_start}")
    grid = ddim_timesteps(t_start, cfg.ddim_steps)
    rng = np.random.default_rng(seed) if cfg.eta > 0 else None

    r = state.ranges.copy()
    x0_prev = np.zeros_like(r)
    b_hat = np.ones_like(r)
    occ = np.zeros_like(r)
    visited = []
    for t_hi, t_lo in zip(grid[:-1], grid[1:]):
        visited.append(t_hi)
        eps, b_hat, occ = denoiser(r, t_hi, x0_prev)
        ab_hi = schedule.alpha_bar[t_hi]
        ab_lo = schedule.alpha_bar[t_lo]
        x0 = (r - math.sqrt(1.0 - ab_hi) * eps) / math.sqrt(ab_hi)
        if cfg.eta > 0.0 and t_lo > 0:
            sigma = (cfg.eta
                     * math.sqrt((1.0 - ab_lo) / (1.0 - ab_hi))
                     * math.sqrt(1.0 - ab_hi / ab_lo))
            coef = math.sqrt(max(1.0 - ab_lo - sigma ** 2, 0.0))
            r = (math.sqrt(ab_lo) * x0 + coef * eps
                 + sigma * rng.standard_normal(r.shape))
        else:
            r = math.sqrt(ab_lo) * x0 + math.sqrt(1.0 - ab_lo) * eps
        x0_prev = x0
    return ReverseResult(state=RangeState(ranges=r, timestep=0),
                         b_hat=np.asarray(b_hat, dtype=np.float64),
                         occ_logits=np.asarray(occ, dtype=np.float64),
                         timesteps_visited=visited)


@dataclass(frozen=True)
class RangeNormalizer:
    """Affine map between metric ranges and the diffusion's unit scale."""

    mu: float
    sigma: float

    @classmethod
    def from_ranges(cls, ranges: np.ndarray,
                    min_sigma: float = 1e-3) -> "RangeNormalizer":
        r = np.asarray(ranges, dtype=np.float64)
        r = r[np.isfinite(r)]
        if r.size == 0:
            raise ValueError("no finite ranges to normalize against")
        return cls(mu=float(r.mean()), sigma=float(max(r.std(), min_sigma)))

    def normalize(self, ranges_m: np.ndarray) -> np.ndarray:
        return (np.asarray(ranges_m, dtype=np.float64) - self.mu) / self.sigma

    def denormalize(self, ranges_n: np.ndarray) -> np.ndarray:
        return np.asarray(ranges_n, dtype=np.float64) * self.sigma + self.mu

    def denormalize_clamped(self, ranges_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Denormalize and clamp negatives to zero.

        Returns (metric ranges, validity): entries that had to be clamped
        are flagged invalid -- a negative range is not a physical return.
        """
        r = self.denormalize(ranges_n)
        valid = r > 0.0
        return np.where(valid, r, 0.0), valid
