"""Schedule algebra, forward-marginal statistics, and DDIM inversion."""
import math

import numpy as np
import pytest

from rangediff.diffusion import (NoiseSchedule, RangeNormalizer, RangeState,
                                 SDEditConfig, build_cosine_schedule,
                                 ddim_reverse, ddim_timesteps,
                                 forward_diffuse)


def cosine_alpha_bar_oracle(T, s=0.008):
    """Direct closed-form evaluation, no clipping path shared with the impl."""
    def f(t):
        return math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    return np.array([f(t) / f(0) for t in range(T + 1)])


def test_schedule_endpoints_and_monotonicity():
    sch = build_cosine_schedule(1000)
    ab = sch.alpha_bar
    assert ab.shape == (1001,)
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0), "alpha_bar must be strictly decreasing"
    assert ab[-1] < 0.01


def test_schedule_matches_closed_form_where_unclipped():
    sch = build_cosine_schedule(1000)
    want = cosine_alpha_bar_oracle(1000)
    # the beta clip only bites in the extreme tail; elsewhere the rebuilt
    # cumulative product must equal the closed form
    np.testing.assert_allclose(sch.alpha_bar[:950], want[:950], rtol=1e-10)


def test_schedule_beta_clip_ceiling():
    sch = build_cosine_schedule(1000)
    ab = sch.alpha_bar
    beta = 1.0 - ab[1:] / ab[:-1]
    assert beta.max() <= 0.999 + 1e-12


def test_schedule_rejects_tiny_T():
    with pytest.raises(ValueError):
        build_cosine_schedule(9)


def test_alpha_bar_length_validated():
    with pytest.raises(ValueError):
        NoiseSchedule(timesteps=10, alpha_bar=np.ones(10))


def test_t_prime_rounding_and_clamping():
    assert SDEditConfig(alpha_frac=0.25).t_prime(1000) == 250
    assert SDEditConfig(alpha_frac=1.0).t_prime(1000) == 1000
    assert SDEditConfig(alpha_frac=1e-6).t_prime(1000) == 1
    assert SDEditConfig(alpha_frac=0.5).t_prime(11) == 6


def test_sdedit_config_validation():
    with pytest.raises(ValueError):
        SDEditConfig(alpha_frac=0.0)
    with pytest.raises(ValueError):
        SDEditConfig(ddim_steps=0)
    with pytest.raises(ValueError):
        SDEditConfig(eta=-0.5)


# ---------------------------------------------------------------------------
# forward process


def test_forward_zero_noise_closed_form():
    sch = build_cosine_schedule(1000)
    r0 = RangeState(ranges=np.array([1.0, -2.0, 0.5]), timestep=0)
    out = forward_diffuse(r0, 250, sch, noise=np.zeros(3))
    np.testing.assert_allclose(out.ranges,
                               math.sqrt(sch.alpha_bar[250]) * r0.ranges)
    assert out.timestep == 250


def test_forward_identity_limit():
    sch = build_cosine_schedule(1000)
    r0 = RangeState(ranges=np.full(100, 2.0), timestep=0)
    out = forward_diffuse(r0, 1, sch, seed=0)
    noise_std = math.sqrt(1.0 - sch.alpha_bar[1])
    assert np.max(np.abs(out.ranges - r0.ranges)) < 6 * noise_std + 1e-9


def test_forward_marginal_variance_within_2pct():
    sch = build_cosine_schedule(1000)
    n = 100_000
    r0 = RangeState(ranges=np.full(n, 3.0), timestep=0)
    out = forward_diffuse(r0, 250, sch, seed=42)
    resid = out.ranges - math.sqrt(sch.alpha_bar[250]) * r0.ranges
    want_var = 1.0 - sch.alpha_bar[250]
    assert np.var(resid) == pytest.approx(want_var, rel=0.02)
    assert abs(resid.mean()) < 4 * math.sqrt(want_var / n)


def test_forward_requires_clean_state_and_valid_t():
    sch = build_cosine_schedule(100)
    noised = RangeState(ranges=np.zeros(2), timestep=5)
    with pytest.raises(ValueError):
        forward_diffuse(noised, 10, sch)
    clean = RangeState(ranges=np.zeros(2), timestep=0)
    with pytest.raises(ValueError):
        forward_diffuse(clean, 0, sch)
    with pytest.raises(ValueError):
        forward_diffuse(clean, 101, sch)


# ---------------------------------------------------------------------------
# DDIM reverse


def test_ddim_grid_shape():
    assert ddim_timesteps(250, 50)[0] == 250
    assert ddim_timesteps(250, 50)[-1] == 0
    assert len(ddim_timesteps(250, 50)) == 51
    assert ddim_timesteps(10, 10) == list(range(10, -1, -1))


def test_ddim_with_oracle_noise_inverts_forward():
    sch = build_cosine_schedule(1000)
    rng = np.random.default_rng(7)
    r0 = rng.normal(size=64)
    eps = rng.normal(size=64)
    noised = forward_diffuse(RangeState(r0, 0), 250, sch, noise=eps)

    def oracle(r_t, t, x0_prev):
        return eps, np.ones_like(r_t), np.zeros_like(r_t)

    out = ddim_reverse(noised, oracle, SDEditConfig(ddim_steps=50), sch)
    assert np.max(np.abs(out.state.ranges - r0)) < 1e-4
    assert out.state.timestep == 0


def test_ddim_zero_denoiser_closed_form():
    sch = build_cosine_schedule(1000)
    state = RangeState(ranges=np.array([0.3, -1.2]), timestep=20)

    def zero(r_t, t, x0_prev):
        return np.zeros_like(r_t), np.ones_like(r_t), np.zeros_like(r_t)

    out = ddim_reverse(state, zero, SDEditConfig(ddim_steps=20), sch)
    want = state.ranges / math.sqrt(sch.alpha_bar[20])
    np.testing.assert_allclose(out.state.ranges, want, rtol=1e-12)


def test_ddim_exact_invocation_count():
    sch = build_cosine_schedule(1000)
    state = RangeState(ranges=np.zeros(8), timestep=250)
    calls = []

    def counting(r_t, t, x0_prev):
        calls.append(t)
        return np.zeros_like(r_t), np.ones_like(r_t), np.zeros_like(r_t)

    ddim_reverse(state, counting, SDEditConfig(ddim_steps=50), sch)
    assert len(calls) == 50
    assert calls[0] == 250 and calls[-1] > 0
    assert calls == sorted(calls, reverse=True)


def test_ddim_self_conditioning_feedback():
    sch = build_cosine_schedule(1000)
    state = RangeState(ranges=np.full(4, 0.7), timestep=100)
    seen = []

    def spy(r_t, t, x0_prev):
        seen.append(x0_prev.copy())
        return np.zeros_like(r_t), np.ones_like(r_t), np.zeros_like(r_t)

    ddim_reverse(state, spy, SDEditConfig(ddim_steps=3), sch)
    assert np.all(seen[0] == 0.0)                 # first call: zero-filled
    x0_first = state.ranges / math.sqrt(sch.alpha_bar[100])
    np.testing.assert_allclose(seen[1], x0_first, rtol=1e-12)


def test_ddim_rejects_too_many_steps():
    sch = build_cosine_schedule(1000)
    state = RangeState(ranges=np.zeros(2), timestep=25)
    with pytest.raises(ValueError):
        ddim_reverse(state, lambda *a: None, SDEditConfig(ddim_steps=50), sch)


def test_ddim_callback_exceptions_propagate():
    sch = build_cosine_schedule(1000)
    state = RangeState(ranges=np.zeros(2), timestep=25)

    def broken(r_t, t, x0_prev):
        raise RuntimeError("head exploded")

    with pytest.raises(RuntimeError, match="head exploded"):
        ddim_reverse(state, broken, SDEditConfig(ddim_steps=5), sch)


def test_ddim_eta_positive_is_seeded_and_reproducible():
    sch = build_cosine_schedule(1000)
    rng = np.random.default_rng(0)
    state = RangeState(ranges=rng.normal(size=16), timestep=200)

    def zero(r_t, t, x0_prev):
        return np.zeros_like(r_t), np.ones_like(r_t), np.zeros_like(r_t)

    cfg = SDEditConfig(ddim_steps=10, eta=0.5)
    a = ddim_reverse(state, zero, cfg, sch, seed=3)
    b = ddim_reverse(state, zero, cfg, sch, seed=3)
    c = ddim_reverse(state, zero, cfg, sch, seed=4)
    np.testing.assert_array_equal(a.state.ranges, b.state.ranges)
    assert not np.array_equal(a.state.ranges, c.state.ranges)


# ---------------------------------------------------------------------------
# normalizer


def test_normalizer_round_trip_and_floor():
    r = np.array([2.0, 4.0, 6.0, np.inf])
    norm = RangeNormalizer.from_ranges(r)
    assert norm.mu == pytest.approx(4.0)
    finite = r[:3]
    np.testing.assert_allclose(norm.denormalize(norm.normalize(finite)), finite)
    flat = RangeNormalizer.from_ranges(np.full(5, 3.0))
    assert flat.sigma == 1e-3                    # degenerate spread floored


def test_normalizer_clamps_negatives():
    norm = RangeNormalizer(mu=5.0, sigma=2.0)
    ranges, valid = norm.denormalize_clamped(np.array([0.0, -4.0]))
    np.testing.assert_array_equal(ranges, [5.0, 0.0])
    np.testing.assert_array_equal(valid, [True, False])


def test_normalizer_needs_finite_input():
    with pytest.raises(ValueError):
        RangeNormalizer.from_ranges(np.array([np.inf, np.nan]))
