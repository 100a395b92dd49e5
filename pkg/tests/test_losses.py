"""Training objectives vs. brute-force oracles and hand-worked values."""
import math

import numpy as np
import pytest

from rangediff.autodiff import Tensor
from rangediff.losses import (LossWeights, composite_loss, free_space_term,
                              loss_diff, loss_free, loss_free_ranges,
                              loss_occ)

RNG = np.random.default_rng(20240817)


# ---------------------------------------------------------------------------
# brute-force oracles: plain python loops, no vectorization shared with src


def oracle_diff(eps_true, eps_hat, mask=None):
    terms = [(e - t) ** 2 for t, e in zip(eps_true, eps_hat)]
    if mask is None:
        return sum(terms) / len(terms)
    kept = [v for v, m in zip(terms, mask) if m]
    return sum(kept) / max(len(kept), 1)


def oracle_occ(logits, labels):
    total = 0.0
    for o, y in zip(logits, labels):
        total += math.log(1.0 + math.exp(o)) - o * y
    return total / len(logits)


def oracle_free(points, b_hat, neighbors, lam):
    total = 0.0
    for p, b, nbs in zip(points, b_hat, neighbors):
        if not nbs:
            continue
        acc = 0.0
        for d, r_in in nbs:
            proj = sum(pi * di for pi, di in zip(p, d))
            d_perp_sq = max(sum(pi * pi for pi in p) - proj ** 2, 0.0)
            d_par = max(r_in - proj, 0.0)
            w = math.exp(-d_perp_sq / (2.0 * b * b))
            acc += w * (d_par / b + lam * math.log(b))
        total += acc / len(nbs)
    return total / len(points)


def random_free_case(n=4, seed=0):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-5, 5, size=(n, 3))
    b = rng.uniform(0.3, 2.0, size=n)
    neighbors = []
    for _ in range(n):
        nbs = []
        for _ in range(rng.integers(1, 4)):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            nbs.append((d, float(rng.uniform(1.0, 12.0))))
        neighbors.append(nbs)
    return points, b, neighbors


# ---------------------------------------------------------------------------
# loss_diff


def test_diff_matches_oracle():
    for seed in range(4):
        rng = np.random.default_rng(seed)
        t, e = rng.normal(size=5), rng.normal(size=5)
        got = float(loss_diff(t, Tensor(e)).data)
        assert got == pytest.approx(oracle_diff(t, e), rel=1e-12)


def test_diff_perfect_prediction_is_zero():
    eps = RNG.normal(size=8)
    assert float(loss_diff(eps, Tensor(eps.copy())).data) == 0.0


def test_diff_constant_offset():
    # eps = 0 everywhere, eps_hat = c  ->  mse = c^2
    c = 0.7
    got = float(loss_diff(np.zeros(6), Tensor(np.full(6, c))).data)
    assert got == pytest.approx(c * c, rel=1e-12)


def test_diff_mask_excludes_negatives():
    t = np.array([0.0, 0.0, 0.0, 0.0])
    e = Tensor(np.array([1.0, 2.0, 100.0, -100.0]))
    mask = np.array([1.0, 1.0, 0.0, 0.0])
    got = float(loss_diff(t, e, mask).data)
    assert got == pytest.approx((1.0 + 4.0) / 2.0, rel=1e-12)


def test_diff_all_masked_is_zero():
    got = loss_diff(np.ones(3), Tensor(np.zeros(3)), np.zeros(3))
    assert float(got.data) == 0.0


def test_diff_masked_gradient_zero_on_excluded():
    e = Tensor(np.array([3.0, -1.0, 5.0]))
    loss_diff(np.zeros(3), e, np.array([1.0, 0.0, 1.0])).backward()
    assert e.grad[1] == 0.0
    assert e.grad[0] == pytest.approx(2.0 * 3.0 / 2.0)


# ---------------------------------------------------------------------------
# loss_occ


def test_occ_matches_oracle():
    for seed in range(4):
        rng = np.random.default_rng(seed + 10)
        o = rng.normal(scale=3.0, size=6)
        y = (rng.uniform(size=6) < 0.5).astype(float)
        got = float(loss_occ(Tensor(o), y).data)
        assert got == pytest.approx(oracle_occ(o, y), rel=1e-12)


def test_occ_zero_logits_give_ln2():
    got = float(loss_occ(Tensor(np.zeros(7)), np.ones(7)).data)
    assert got == pytest.approx(math.log(2.0), rel=1e-12)


def test_occ_saturated_correct_logits_vanish():
    o = Tensor(np.array([20.0, -20.0]))
    got = float(loss_occ(o, np.array([1.0, 0.0])).data)
    assert got < 1e-8


def test_occ_stable_at_extreme_logits():
    o = Tensor(np.array([800.0, -800.0]))
    got = loss_occ(o, np.array([0.0, 1.0]))
    assert np.isfinite(got.data)
    assert float(got.data) == pytest.approx(800.0, rel=1e-9)


# ---------------------------------------------------------------------------
# free-space term


def test_free_matches_oracle():
    lam = 1.0
    for seed in range(5):
        points, b, neighbors = random_free_case(seed=seed)
        got = float(loss_free(points, Tensor(b), neighbors,
                              LossWeights(lambda_logb=lam)).data)
        assert got == pytest.approx(oracle_free(points, b, neighbors, lam),
                                    rel=1e-12)


def test_free_plug_in_value():
    # on-ray point (d_perp = 0) occluding by 2 with b = 1, lam = 1:
    # weight 1 * (2/1 + 1*log 1) = 2.0
    d = np.array([1.0, 0.0, 0.0])
    points = np.array([[3.0, 0.0, 0.0]])
    got = float(loss_free(points, Tensor(np.ones(1)), [[(d, 5.0)]],
                          LossWeights()).data)
    assert got == pytest.approx(2.0, rel=1e-12)


def test_free_point_beyond_return_pays_only_logb():
    d = np.array([0.0, 1.0, 0.0])
    points = np.array([[0.0, 7.0, 0.0]])  # behind the return at 5
    b = 2.0
    got = float(loss_free(points, Tensor(np.array([b])), [[(d, 5.0)]],
                          LossWeights()).data)
    assert got == pytest.approx(math.log(b), rel=1e-12)


def test_free_far_lateral_points_vanish():
    d = np.array([1.0, 0.0, 0.0])
    points = np.array([[1.0, 50.0, 0.0]])  # 50 m off-axis, b = 0.5
    got = float(loss_free(points, Tensor(np.array([0.5])), [[(d, 9.0)]],
                          LossWeights()).data)
    assert got < 1e-300


def test_free_infinite_neighbor_range_rejected():
    d = np.array([1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        loss_free(np.ones((1, 3)), Tensor(np.ones(1)), [[(d, np.inf)]],
                  LossWeights())


def test_free_neighbor_count_mismatch_rejected():
    with pytest.raises(ValueError):
        loss_free(np.ones((2, 3)), Tensor(np.ones(2)),
                  [[(np.array([1.0, 0, 0]), 4.0)]], LossWeights())


def test_free_term_elementwise_values():
    got = free_space_term(np.array([0.5]), np.array([1.5]),
                          Tensor(np.array([0.8])), 1.0)
    b = 0.8
    want = math.exp(-0.5 / (2 * b * b)) * (1.5 / b + math.log(b))
    assert got.data[0] == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# range-parameterized variant: agreement and gradients


def ranges_view(points, neighbors):
    """Re-express a points case as (r, dir, cos, range, mask) arrays."""
    n = len(points)
    k = max(len(nb) for nb in neighbors)
    r = np.linalg.norm(points, axis=1)
    dirs = points / r[:, None]
    cos = np.zeros((n, k))
    rin = np.zeros((n, k))
    mask = np.zeros((n, k))
    for i, nbs in enumerate(neighbors):
        for j, (d, rr) in enumerate(nbs):
            cos[i, j] = float(dirs[i] @ d)
            rin[i, j] = rr
            mask[i, j] = 1.0
    return r, dirs, cos, rin, mask


def test_free_ranges_agrees_with_point_form():
    points, b, neighbors = random_free_case(n=5, seed=42)
    r, _, cos, rin, mask = ranges_view(points, neighbors)
    a = float(loss_free(points, Tensor(b), neighbors, LossWeights()).data)
    via_r = float(loss_free_ranges(Tensor(r), None, cos, rin, mask,
                                   Tensor(b), 1.0).data)
    assert via_r == pytest.approx(a, rel=1e-12)


@pytest.mark.parametrize("which", ["range", "b"])
def test_free_ranges_finite_difference(which):
    points, b, neighbors = random_free_case(n=4, seed=7)
    r, _, cos, rin, mask = ranges_view(points, neighbors)

    def value(rv, bv):
        return float(loss_free_ranges(Tensor(rv), None, cos, rin, mask,
                                       Tensor(bv), 1.0).data)

    rt, bt = Tensor(r.copy()), Tensor(b.copy())
    loss_free_ranges(rt, None, cos, rin, mask, bt, 1.0).backward()
    grad = rt.grad if which == "range" else bt.grad

    h = 1e-6
    for i in range(4):
        rp, rm = r.copy(), r.copy()
        bp, bm = b.copy(), b.copy()
        if which == "range":
            rp[i] += h
            rm[i] -= h
        else:
            bp[i] += h
            bm[i] -= h
        fd = (value(rp, bp) - value(rm, bm)) / (2 * h)
        rel = abs(grad[i] - fd) / max(abs(fd), 1.0)
        assert rel < 1e-3, f"{which}[{i}]: {grad[i]} vs fd {fd}"


def test_free_weight_decreases_with_lateral_distance():
    # move a fixed-range point laterally off a single ray: loss must not rise
    rin = np.array([[10.0]])
    mask = np.ones((1, 1))
    vals = []
    for cos_t in (1.0, 0.99, 0.9, 0.6, 0.2):
        got = loss_free_ranges(Tensor(np.array([6.0])), None,
                               np.array([[cos_t]]), rin, mask,
                               Tensor(np.array([1.0])), 0.0)
        vals.append(float(got.data))
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[0] > vals[-1]


def test_free_ranges_empty_mask_is_zero():
    got = loss_free_ranges(Tensor(np.array([4.0])), None,
                           np.zeros((1, 1)), np.zeros((1, 1)),
                           np.zeros((1, 1)), Tensor(np.ones(1)), 1.0)
    assert float(got.data) == 0.0


def test_free_ranges_negative_range_occludes():
    # a point behind the sensor still registers as a deep occluder
    got = loss_free_ranges(Tensor(np.array([-2.0])), None,
                           np.array([[1.0]]), np.array([[5.0]]),
                           np.ones((1, 1)), Tensor(np.ones(1)), 0.0)
    assert float(got.data) == pytest.approx(7.0, rel=1e-12)


# ---------------------------------------------------------------------------
# composite


def test_composite_plug_in():
    total, parts = composite_loss(0.2, 0.1, 0.4,
                                  LossWeights(lambda_occ=1.0, lambda_free=0.5))
    assert float(total.data) == pytest.approx(0.5, rel=1e-12)
    assert parts == {"loss_diff": 0.2, "loss_occ": 0.1, "loss_free": 0.4,
                     "loss_total": pytest.approx(0.5)}


def test_composite_zero_weights_reduce_to_diff():
    w = LossWeights(lambda_occ=0.0, lambda_free=0.0)
    total, _ = composite_loss(0.37, 9.0, 9.0, w)
    assert float(total.data) == pytest.approx(0.37, rel=1e-12)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_occ=-0.1)
    with pytest.raises(ValueError):
        LossWeights(neg_ray_fraction=-1.0)
