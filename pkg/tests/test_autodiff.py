"""Tape correctness: finite differences for every op, plus the routing
semantics of the structured ops (argmax scatter, bilinear gather, conv)."""
import numpy as np
import pytest
from scipy import signal

import rangediff.autodiff as ad
from rangediff.autodiff import Tensor


def numeric_grad(f, arrays, which, h=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[which]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which])
    flat = base[which].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(*base)
        flat[i] = keep - h
        lo = f(*base)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def check_fd(make_loss, *arrays, tol=1e-6, h=1e-5):
    """Compare tape gradients with central differences for every input."""
    tensors = [Tensor(a) for a in arrays]
    loss = make_loss(*tensors)
    assert loss.data.shape == (), "loss must be scalar"
    loss.backward()

    def scalar(*arrs):
        return float(make_loss(*[Tensor(a) for a in arrs]).data)

    for k, t in enumerate(tensors):
        fd = numeric_grad(scalar, list(arrays), k, h=h)
        err = np.abs(t.grad - fd) / np.maximum(np.abs(fd), 1.0)
        assert err.max() < tol, f"input {k}: max rel err {err.max():.2e}"


RNG = np.random.default_rng(7)


def test_elementwise_arithmetic_fd():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(4, 3)) + 3.0           # keep denominators away from 0
    check_fd(lambda x, y: ad.tsum(x * y + x / y - y), a, b)


def test_power_and_broadcasting_fd():
    a = np.abs(RNG.normal(size=(3, 1))) + 0.5
    b = RNG.normal(size=(1, 4))
    check_fd(lambda x, y: ad.tsum((x ** 1.7) * y + (x + y) * 2.0), a, b)


def test_matmul_fd():
    a = RNG.normal(size=(3, 5))
    b = RNG.normal(size=(5, 2))
    check_fd(lambda x, y: ad.tsum(x @ y), a, b)


def test_matmul_rejects_non_2d():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((2, 2))))


@pytest.mark.parametrize("op", [ad.exp, ad.log, ad.relu, ad.sigmoid,
                                ad.silu, ad.softplus])
def test_unary_ops_fd(op):
    x = np.abs(RNG.normal(size=12)) + 0.3        # positive, away from kinks
    x *= np.where(np.arange(12) % 2 == 0, 1.0, 1.5)
    if op is not ad.log:
        x = x - 0.15                             # mixed signs where legal
        x = np.where(np.abs(x) < 0.05, 0.2, x)   # stay clear of relu's kink
    check_fd(lambda t: ad.tsum(op(t)), x)


def test_reductions_fd():
    x = RNG.normal(size=(3, 4))
    check_fd(lambda t: ad.tsum(ad.tsum(t, axis=1) ** 2.0), x)
    check_fd(lambda t: ad.tmean(t) * 3.0, x)
    check_fd(lambda t: ad.tsum(ad.tmean(t, axis=0, keepdims=True) ** 2.0), x)


def test_reshape_and_take_fd():
    x = RNG.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])                 # repeats must accumulate
    check_fd(lambda t: ad.tsum(ad.take(t, idx) ** 2.0), x)
    check_fd(lambda t: ad.tsum(ad.reshape(t, (3, 5)) ** 2.0), x)


def test_take_accumulates_repeats():
    t = Tensor(np.arange(4.0))
    ad.tsum(ad.take(t, np.array([1, 1, 1]))).backward()
    np.testing.assert_array_equal(t.grad, [0.0, 3.0, 0.0, 0.0])


def test_diamond_graph_gradient():
    t = Tensor(np.array([3.0]))
    y = t * t + t                                # dy/dx = 2x + 1
    ad.tsum(y).backward()
    np.testing.assert_allclose(t.grad, [7.0])


def test_grad_accumulates_until_zeroed():
    t = Tensor(np.array([2.0]))
    (t * 3.0).backward()
    (t * 3.0).backward()
    np.testing.assert_allclose(t.grad, [6.0])
    t.zero_grad()
    assert t.grad is None


def test_deep_chain_no_recursion_limit():
    t = Tensor(np.array([1.0]))
    y = t
    for _ in range(5000):
        y = y + 1.0
    ad.tsum(y).backward()
    np.testing.assert_allclose(t.grad, [1.0])


def test_vector_jacobian_seed():
    t = Tensor(np.array([1.0, 2.0, 3.0]))
    y = t * t
    y.backward(seed=np.array([1.0, 0.0, 10.0]))
    np.testing.assert_allclose(t.grad, [2.0, 0.0, 60.0])


# ---------------------------------------------------------------------------
# conv2d


def conv_forward_oracle(x, w, b):
    h, wd, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((h, wd, cout))
    for co in range(cout):
        for ci in range(cin):
            out[:, :, co] += signal.correlate2d(
                x[:, :, ci], w[:, :, ci, co], mode="same")
        out[:, :, co] += b[co]
    return out


def test_conv_forward_matches_scipy():
    x = RNG.normal(size=(6, 5, 2))
    w = RNG.normal(size=(3, 3, 2, 4))
    b = RNG.normal(size=4)
    got = ad.conv2d_3x3(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, conv_forward_oracle(x, w, b), atol=1e-12)


def test_conv_fd_all_inputs():
    x = RNG.normal(size=(4, 4, 2))
    w = RNG.normal(size=(3, 3, 2, 3))
    b = RNG.normal(size=3)
    check_fd(lambda xi, wi, bi: ad.tsum(ad.conv2d_3x3(xi, wi, bi) ** 2.0),
             x, w, b, tol=1e-5)


def test_conv_kernel_shape_validated():
    with pytest.raises(ValueError):
        ad.conv2d_3x3(Tensor(np.zeros((4, 4, 2))),
                      Tensor(np.zeros((5, 5, 2, 3))), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# scatter-max


def test_scatter_elementwise_max_example():
    feats = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
    out = ad.scatter_max(feats, np.array([0, 0]), (1, 1))
    np.testing.assert_array_equal(out.data, [[[3.0, 5.0]]])


def test_scatter_empty_cells_read_zero():
    feats = Tensor(np.array([[-2.0, 4.0]]))
    out = ad.scatter_max(feats, np.array([3]), (2, 2))
    grid = out.data.reshape(4, 2)
    np.testing.assert_array_equal(grid[3], [-2.0, 4.0])
    assert np.all(grid[:3] == 0.0)               # untouched slots are zero


def test_scatter_drops_negative_cells():
    feats = Tensor(np.array([[1.0], [9.0]]))
    out = ad.scatter_max(feats, np.array([-1, 0]), (1, 1))
    np.testing.assert_array_equal(out.data, [[[9.0]]])
    ad.tsum(out).backward()
    np.testing.assert_array_equal(feats.grad, [[0.0], [1.0]])


def test_scatter_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        ad.scatter_max(Tensor(np.zeros((1, 1))), np.array([4]), (2, 2))


def test_scatter_tie_routes_to_lowest_index():
    feats = Tensor(np.array([[7.0], [7.0], [7.0]]))
    out = ad.scatter_max(feats, np.array([0, 0, 0]), (1, 1))
    ad.tsum(out).backward()
    np.testing.assert_array_equal(feats.grad, [[1.0], [0.0], [0.0]])


def test_scatter_gradient_routes_to_argmax_per_channel():
    feats = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
    out = ad.scatter_max(feats, np.array([0, 0]), (1, 1))
    ad.tsum(out * np.array([[[10.0, 100.0]]])).backward()
    np.testing.assert_array_equal(feats.grad, [[0.0, 100.0], [10.0, 0.0]])


def test_scatter_fd():
    feats = RNG.normal(size=(12, 3)) * 2.0       # distinct values, no ties
    cells = RNG.integers(0, 6, size=12)
    check_fd(lambda f: ad.tsum(ad.scatter_max(f, cells, (2, 3)) ** 2.0), feats)


# ---------------------------------------------------------------------------
# bilinear gather


def test_gather_cell_center_exact():
    grid = Tensor(RNG.normal(size=(2, 2, 3)))
    # extent 1, cell 1: centers at -0.5 and +0.5 per axis
    out = ad.gather_bilinear(grid, np.array([[-0.5, -0.5], [0.5, 0.5]]),
                             extent=1.0, cell=1.0)
    np.testing.assert_allclose(out.data[0], grid.data[0, 0], atol=1e-12)
    np.testing.assert_allclose(out.data[1], grid.data[1, 1], atol=1e-12)


def test_gather_midpoint_is_mean():
    grid = Tensor(RNG.normal(size=(2, 2, 2)))
    out = ad.gather_bilinear(grid, np.array([[0.0, -0.5]]), extent=1.0, cell=1.0)
    want = 0.5 * (grid.data[0, 0] + grid.data[1, 0])
    np.testing.assert_allclose(out.data[0], want, atol=1e-12)


def test_gather_outside_extent_is_zero():
    grid = Tensor(np.ones((2, 2, 2)))
    out = ad.gather_bilinear(grid, np.array([[5.0, 0.0]]), extent=1.0, cell=1.0)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0]])


def test_gather_edge_query_drops_offgrid_corners():
    grid = Tensor(np.ones((2, 2, 1)))
    # on the extent edge: the two corners past the boundary contribute zero
    out = ad.gather_bilinear(grid, np.array([[-1.0, -0.5]]), extent=1.0, cell=1.0)
    assert out.data[0, 0] == pytest.approx(0.5)


def test_gather_fd():
    grid = RNG.normal(size=(3, 4, 2))
    xy = RNG.uniform(-0.9, 0.9, size=(10, 2))
    check_fd(lambda g: ad.tsum(
        ad.gather_bilinear(g, xy, extent=1.0, cell=0.5) ** 2.0), grid)


def test_gather_adjointness_dot_product():
    rng = np.random.default_rng(3)
    grid_data = rng.normal(size=(4, 4, 3))
    xy = rng.uniform(-1.8, 1.8, size=(20, 2))
    v = rng.normal(size=(20, 3))
    grid = Tensor(grid_data)
    out = ad.gather_bilinear(grid, xy, extent=2.0, cell=1.0)
    s_forward = float((out.data * v).sum())
    out.backward(seed=v)
    s_transpose = float((grid.grad * grid_data).sum())
    # <G x, v> == <x, G^T v> for the linear gather operator
    assert s_forward == pytest.approx(s_transpose, abs=1e-10)
