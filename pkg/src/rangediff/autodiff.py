"""Reverse-mode automatic differentiation on numpy arrays.

Define-by-run tape in the micrograd mould: every op builds a ``Tensor``
that remembers its parents and a closure that pushes gradients to them.
``Tensor.backward()`` topologically sorts the graph and runs the closures
in reverse.  Everything is float64; gradients accumulate across repeated
``backward()`` calls until ``zero_grad``.

Beyond elementwise/matmul basics this module carries the three structured
ops the denoiser needs: a 3x3 same-padding convolution, a scatter-max from
points into a flat grid (gradient routed to each cell's argmax point,
lowest index on ties), and a bilinear gather from the grid back to points
(gradient routed through the interpolation weights; query positions are
constants).
"""
from __future__ import annotations

import numpy as np


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Run reverse-mode accumulation from this node.

        ``seed`` defaults to ones (the usual scalar-loss case); pass an
        explicit array to seed a vector-Jacobian product.
        """
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        _accum(self, np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data, (a, b))

    def bw():
        _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data ** 2), b.data.shape))

    out._backward = bw
    return out


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data ** exponent, (a,))

    def bw():
        _accum(a, out.grad * exponent * a.data ** (exponent - 1.0))

    out._backward = bw
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = Tensor(a.data @ b.data, (a, b))

    def bw():
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out._backward = bw
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data), (a,))

    def bw():
        _accum(a, out.grad * out.data)

    out._backward = bw
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), (a,))

    def bw():
        _accum(a, out.grad / a.data)

    out._backward = bw
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def bw():
        _accum(a, out.grad * (a.data > 0.0))

    out._backward = bw
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out = Tensor(s, (a,))

    def bw():
        _accum(a, out.grad * out.data * (1.0 - out.data))

    out._backward = bw
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth, which keeps finite-difference checks honest."""
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out = Tensor(a.data * s, (a,))

    def bw():
        _accum(a, out.grad * (s + a.data * s * (1.0 - s)))

    out._backward = bw
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    a = _wrap(a)
    out = Tensor(np.logaddexp(0.0, a.data), (a,))

    def bw():
        s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
        _accum(a, out.grad * s)

    out._backward = bw
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out._backward = bw
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), (a,))

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward = bw
    return out


def take(a, idx) -> Tensor:
    """Gather rows (axis 0) by an integer index array."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], (a,))

    def bw():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# structured ops


def conv2d_3x3(x, w, b) -> Tensor:
    """Same-padding 3x3 convolution on a single (H, W, Cin) image.

    ``w`` is (3, 3, Cin, Cout), ``b`` is (Cout,).  Forward and both weight
    and input gradients are expressed as im2col matrix products; the input
    gradient is the correlation of the padded upstream gradient with the
    spatially flipped, channel-transposed kernel.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    h, wd, cin = x.data.shape
    kh, kw, cin_w, cout = w.data.shape
    if (kh, kw) != (3, 3) or cin_w != cin:
        raise ValueError("kernel must be (3, 3, Cin, Cout) matching the input")

    def _cols(img, ci):
        pad = np.pad(img, ((1, 1), (1, 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))
        # win: (H, W, C, 3, 3) -> (H*W, 3*3*C) in (ky, kx, c) order
        return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(-1, 9 * ci)

    cols = _cols(x.data, cin)
    w2 = w.data.reshape(9 * cin, cout)
    out = Tensor((cols @ w2 + b.data).reshape(h, wd, cout), (x, w, b))

    def bw():
        g2 = out.grad.reshape(-1, cout)
        _accum(b, g2.sum(axis=0))
        _accum(w, (cols.T @ g2).reshape(3, 3, cin, cout))
        wflip = np.ascontiguousarray(
            w.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(9 * cout, cin)
        gcols = _cols(out.grad, cout)
        _accum(x, (gcols @ wflip).reshape(h, wd, cin))

    out._backward = bw
    return out


def scatter_max(feats, cells: np.ndarray, grid_hw: tuple[int, int]) -> Tensor:
    """Max-pool point features into a flat (H, W, C) grid.

    ``cells`` holds each point's flat cell index, -1 for points outside
    the grid (they are dropped).  Empty (cell, channel) slots read as 0.
    The gradient flows to the point that won each slot; ties resolve to
    the lowest point index.
    """
    feats = _wrap(feats)
    n, c = feats.data.shape
    hh, ww = grid_hw
    hw = hh * ww
    cells = np.asarray(cells, dtype=np.int64)
    if cells.shape != (n,):
        raise ValueError("cells must be (N,) aligned with feats")
    if np.any(cells >= hw):
        raise ValueError("cell index out of grid bounds")

    keep = cells >= 0
    f = feats.data[keep]
    cidx = cells[keep]
    orig = np.flatnonzero(keep)

    grid = np.full((hw, c), -np.inf)
    winner = np.full((hw, c), n, dtype=np.int64)
    if f.shape[0]:
        np.maximum.at(grid, cidx, f)
        tie = f == grid[cidx]                    # (M, C): per-slot maxima
        rr, ch = np.nonzero(tie)
        np.minimum.at(winner, (cidx[rr], ch), orig[rr])
    filled = np.where(np.isneginf(grid), 0.0, grid)
    out = Tensor(filled.reshape(hh, ww, c), (feats,))

    def bw():
        g2 = out.grad.reshape(hw, c)
        has = winner < n
        slot, ch = np.nonzero(has)
        df = np.zeros_like(feats.data)
        np.add.at(df, (winner[slot, ch], ch), g2[slot, ch])
        _accum(feats, df)

    out._backward = bw
    return out


def gather_bilinear(grid, xy: np.ndarray, extent: float,
                    cell: float) -> Tensor:
    """Bilinearly sample a (H, W, C) grid at metric xy positions.

    Cell centers sit at ``(i + 0.5) * cell - extent``; a query exactly on a
    center returns that cell's features.  Corners that fall off the grid
    contribute zero, and queries outside the extent square return zeros
    outright.  Positions are constants: the gradient flows to the grid
    through the interpolation weights only.
    """
    grid = _wrap(grid)
    hh, ww, c = grid.data.shape
    xy = np.asarray(xy, dtype=np.float64)
    n = xy.shape[0]

    inside = (np.abs(xy[:, 0]) <= extent) & (np.abs(xy[:, 1]) <= extent)
    u = (xy[:, 0] + extent) / cell - 0.5
    v = (xy[:, 1] + extent) / cell - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0

    corners = []
    for di, dj, wgt in ((0, 0, (1 - fu) * (1 - fv)),
                        (1, 0, fu * (1 - fv)),
                        (0, 1, (1 - fu) * fv),
                        (1, 1, fu * fv)):
        ii = i0 + di
        jj = j0 + dj
        ok = inside & (ii >= 0) & (ii < hh) & (jj >= 0) & (jj < ww)
        flat = np.where(ok, ii * ww + jj, 0)
        corners.append((flat, np.where(ok, wgt, 0.0)))

    g2 = grid.data.reshape(hh * ww, c)
    acc = np.zeros((n, c))
    for flat, wgt in corners:
        acc += wgt[:, None] * g2[flat]
    out = Tensor(acc, (grid,))

    def bw():
        dg = np.zeros_like(g2)
        for flat, wgt in corners:
            np.add.at(dg, flat, wgt[:, None] * out.grad)
        _accum(grid, dg.reshape(hh, ww, c))

    out._backward = bw
    return out
