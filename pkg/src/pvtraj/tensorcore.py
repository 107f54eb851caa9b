"""Dense float64 arrays with reverse-mode gradient accumulation.

Define-by-run: each kernel returns a Node holding the forward value and a
closure that scatters the upstream gradient to the node's parents. Graphs
are rebuilt every forward pass, so variable agent counts need no padding.
Everything is double precision, which keeps finite-difference checks tight.

Kernels accept leading batch axes where noted (rows = agents); the affine
map always acts along the last axis. There is no general broadcasting.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the kernel's contract."""


class EmptySetError(ValueError):
    """Pooling over a set with no unmasked element."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class Node:
    """A value in the computation graph.

    ``grad`` is allocated lazily by the backward pass. ``bwd`` is a closure
    that receives this node's accumulated gradient and adds each parent's
    share onto ``parent.grad``.
    """

    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, value, parents=(), bwd=None, requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Node):
    """Named trainable leaf node."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(value) -> Node:
    """Wrap an array as a non-trainable leaf."""
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False)


def variable(value) -> Node:
    """Leaf that collects a gradient (used by tests and finite differences)."""
    return Node(np.asarray(value, dtype=np.float64), requires_grad=True)


def _new(value: np.ndarray, parents, bwd) -> Node:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("kernel produced a non-finite value")
    return Node(value, parents, bwd)


def _acc(node: Node, grad: np.ndarray) -> None:
    if node.requires_grad:
        node.grad = grad if node.grad is None else node.grad + grad


def toposort(root: Node) -> list[Node]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Accumulate gradients of ``root`` (seeded with ones) into the graph.

    Each node's closure runs exactly once, in reverse topological order.
    Gradients add across repeated calls, so batch losses can be backpropagated
    sequence by sequence with a 1/batch seed.
    """
    order = toposort(root)
    seeded = np.full_like(root.value, 1.0 if seed is None else seed)
    root.grad = seeded if root.grad is None else root.grad + seeded
    for node in reversed(order):
        if node.bwd is not None:
            if node.grad is not None and node.requires_grad:
                node.bwd(node.grad)
            node.grad = None  # leaves (inputs, Parameters) keep theirs


# ---------------------------------------------------------------------------
# elementwise and affine kernels


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Affine map along the last axis: ``y = x @ W (+ b)``.

    ``x`` may carry any leading axes; ``W`` is [in, out], ``b`` is [out].
    """
    xv, wv = x.value, weight.value
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"linear: x {xv.shape} incompatible with weight {wv.shape}")
    y = xv @ wv
    if bias is not None:
        y = y + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        _acc(x, g @ wv.T)
        g2 = g.reshape(-1, g.shape[-1])
        _acc(weight, xv.reshape(-1, xv.shape[-1]).T @ g2)
        if bias is not None:
            _acc(bias, g2.sum(axis=0))

    return _new(y, parents, bwd)


def relu(x: Node) -> Node:
    y = np.maximum(x.value, 0.0)
    mask = x.value > 0.0  # subgradient at exactly 0 is 0

    def bwd(g):
        _acc(x, g * mask)

    return _new(y, (x,), bwd)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)

    def bwd(g):
        _acc(x, g * (1.0 - y * y))

    return _new(y, (x,), bwd)


def sigmoid(x: Node) -> Node:
    y = 1.0 / (1.0 + np.exp(-x.value))

    def bwd(g):
        _acc(x, g * y * (1.0 - y))

    return _new(y, (x,), bwd)


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.value)

    def bwd(g):
        _acc(x, g * y)

    return _new(y, (x,), bwd)


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")

    def bwd(g):
        _acc(a, g)
        _acc(b, g)

    return _new(a.value + b.value, (a, b), bwd)


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        _acc(a, g * bv)
        _acc(b, g * av)

    return _new(av * bv, (a, b), bwd)


def scale(x: Node, c: float) -> Node:
    def bwd(g):
        _acc(x, g * c)

    return _new(x.value * c, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Node, shape) -> Node:
    orig = x.value.shape

    def bwd(g):
        _acc(x, g.reshape(orig))

    return _new(x.value.reshape(shape), (x,), bwd)


def concat(xs, axis: int = 0) -> Node:
    """Concatenate nodes along an existing axis."""
    xs = list(xs)
    vals = [x.value for x in xs]
    ref = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: {vals[0].shape} vs {v.shape} along axis {axis}")
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for x, piece in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, piece)

    return _new(np.concatenate(vals, axis=axis), tuple(xs), bwd)


def slice_last(x: Node, start: int, stop: int) -> Node:
    """Columns [start:stop) of the last axis; gradient scatters back."""

    def bwd(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        _acc(x, full)

    return _new(np.ascontiguousarray(x.value[..., start:stop]), (x,), bwd)


def swap_last2(x: Node) -> Node:
    """Transpose the last two axes."""

    def bwd(g):
        _acc(x, g.swapaxes(-1, -2))

    return _new(np.ascontiguousarray(x.value.swapaxes(-1, -2)), (x,), bwd)


def transpose(x: Node, axes) -> Node:
    """Permute axes; gradient applies the inverse permutation."""
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(x, np.ascontiguousarray(g.transpose(inv)))

    return _new(np.ascontiguousarray(x.value.transpose(axes)), (x,), bwd)


def take_rows(x: Node, indices) -> Node:
    """Select rows along the second-to-last axis; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (Ellipsis, idx, slice(None)), g)
        _acc(x, full)

    return _new(np.ascontiguousarray(x.value[..., idx, :]), (x,), bwd)


def gate_blend(a: Node, b: Node, gate: Node) -> Node:
    """gate[0] * a + gate[1] * b for same-shaped a, b and a 2-vector gate."""
    if a.value.shape != b.value.shape or gate.value.shape != (2,):
        raise ShapeError(f"gate_blend: {a.value.shape} vs {b.value.shape}, gate {gate.value.shape}")
    g0, g1 = float(gate.value[0]), float(gate.value[1])

    def bwd(g):
        _acc(a, g * g0)
        _acc(b, g * g1)
        _acc(gate, np.array([(g * a.value).sum(), (g * b.value).sum()]))

    return _new(g0 * a.value + g1 * b.value, (a, b, gate), bwd)


def weighted_total(x: Node, proj: np.ndarray) -> Node:
    """Scalar projection sum(x * proj); the finite-difference harness's seed."""
    p = np.asarray(proj, dtype=np.float64)
    if p.shape != x.value.shape:
        raise ShapeError(f"weighted_total: {x.value.shape} vs {p.shape}")

    def bwd(g):
        _acc(x, g * p)

    return _new(np.asarray((x.value * p).sum()), (x,), bwd)


# ---------------------------------------------------------------------------
# set pooling and aggregation


def masked_max(x: Node, mask: np.ndarray, empty_zero: bool = False) -> Node:
    """Per-dimension max over the second-to-last axis, restricted to unmasked rows.

    ``x`` is [..., n, d], ``mask`` is [..., n] booleans. Rows of the output
    whose set is entirely masked are zero when ``empty_zero`` (the convention
    interaction features rely on), otherwise an EmptySetError is raised.
    Gradient routes to the argmax row per dimension; ties break to the lowest
    row index.
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.value.shape[:-1]:
        raise ShapeError(f"masked_max: x {x.value.shape} vs mask {m.shape}")
    any_valid = m.any(axis=-1)
    if not any_valid.all() and not empty_zero:
        raise EmptySetError("max pooling over an all-masked set")
    neg = np.where(m[..., None], x.value, -np.inf)
    idx = neg.argmax(axis=-2)  # first occurrence = lowest row index
    y = np.take_along_axis(x.value, idx[..., None, :], axis=-2)[..., 0, :]
    y = np.where(any_valid[..., None], y, 0.0)

    def bwd(g):
        gz = np.zeros_like(x.value)
        np.put_along_axis(gz, idx[..., None, :], (g * any_valid[..., None])[..., None, :], axis=-2)
        _acc(x, gz)

    return _new(y, (x,), bwd)


def set_max_pool(x: Node, mask) -> Node:
    """Max over unmasked rows of a [n, d] set; errors if all rows are masked."""
    if x.value.ndim != 2:
        raise ShapeError(f"set_max_pool expects [n, d], got {x.value.shape}")
    return masked_max(x, mask, empty_zero=False)


def softmax(x: Node, mask: np.ndarray | None = None) -> Node:
    """Softmax along the last axis, optionally masked.

    Masked entries get zero weight; an all-masked row yields all zeros.
    """
    xv = x.value
    if mask is None:
        z = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != xv.shape:
            raise ShapeError(f"softmax: x {xv.shape} vs mask {m.shape}")
        any_valid = m.any(axis=-1, keepdims=True)
        z = np.where(m, xv, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        zmax = np.where(any_valid, zmax, 0.0)
        e = np.where(m, np.exp(z - zmax), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(x, y * (g - dot))

    return _new(y, (x,), bwd)


def weighted_sum(values: Node, weights: Node) -> Node:
    """sum_i weights[i] * values[i] for values [n, d], weights [n]."""
    vv, wv = values.value, weights.value
    if vv.ndim != 2 or wv.shape != (vv.shape[0],):
        raise ShapeError(f"weighted_sum: values {vv.shape} vs weights {wv.shape}")
    y = wv @ vv

    def bwd(g):
        _acc(values, wv[:, None] * g[None, :])
        _acc(weights, vv @ g)

    return _new(y, (values, weights), bwd)


def grouped_weighted_sum(weights: Node, values: Node) -> Node:
    """Stacked weighted sums: [..., p, n] weights against [..., n, d] values."""
    wv, vv = weights.value, values.value
    if wv.shape[-1] != vv.shape[-2] or wv.shape[:-2] != vv.shape[:-2]:
        raise ShapeError(f"grouped_weighted_sum: {wv.shape} vs {vv.shape}")
    y = wv @ vv

    def bwd(g):
        _acc(weights, g @ vv.swapaxes(-1, -2))
        _acc(values, wv.swapaxes(-1, -2) @ g)

    return _new(y, (weights, values), bwd)


def pair_product(pairs: Node, rows: Node) -> Node:
    """Elementwise product of [..., p, n, d] pair features with [..., n, d] rows."""
    pv, rv = pairs.value, rows.value
    if pv.shape[-2:] != rv.shape[-2:] or pv.shape[:-3] != rv.shape[:-2]:
        raise ShapeError(f"pair_product: {pv.shape} vs {rv.shape}")
    rb = rv[..., None, :, :]

    def bwd(g):
        _acc(pairs, g * rb)
        _acc(rows, (g * pv).sum(axis=-3))

    return _new(pv * rb, (pairs, rows), bwd)


# ---------------------------------------------------------------------------
# recurrent and convolutional kernels


def lstm_cell(x: Node, h: Node, c: Node, wx: Node, wh: Node, b: Node) -> tuple[Node, Node]:
    """One LSTM step over rows: returns (h', c').

    ``x`` is [..., d_in], ``h``/``c`` are [..., d_h]; ``wx`` [d_in, 4*d_h],
    ``wh`` [d_h, 4*d_h], ``b`` [4*d_h]. Gate lanes are ordered i, f, g, o.
    """
    xv, hv, cv = x.value, h.value, c.value
    H = hv.shape[-1]
    if wx.value.shape != (xv.shape[-1], 4 * H) or wh.value.shape != (H, 4 * H) \
            or b.value.shape != (4 * H,) or cv.shape != hv.shape:
        raise ShapeError(
            f"lstm_cell: x {xv.shape} h {hv.shape} c {cv.shape} "
            f"wx {wx.value.shape} wh {wh.value.shape} b {b.value.shape}")
    z = xv @ wx.value + hv @ wh.value + b.value
    si = 1.0 / (1.0 + np.exp(-z[..., 0:H]))
    sf = 1.0 / (1.0 + np.exp(-z[..., H:2 * H]))
    gg = np.tanh(z[..., 2 * H:3 * H])
    so = 1.0 / (1.0 + np.exp(-z[..., 3 * H:4 * H]))
    c2 = sf * cv + si * gg
    tc2 = np.tanh(c2)
    h2 = so * tc2

    def scatter_gates(dz):
        # dz is [..., 4H] in gate-lane layout
        _acc(x, dz @ wx.value.T)
        _acc(h, dz @ wh.value.T)
        dz2 = dz.reshape(-1, 4 * H)
        _acc(wx, xv.reshape(-1, xv.shape[-1]).T @ dz2)
        _acc(wh, hv.reshape(-1, H).T @ dz2)
        _acc(b, dz2.sum(axis=0))

    def bwd_c(gc):
        dz = np.zeros_like(z)
        dz[..., 0:H] = gc * gg * si * (1.0 - si)
        dz[..., H:2 * H] = gc * cv * sf * (1.0 - sf)
        dz[..., 2 * H:3 * H] = gc * si * (1.0 - gg * gg)
        _acc(c, gc * sf)
        scatter_gates(dz)

    node_c = _new(c2, (x, h, c, wx, wh, b), bwd_c)

    def bwd_h(gh):
        dz = np.zeros_like(z)
        dz[..., 3 * H:4 * H] = gh * tc2 * so * (1.0 - so)
        _acc(node_c, gh * so * (1.0 - tc2 * tc2))
        scatter_gates(dz)

    node_h = _new(h2, (x, h, wx, wh, b, node_c), bwd_h)
    return node_h, node_c


def temporal_conv(x: Node, kernel: Node, bias: Node | None = None) -> Node:
    """1-D convolution along the last (time) axis, length preserved.

    ``x`` is [..., C_in, T]; ``kernel`` is [C_out, C_in, k] with odd k
    (symmetric zero padding of (k-1)/2); optional ``bias`` is [C_out].
    """
    xv, kv = x.value, kernel.value
    co, ci, k = kv.shape
    if k % 2 == 0:
        raise ValueError("temporal_conv requires an odd kernel width")
    if xv.shape[-2] != ci:
        raise ShapeError(f"temporal_conv: x {xv.shape} vs kernel {kv.shape}")
    T = xv.shape[-1]
    pad = (k - 1) // 2
    pw = [(0, 0)] * (xv.ndim - 1) + [(pad, pad)]
    xp = np.pad(xv, pw)
    # windows: [..., T, C_in*k]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # [..., C, T, k]
    win = np.ascontiguousarray(win.swapaxes(-3, -2)).reshape(xv.shape[:-2] + (T, ci * k))
    k2 = kv.reshape(co, ci * k)
    y = win @ k2.T  # [..., T, C_out]
    if bias is not None:
        if bias.value.shape != (co,):
            raise ShapeError(f"temporal_conv: bias {bias.value.shape} vs C_out {co}")
        y = y + bias.value
    y = np.ascontiguousarray(y.swapaxes(-1, -2))  # [..., C_out, T]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gT = g.swapaxes(-1, -2)  # [..., T, C_out]
        g2 = gT.reshape(-1, co)
        _acc(kernel, (g2.T @ win.reshape(-1, ci * k)).reshape(co, ci, k))
        if bias is not None:
            _acc(bias, g2.sum(axis=0))
        dwin = (gT @ k2).reshape(xv.shape[:-2] + (T, ci, k)).swapaxes(-3, -2)  # [..., C, T, k]
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[..., j:j + T] += dwin[..., j]
        _acc(x, dxp[..., pad:pad + T])

    return _new(y, parents, bwd)


# ---------------------------------------------------------------------------
# distribution head and loss kernels


def gaussian_head(raw: Node) -> Node:
    """Map raw [..., 5] to (mu_x, mu_y, sigma_x, sigma_y, rho).

    Scales go through exp (always positive); the correlation through tanh
    (always inside the open interval), so the covariance stays positive
    definite for finite inputs.
    """
    rv = raw.value
    if rv.shape[-1] != 5:
        raise ShapeError(f"gaussian_head expects last axis 5, got {rv.shape}")
    y = rv.copy()
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y[..., 2:4] = np.exp(rv[..., 2:4])
    y[..., 4] = np.tanh(rv[..., 4])

    def bwd(g):
        d = g.copy()
        d[..., 2:4] *= y[..., 2:4]
        d[..., 4] *= 1.0 - y[..., 4] * y[..., 4]
        _acc(raw, d)

    return _new(y, (raw,), bwd)


def bivariate_nll(params: Node, target: np.ndarray, mask: np.ndarray | None = None) -> Node:
    """Mean negative log density of 2-D targets under per-element Gaussians.

    ``params`` is [..., 5] = (mu_x, mu_y, sigma_x, sigma_y, rho) with
    sigma > 0 and |rho| < 1 (the head guarantees both); ``target`` is
    [..., 2]; ``mask`` selects which elements enter the mean.
    """
    pv = params.value
    t = np.asarray(target, dtype=np.float64)
    if pv.shape[-1] != 5 or t.shape != pv.shape[:-1] + (2,):
        raise ShapeError(f"bivariate_nll: params {pv.shape} vs target {t.shape}")
    if mask is None:
        m = np.ones(pv.shape[:-1], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != pv.shape[:-1]:
            raise ShapeError(f"bivariate_nll: mask {m.shape} vs params {pv.shape}")
    count = int(m.sum())
    if count == 0:
        raise EmptySetError("bivariate_nll over an empty mask")
    a = t[..., 0] - pv[..., 0]
    b = t[..., 1] - pv[..., 1]
    s1, s2, r = pv[..., 2], pv[..., 3], pv[..., 4]
    q = 1.0 - r * r
    with np.errstate(divide="ignore", over="ignore"):  # caught by _new below
        z = (a / s1) ** 2 + (b / s2) ** 2 - 2.0 * r * a * b / (s1 * s2)
        nll = np.log(2.0 * np.pi) + np.log(s1) + np.log(s2) + 0.5 * np.log(q) + z / (2.0 * q)
    total = float(nll[m].sum()) / count

    def bwd(g):
        w = (np.asarray(g) / count) * m
        d = np.empty_like(pv)
        d[..., 0] = w * (-a / s1 ** 2 + r * b / (s1 * s2)) / q
        d[..., 1] = w * (-b / s2 ** 2 + r * a / (s1 * s2)) / q
        d[..., 2] = w * (1.0 / s1 + (-(a ** 2) / s1 ** 3 + r * a * b / (s1 ** 2 * s2)) / q)
        d[..., 3] = w * (1.0 / s2 + (-(b ** 2) / s2 ** 3 + r * a * b / (s1 * s2 ** 2)) / q)
        d[..., 4] = w * (-r / q - a * b / (s1 * s2 * q) + r * z / (q * q))
        _acc(params, d)

    return _new(np.asarray(total), (params,), bwd)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(fn, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps Nodes to a Node (or a tuple of Nodes); ``inputs`` are plain
    arrays. The outputs are contracted against a fixed random projection so
    gradients with structural zero row-sums (softmax) are still exercised.
    The denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    def run(arrs):
        nodes = [variable(a) for a in arrs]
        out = fn(*nodes)
        outs = out if isinstance(out, tuple) else (out,)
        return nodes, outs

    nodes, outs = run(arrays)
    projs = [rng.standard_normal(o.value.shape) for o in outs]

    def scalar(arrs) -> float:
        _, os = run(arrs)
        return float(sum((o.value * p).sum() for o, p in zip(os, projs)))

    total = weighted_total(outs[0], projs[0])
    for o, p in zip(outs[1:], projs[1:]):
        total = add(total, weighted_total(o, p))
    backward(total)

    worst = 0.0
    for i, node in enumerate(nodes):
        analytic = np.zeros_like(arrays[i]) if node.grad is None else node.grad
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] = flat[j] + eps
            up = scalar(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - eps
            down = scalar(bumped)
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# initialization and checkpoints


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Weights uniform in +-sqrt(1/fan_in)."""
    s = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-s, s, size=shape)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(arrays: dict[str, np.ndarray], path, cfg_hash: str = "") -> None:
    """Named flat arrays as little-endian float64 plus a plain-text manifest.

    Writes ``<path>.bin`` and ``<path>.manifest``; manifest lines are
    ``name<TAB>shape_csv<TAB>offset<TAB>count`` with offsets in float64 units.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# pvtraj checkpoint v1", f"# config_hash {cfg_hash}"]
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            shape_csv = ",".join(str(s) for s in arr.shape) or "0"
            lines.append(f"{name}\t{shape_csv}\t{offset}\t{arr.size}")
            fh.write(arr.tobytes())
            offset += arr.size
    with open(path.with_suffix(".manifest"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read back a checkpoint; returns (arrays, config_hash)."""
    path = Path(path)
    cfg_hash = ""
    entries = []
    with open(path.with_suffix(".manifest"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# config_hash"):
                cfg_hash = line.split(" ", 2)[2] if len(line.split(" ", 2)) > 2 else ""
                continue
            if not line or line.startswith("#"):
                continue
            name, shape_csv, offset, count = line.split("\t")
            shape = tuple(int(s) for s in shape_csv.split(",")) if shape_csv != "0" else ()
            entries.append((name, shape, int(offset), int(count)))
    blob = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    arrays = {}
    for name, shape, offset, count in entries:
        arrays[name] = blob[offset:offset + count].reshape(shape).astype(np.float64)
    return arrays, cfg_hash
