"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the PULSE model needs are provided.  Every operation
records its parents and a closure that maps the output adjoint to input
adjoints; :meth:`Tensor.backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

#: Padding convention used by every convolution in the package.
CONV_PADDING = "same-centered"


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


class NumericOverflowError(FloatingPointError):
    """Raised when an operation produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def _FREED(g):  # marks a released graph node
    raise ContractError("graph was freed by an earlier backward")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents and self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op!r})"

    def backward(self, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Intermediate adjoints live only for the duration of the call.  Unless
        ``retain_graph`` is set, the recorded graph is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        tape = _topological_order(self)
        if any(node._backward is _FREED for node in tape):
            raise ContractError("graph was freed by an earlier backward; pass retain_graph=True")
        adjoints = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
        if not retain_graph:
            for node in tape:
                if not node.is_leaf:
                    node._parents = ()
                    node._backward = _FREED

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by scalars")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def _broadcastable(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcastable(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x  # x**3 goes through pow, ~40x slower
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), back, "gelu")


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a, idx):
    basic = _is_basic(idx)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)  # repeated indices accumulate
        return (out,)

    return _make(a.data[idx], (a,), back, "getitem")


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


# ---------------------------------------------------------------- layers


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input feature size {x.shape[-1]} does not match weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[0],))

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ flat
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "linear")


def _pad_amounts(k, dilation, padding):
    total = dilation * (k - 1)
    if padding == "same-causal":
        return total, 0
    if padding == "same-centered":
        return total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv1d(x, kernel, bias=None, dilation=1, padding=CONV_PADDING):
    """Length-preserving dilated 1-D convolution (cross-correlation).

    ``x`` is ``[batch, in_ch, time]`` and ``kernel`` is ``[out_ch, in_ch, k]``.
    Implemented as a single GEMM over an im2col buffer.
    """
    x = as_tensor(x)
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv1d: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    B, C, T = x.shape
    O, _, K = kernel.shape
    left, right = _pad_amounts(K, dilation, padding)
    # time-major im2col: cols[b, t, j, c] = xp[b, t + j * dilation, c]
    xp = np.zeros((B, T + left + right, C))
    xp[:, left : left + T] = x.data.transpose(0, 2, 1)
    cols = np.empty((B, T, K, C))
    for j in range(K):
        cols[:, :, j] = xp[:, j * dilation : j * dilation + T]
    cols = cols.reshape(B * T, K * C)
    w2 = kernel.data.transpose(0, 2, 1).reshape(O, K * C)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, T, O).transpose(0, 2, 1)

    def back(g):
        g2 = g.transpose(0, 2, 1).reshape(B * T, O)
        gw = (g2.T @ cols).reshape(O, K, C).transpose(0, 2, 1)
        gcols = (g2 @ w2).reshape(B, T, K, C)
        gxp = np.zeros((B, T + left + right, C))
        for j in range(K):
            gxp[:, j * dilation : j * dilation + T] += gcols[:, :, j]
        gx = gxp[:, left : left + T].transpose(0, 2, 1)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, back, "conv1d")


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """One gated-recurrent-unit update.

    Gate rows of ``w_ih``/``w_hh`` are ordered (reset, update, candidate):

        r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
        z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
        n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h = as_tensor(x), as_tensor(h)
    H = h.shape[-1]
    if w_ih.shape != (3 * H, x.shape[-1]) or w_hh.shape != (3 * H, H):
        raise DimensionError(
            f"gru_cell: weights {w_ih.shape}, {w_hh.shape} inconsistent with "
            f"input {x.shape[-1]} and hidden {H}"
        )
    gi = x.data @ w_ih.data.T + b_ih.data
    gh = h.data @ w_hh.data.T + b_hh.data
    r = _sigmoid(gi[:, :H] + gh[:, :H])
    z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    ghn = gh[:, 2 * H :]
    n = np.tanh(gi[:, 2 * H :] + r * ghn)
    out = (1.0 - z) * n + z * h.data
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError("gru_cell produced non-finite hidden state")

    def back(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgi = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dx = dgi @ w_ih.data
        dh = g * z + dgh @ w_hh.data
        return dx, dh, dgi.T @ x.data, dgh.T @ h.data, dgi.sum(axis=0), dgh.sum(axis=0)

    return _make(out, (x, h, w_ih, w_hh, b_ih, b_hh), back, "gru_cell")


def _sigmoid_(x):
    """In-place logistic function."""
    x *= 0.5
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


def gru_sequence(xs, h0, w_ih, w_hh, b_ih, b_hh):
    """Run :func:`gru_cell` over ``xs[:, k]`` for every step ``k``.

    Returns hidden states ``[batch, steps, hidden]``.  Matches chaining
    ``gru_cell`` step by step, but input projections and weight gradients are
    single GEMMs and the recurrence runs on time-major contiguous buffers.
    """
    xs, h0 = as_tensor(xs), as_tensor(h0)
    B, L, I = xs.shape
    H = h0.shape[-1]
    if w_ih.shape != (3 * H, I) or w_hh.shape != (3 * H, H):
        raise DimensionError(
            f"gru_sequence: weights {w_ih.shape}, {w_hh.shape} inconsistent with "
            f"input {I} and hidden {H}"
        )
    x_tm = np.ascontiguousarray(xs.data.transpose(1, 0, 2)).reshape(L * B, I)
    gi = (x_tm @ w_ih.data.T + b_ih.data).reshape(L, B, 3 * H)
    hs = np.empty((L + 1, B, H))
    hs[0] = h0.data
    rz = np.empty((L, B, 2 * H))
    n = np.empty((L, B, H))
    ghn = np.empty((L, B, H))
    whh_t = np.ascontiguousarray(w_hh.data.T)
    for k in range(L):
        gh = hs[k] @ whh_t
        gh += b_hh.data
        np.add(gi[k, :, : 2 * H], gh[:, : 2 * H], out=rz[k])
        _sigmoid_(rz[k])
        ghn[k] = gh[:, 2 * H :]
        nk = n[k]
        np.multiply(rz[k, :, :H], ghn[k], out=nk)
        nk += gi[k, :, 2 * H :]
        np.tanh(nk, out=nk)
        hk = hs[k + 1]
        np.subtract(hs[k], nk, out=hk)
        hk *= rz[k, :, H:]
        hk += nk
    if not np.all(np.isfinite(hs)):
        bad = int(np.argmax(~np.isfinite(hs).reshape(L + 1, -1).all(axis=1))) - 1
        raise NumericOverflowError(f"gru_sequence overflow at step {bad}", step=bad)
    out = hs[1:].transpose(1, 0, 2)

    def back(g):
        g_tm = g.transpose(1, 0, 2)
        dgi = np.empty((L, B, 3 * H))
        dgh = np.empty((L, B, 3 * H))
        dh = np.zeros((B, H))
        w = w_hh.data
        for k in range(L - 1, -1, -1):
            gk = g_tm[k] + dh
            r = rz[k, :, :H]
            z = rz[k, :, H:]
            nk = n[k]
            dan = gk - gk * z
            dan *= 1.0 - nk * nk
            dar = dan * ghn[k]
            dar *= r * (1.0 - r)
            daz = gk * (hs[k] - nk)
            daz *= z * (1.0 - z)
            dgi[k, :, :H] = dar
            dgi[k, :, H : 2 * H] = daz
            dgi[k, :, 2 * H :] = dan
            dgh[k, :, : 2 * H] = dgi[k, :, : 2 * H]
            np.multiply(dan, r, out=dgh[k, :, 2 * H :])
            dh = gk * z
            dh += dgh[k] @ w
        dgi2 = dgi.reshape(L * B, 3 * H)
        dgh2 = dgh.reshape(L * B, 3 * H)
        dxs = (dgi2 @ w_ih.data).reshape(L, B, I).transpose(1, 0, 2)
        dw_ih = dgi2.T @ x_tm
        dw_hh = dgh2.T @ hs[:-1].reshape(L * B, H)
        return dxs, dh, dw_ih, dw_hh, dgi2.sum(axis=0), dgh2.sum(axis=0)

    return _make(out, (xs, h0, w_ih, w_hh, b_ih, b_hh), back, "gru_sequence")


def max_pool_time(x):
    """Per-feature maximum over the last (time) axis; ties go to the first index."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool_time expects [batch, feat, time], got {x.shape}")
    if x.shape[2] < 1:
        raise DimensionError("max_pool_time: empty time axis")
    idx = np.argmax(x.data, axis=2)
    out = np.take_along_axis(x.data, idx[..., None], axis=2)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx,)

    return _make(out, (x,), back, "max_pool_time")


def segment_bounds(time, segments):
    """Contiguous near-equal partition of ``range(time)`` into ``segments`` bins."""
    if segments < 1:
        raise ValueError(f"segments must be >= 1, got {segments}")
    if segments > time:
        raise ValueError(f"segments ({segments}) exceeds time length ({time})")
    edges = [(i * time) // segments for i in range(segments + 1)]
    return list(zip(edges[:-1], edges[1:]))


def adaptive_max_pool_assign(x, segments):
    """Max-pool each time bin and write the bin maximum back to every position in it."""
    if x.ndim != 3:
        raise DimensionError(f"adaptive_max_pool_assign expects [batch, feat, time], got {x.shape}")
    bounds = segment_bounds(x.shape[2], segments)
    out = np.empty_like(x.data)
    argmaxes = []
    for lo, hi in bounds:
        a = lo + np.argmax(x.data[:, :, lo:hi], axis=2)
        argmaxes.append(a)
        out[:, :, lo:hi] = np.take_along_axis(x.data, a[..., None], axis=2)

    def back(g):
        gx = np.zeros_like(x.data)
        for (lo, hi), a in zip(bounds, argmaxes):
            gsum = g[:, :, lo:hi].sum(axis=2, keepdims=True)
            np.put_along_axis(gx, a[..., None], gsum, axis=2)
        return (gx,)

    return _make(out, (x,), back, "adaptive_max_pool_assign")


def mse_sum(pred, target):
    """Sum of squared errors between two tensors of equal shape."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return tsum(square(sub(pred, target)))


# ---------------------------------------------------------------- checking


def numerical_grad(f, inputs, k, epsilon=1e-5):
    x = inputs[k].data
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(*inputs).item()
        flat[i] = orig - epsilon
        fm = f(*inputs).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * epsilon)
    return g


def grad_check(f, inputs, epsilon=1e-5, reduction="element"):
    """Largest relative error between autodiff and central differences.

    ``f`` maps the tensors in ``inputs`` to a scalar tensor.  With
    ``reduction="element"`` each element is compared as
    ``|a - n| / max(|a|, |n|, floor)`` where the floor is a tiny fraction of
    the overall gradient scale, so exact zeros compare cleanly.  With
    ``"norm"`` each input scores ``||a - n|| / max(||a||, ||n||)``; use this
    for large graphs where some elements have gradients near the
    finite-difference roundoff level.
    """
    if reduction not in ("element", "norm"):
        raise ValueError(f"unknown reduction {reduction!r}")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = numerical_grad(f, inputs, k, epsilon)
        if reduction == "norm":
            denom = max(np.linalg.norm(auto), np.linalg.norm(num))
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(auto - num) / denom))
            continue
        scale = max(np.abs(auto).max(initial=0.0), np.abs(num).max(initial=0.0))
        floor = 1e-7 * scale + 1e-300
        denom = np.maximum(np.maximum(np.abs(auto), np.abs(num)), floor)
        worst = max(worst, float((np.abs(auto - num) / denom).max(initial=0.0)))
    return worst
