"""A small reverse-mode autodiff engine over dense numpy arrays.

Only the operations the CRNN and its losses need are provided. Every op
builds a node holding its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks the tape in reverse
topological order.

Gradients are recomputed from scratch on each :func:`backward` call and
written to ``.grad`` (overwriting), so calling it twice on the same tape
gives identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoRunningStats, NotScalar, NumericError, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.parents = parents
    out.backward_fn = backward_fn
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise / broadcasting -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def safe_div(num, den, tiny: float = 1e-12):
    """``num / den`` where ``den >= tiny``; 0 (with zero gradient) elsewhere."""
    num, den = as_tensor(num), as_tensor(den)
    ok = den.data >= tiny
    safe_den = np.where(ok, den.data, 1.0)
    out = np.where(ok, num.data / safe_den, 0.0)

    def bw(g):
        g = np.where(ok, g, 0.0)
        return _unbroadcast(g / safe_den, num.shape), _unbroadcast(-g * out / safe_den, den.shape)

    return _node(out, (num, den), bw, "safe_div")


def square(x):
    x = as_tensor(x)
    return _node(x.data**2, (x,), lambda g: (2.0 * g * x.data,), "square")


def log(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):  # the finiteness guard reports it
        out = np.log(x.data)
    return _node(out, (x,), lambda g: (g / x.data,), "log")


def clip(x, lo: float, hi: float):
    """Clamp; gradient passes only where ``lo <= x <= hi``."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a, b):
    """Elementwise min; at ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _node(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def sigmoid(x):
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# reductions and shape ops ---------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), bw, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), bw, "stack")


# linear algebra -------------------------------------------------------------


def matmul(a, b):
    """``a [..., k] @ b [k, m]``; ``b`` must be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def dense(x, W, b):
    return add(matmul(x, W), b)


# convolution and pooling ----------------------------------------------------


def _im2col(xp, kh, kw, H, W):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: [B, Cin, H, W, kh, kw] -> [B, H, W, Cin, kh, kw]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0] * H * W, -1)


def conv2d_same(x, kernels, bias):
    """Stride-1 zero-padded cross-correlation.

    ``x`` is ``[B, C_in, H, W]`` (or ``[C_in, H, W]``), ``kernels`` is
    ``[C_out, C_in, kh, kw]`` with odd spatial sizes, ``bias`` is ``[C_out]``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim == 3:
        return reshape(conv2d_same(reshape(x, (1,) + x.shape), kernels, bias), _drop_first(x, kernels))
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin or kh % 2 == 0 or kw % 2 == 0 or bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d_same input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, H, W)
    kmat = kernels.data.reshape(cout, -1)
    out = (cols @ kmat.T + bias.data).reshape(B, H, W, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ kmat).reshape(B, H, W, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + H, j : j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, ph : ph + H, pw : pw + W], gk, gb

    return _node(np.ascontiguousarray(out), (x, kernels, bias), bw, "conv2d_same")


def _drop_first(x, kernels):
    return (kernels.shape[0],) + x.shape[1:]


def maxpool_spectral(x, k: int, s: int | None = None, return_argmax: bool = False):
    """Max over ``k`` consecutive rows of axis -2 (the spectral axis), stride ``s``.

    Only non-overlapping pooling (``k == s``) is supported. Ties send the
    gradient to the first maximal row.
    """
    x = as_tensor(x)
    s = k if s is None else s
    H = x.shape[-2]
    if k != s or H % s != 0:
        raise ShapeMismatch(f"cannot pool height {H} with k={k}, s={s}")
    lead, W = x.shape[:-2], x.shape[-1]
    blocks = x.data.reshape(lead + (H // s, s, W))
    arg = blocks.argmax(axis=-2)
    out = np.take_along_axis(blocks, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None, :], g[..., None, :], axis=-2)
        return (gb.reshape(x.shape),)

    node = _node(out, (x,), bw, "maxpool_spectral")
    return (node, arg) if return_argmax else node


# normalization and regularization ------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics; ``count`` is the number of train-mode updates seen."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def zeros(cls, n: int, **kw) -> BatchNormState:
        return cls(np.zeros(n), np.ones(n), **kw)


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train", axis: int = 1):
    """Normalize each feature along ``axis`` over all other axes.

    Train mode uses batch statistics and folds them into ``state``
    (the first update copies them; later ones use ``momentum``). Infer
    mode uses the running statistics only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gm, bt = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    eps = state.eps

    if mode == "infer":
        if state.count == 0:
            raise NoRunningStats("batchnorm running statistics were never updated")
        inv = 1.0 / np.sqrt(state.var.reshape(bshape) + eps)
        xhat = (x.data - state.mean.reshape(bshape)) * inv

        def bw_inf(g):
            return g * gm * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return _node(gm * xhat + bt, (x, gamma, beta), bw_inf, "batchnorm")

    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    mu = x.data.mean(axis=red, keepdims=True)
    var = x.data.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    n = x.data.size // x.shape[axis]

    if state.count == 0:
        state.mean[...] = mu.reshape(-1)
        state.var[...] = var.reshape(-1)
    else:
        state.mean[...] = state.momentum * state.mean + (1 - state.momentum) * mu.reshape(-1)
        state.var[...] = state.momentum * state.var + (1 - state.momentum) * var.reshape(-1)
    state.count += 1

    def bw(g):
        dxhat = g * gm
        dx = (inv / n) * (
            n * dxhat - dxhat.sum(axis=red, keepdims=True) - xhat * (dxhat * xhat).sum(axis=red, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _node(gm * xhat + bt, (x, gamma, beta), bw, "batchnorm")


def dropout(x, rate: float, rng: np.random.Generator | None = None, mode: str = "train"):
    """Inverted dropout: train keeps each entry with prob ``1 - rate`` and rescales."""
    x = as_tensor(x)
    if mode != "train" or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# recurrent cell -------------------------------------------------------------


def gru_step(x_proj, h_prev, U_gates, U_cand, hidden: int):
    """One GRU update from a precomputed input projection.

    ``x_proj`` holds ``x W + b`` for the update, reset and candidate blocks
    (``[..., 3H]``); ``U_gates`` is ``[H, 2H]`` and ``U_cand`` is ``[H, H]``.
    """
    H = hidden
    gates = add(x_proj[..., : 2 * H], matmul(h_prev, U_gates))
    z = sigmoid(gates[..., :H])
    r = sigmoid(gates[..., H:])
    cand = tanh(add(x_proj[..., 2 * H :], matmul(mul(r, h_prev), U_cand)))
    # (1 - z) * h + z * cand
    return add(h_prev, mul(z, sub(cand, h_prev)))


def gru_cell(x_t, h_prev, W, U, b):
    """Standard GRU (reset gate applied to the state before the recurrent matrix).

    ``W`` is ``[F, 3H]``, ``U`` is ``[H, 3H]``, ``b`` is ``[3H]``; the three
    column blocks are the update gate, reset gate and candidate.
    """
    W, U = as_tensor(W), as_tensor(U)
    H = U.shape[0]
    if W.shape[1] != 3 * H or U.shape[1] != 3 * H or as_tensor(x_t).shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"gru_cell W {W.shape}, U {U.shape}")
    return gru_step(dense(x_t, W, b), as_tensor(h_prev), U[:, : 2 * H], U[:, 2 * H :], H)
