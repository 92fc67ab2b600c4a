"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the primitives needed by the cry classifier and the adaptation losses
are provided. Every differentiable call appends one node to the active
:class:`Graph`; :func:`backward` walks that graph in reverse creation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class BatchSizeError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense array that can take part in a differentiation graph.

    Arrays are stored as float32 unless a float64 array is passed in, which
    gradient checking relies on.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "released")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        self.released = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    index: int = 0
    graph: Optional["Graph"] = field(default=None, repr=False)


class Graph:
    """Creation-ordered record of primitive applications.

    Nodes are kept until :meth:`reset` is called, so the same graph can be
    differentiated several times. Use as a context manager to scope one
    training step::

        with Graph():
            loss = ...
            backward(loss)
    """

    _stack: list = []

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.graph = self
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.output.node = None
            node.output.released = True
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()
        self.reset()


_global_graph = Graph()


def current_graph() -> Graph:
    return Graph._stack[-1] if Graph._stack else _global_graph


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn)
        current_graph().record(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf that ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediate gradients do not.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.released:
            raise ContractError("loss belongs to a graph that has been reset")
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    graph = loss.node.graph
    if graph is None or loss.node.index >= len(graph.nodes) or graph.nodes[loss.node.index] is not loss.node:
        raise ContractError("loss node is not part of a live graph")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.node.index + 1]):
        grad_out = pending.pop(id(node.output), None)
        if grad_out is None:
            continue
        grads = node.backward_fn(grad_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, g)
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c_arr = x.data.dtype.type(c)
    return _emit("scale", x.data * c_arr, (x,), lambda g: (g * c_arr,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.data.dtype
    return _emit("sum", np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),))


def mean_all(x: Tensor) -> Tensor:
    shape, dt, n = x.shape, x.data.dtype, x.data.size
    out = np.asarray(x.data.sum() / n, dtype=dt)
    return _emit("mean", out, (x,), lambda g: (np.full(shape, g / n, dtype=dt),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _emit("getitem", np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    return concat([_reshape(v, (1,)) for v in values], axis=0)


def _reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


reshape = _reshape


def take_rows(x: Tensor, cols: np.ndarray) -> Tensor:
    """Pick ``x[i, cols[i]]`` for every row ``i``."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape, dt = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[rows, cols] = g
        return (full,)

    return _emit("take_rows", x.data[rows, cols], (x,), bw)


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"grad_reverse lambda must be >= 0, got {lam}")
    factor = x.data.dtype.type(-lam)
    return _emit("grad_reverse", x.data, (x,), lambda g: (g * factor,))


# --------------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear: x{x.shape} w{w.shape} b{b.shape} do not conform")
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit("linear", xd @ wd + b.data, (x, w, b), bw)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0, channels_last: bool = False) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``k[F,C,kh,kw]`` (no bias).

    With ``channels_last`` the input and output are ``[B,H,W,C]``; the kernel
    layout is unchanged.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {k.shape} must be 4-D")
    if channels_last:
        B, H, W, C = x.shape
    else:
        B, C, H, W = x.shape
    F, Ck, kh, kw = k.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input {x.shape} has {C} channels, kernel {k.shape} expects {Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than padded input {(Hp, Wp)}")
    s = stride
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    xd = x.data if channels_last else x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    # windows: [B,Ho,Wo,C,kh,kw] -> rows ordered (kh,kw,C) to keep channel runs contiguous
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    kmat = k.data.transpose(0, 2, 3, 1).reshape(F, -1)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, F)
    if not channels_last:
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    saved_cols = cols if k.requires_grad else None

    def bw(g):
        gl = g if channels_last else g.transpose(0, 2, 3, 1)
        gr = gl.reshape(-1, F)
        gk = None
        if k.requires_grad:
            gk = (gr.T @ saved_cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gr @ kmat).reshape(B, Ho, Wo, kh, kw, C)
            dxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, :, i, j]
            gx = dxp[:, padding : padding + H, padding : padding + W] if padding else dxp
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
        return gx, gk

    return _emit("conv2d", out, (x, k), bw)


def max_pool2d(x: Tensor, size: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping max pooling; rows/columns that do not fill a window are dropped.

    Ties go to the first window position in row-major order.
    """
    if channels_last:
        B, H, W, C = x.shape
    else:
        B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"max_pool2d: input {x.shape} smaller than window {size}")

    def view(a, i, j):
        if channels_last:
            return a[:, i : Ho * size : size, j : Wo * size : size]
        return a[:, :, i : Ho * size : size, j : Wo * size : size]

    offsets = [(i, j) for i in range(size) for j in range(size)]
    out = view(x.data, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(out, view(x.data, i, j), out=out)

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in offsets:
            hit = (view(x.data, i, j) == out) & ~taken
            view(full, i, j)[...] = np.where(hit, g, 0)
            taken |= hit
        return (full,)

    return _emit("max_pool2d", out, (x,), bw)


def global_mean_pool(x: Tensor, channels_last: bool = False) -> Tensor:
    """Average a ``[B,C,H,W]`` (or ``[B,H,W,C]``) map over its spatial axes to ``[B,C]``."""
    axes = (1, 2) if channels_last else (2, 3)
    n = x.shape[axes[0]] * x.shape[axes[1]]
    dt = x.data.dtype
    out = x.data.mean(axis=axes, dtype=dt)

    def bw(g):
        gg = g / dt.type(n)
        gg = gg[:, None, None, :] if channels_last else gg[:, :, None, None]
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _emit("global_mean_pool", out, (x,), bw)


@dataclass
class BNState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, n_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE) -> "BNState":
        return cls(
            gamma=Tensor(np.ones(n_features, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(n_features, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(n_features, dtype=dtype),
            running_var=np.ones(n_features, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


BN_MODES = ("train", "eval", "stats-only")


def batchnorm(x: Tensor, state: BNState, mode: str = "train", channels_last: bool = False) -> Tensor:
    """Batch normalization over ``[B,F]`` or per channel of ``[B,C,H,W]``.

    ``stats-only`` normalizes with the running statistics (as ``eval``) but
    still folds the batch statistics into them, and records no graph node.
    """
    if mode not in BN_MODES:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim == 2:
        axes, bshape, fdim = (0,), (1, -1), 1
    elif x.ndim == 4 and channels_last:
        axes, bshape, fdim = (0, 1, 2), (1, 1, 1, -1), 3
    elif x.ndim == 4:
        axes, bshape, fdim = (0, 2, 3), (1, -1, 1, 1), 1
    else:
        raise DimensionError(f"batchnorm expects [B,F] or [B,C,H,W], got {x.shape}")
    if x.shape[fdim] != state.gamma.shape[0]:
        raise DimensionError(f"batchnorm: input {x.shape} vs {state.gamma.shape[0]} features")
    dt = x.data.dtype
    eps = dt.type(state.eps)
    C = x.shape[fdim]
    n = x.data.size // C
    if fdim == x.ndim - 1:
        ones = np.ones(n, dtype=dt)

        def chan_sum(a):
            return ones @ a.reshape(n, C)

    else:

        def chan_sum(a):
            return a.sum(axis=axes)

    if mode in ("train", "stats-only"):
        if x.shape[0] < 2:
            raise BatchSizeError(f"batchnorm in {mode} mode needs batch >= 2, got {x.shape[0]}")
        mu = chan_sum(x.data) / dt.type(n)
        centered = x.data - mu.reshape(bshape)
        var = chan_sum(centered * centered) / dt.type(n)
        m = state.momentum
        rdt = state.running_mean.dtype
        new_mean = ((1.0 - m) * state.running_mean + m * mu.astype(np.float64)).astype(rdt)
        new_var = ((1.0 - m) * state.running_var + m * var.astype(np.float64)).astype(rdt)
    if mode == "stats-only":
        inv = 1.0 / np.sqrt(state.running_var.astype(dt) + eps)
        y = (x.data - state.running_mean.astype(dt).reshape(bshape)) * (inv * state.gamma.data).reshape(bshape)
        y = y + state.beta.data.reshape(bshape)
        state.running_mean, state.running_var = new_mean, new_var
        return Tensor(y.astype(dt, copy=False))

    gamma, beta = state.gamma, state.beta
    if mode == "train":
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = centered * inv.reshape(bshape)
        del centered
        state.running_mean, state.running_var = new_mean, new_var

        def bw(g):
            gg = gb = gx = None
            sg = chan_sum(g)
            sgx = chan_sum(g * xhat)
            if gamma.requires_grad:
                gg = sgx
            if beta.requires_grad:
                gb = sg
            if x.requires_grad:
                # dx = gamma*inv/n * (n*g - sum(g) - xhat*sum(g*xhat))
                coef = (gamma.data * inv / dt.type(n)).reshape(bshape)
                gx = coef * (dt.type(n) * g - sg.reshape(bshape) - xhat * sgx.reshape(bshape))
            return gx, gg, gb

    else:
        inv = (1.0 / np.sqrt(state.running_var.astype(dt) + eps)).astype(dt)
        xhat = (x.data - state.running_mean.astype(dt).reshape(bshape)) * inv.reshape(bshape)

        def bw(g):
            gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
            gg = chan_sum(g * xhat) if gamma.requires_grad else None
            gb = chan_sum(g) if beta.requires_grad else None
            return gx, gg, gb

    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _emit("batchnorm", y.astype(dt, copy=False), (x, gamma, beta), bw)


# --------------------------------------------------------------------- losses


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit("log_softmax", out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax", p, (logits,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of ``[B,K]`` giving ``[B]``."""
    mx = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=1, keepdims=True)
    out = (mx + np.log(s))[:, 0]
    w = e / s
    return _emit("logsumexp", out, (x,), lambda g: (w * g[:, None],))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    B = logits.shape[0]
    dt = logits.data.dtype
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=dt)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / dt.type(B)),)

    return _emit("softmax_cross_entropy", loss, (logits,), bw)


def entropy(probs: Tensor, tol: float = 1e-5) -> Tensor:
    """Mean Shannon entropy (nats) of the rows of ``probs``; ``0 ln 0 = 0``."""
    p = probs.data
    if p.ndim != 2:
        raise DimensionError(f"entropy expects [B,K], got {p.shape}")
    if np.any(p < 0):
        raise NormalizationError("entropy: negative probability")
    dev = np.abs(p.sum(axis=1, dtype=np.float64) - 1.0)
    if np.any(dev > tol):
        raise NormalizationError(f"entropy: row sums deviate from 1 by up to {dev.max():.3g}")
    B = p.shape[0]
    dt = p.dtype
    pos = p > 0
    logp = np.log(np.where(pos, p, 1))
    out = np.asarray(-(p * logp).sum() / B, dtype=dt)

    def bw(g):
        return (np.where(pos, -(logp + 1), 0).astype(dt) * (g / dt.type(B)),)

    return _emit("entropy", out, (probs,), bw)


def feature_norm_penalty(f: Tensor, variant: str = "hard", radius: float = 30.0, delta_r: float = 0.2) -> Tensor:
    """Penalty on per-row L2 norms of an embedding batch.

    ``hard``: mean of (||f_i|| - radius)^2.
    ``stepwise``: mean of (||f_i|| - (sg(||f_i||) + delta_r))^2 where ``sg``
    blocks the gradient, so each call pushes norms up by about ``delta_r``.
    """
    if f.ndim != 2 or f.shape[0] < 1:
        raise DimensionError(f"feature_norm_penalty expects [B,D] with B >= 1, got {f.shape}")
    dt = f.data.dtype
    norms = np.sqrt((f.data.astype(np.float64) ** 2).sum(axis=1)).astype(dt)
    if variant == "hard":
        if radius <= 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        diff = norms - dt.type(radius)
    elif variant == "stepwise":
        if delta_r <= 0:
            raise ValueError(f"delta_r must be > 0, got {delta_r}")
        diff = norms - (norms + dt.type(delta_r))
    else:
        raise ValueError(f"unknown feature norm variant {variant!r}")
    B = f.shape[0]
    out = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=dt)
    safe = np.maximum(norms, np.finfo(dt).tiny)[:, None]

    def bw(g):
        coef = (dt.type(2) * diff / dt.type(B))[:, None] * g
        return (coef * f.data / safe,)

    return _emit("feature_norm_penalty", out, (f,), bw)


def row_norms(f: Tensor) -> np.ndarray:
    return np.sqrt((f.data.astype(np.float64) ** 2).sum(axis=1))
