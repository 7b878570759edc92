"""Dense float64 tensors with a define-by-run reverse-mode tape.

Usage::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)
    grads[w]            # -> array([2., 2., 2.])

Operations executed while a tape is active record a node whenever at least
one input requires a gradient.  Outside a tape the same operations run in
plain inference mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "gather_rowdot",
    "tsum",
    "mean",
    "exp",
    "cos",
    "sqrt",
    "square",
    "tabs",
    "norm2",
    "activation",
    "shifted_softplus",
    "silu",
    "gather",
    "scatter_add",
    "global_mean_pool",
    "segment_norm",
    "conv1d_nodes",
    "spmv",
    "reshape",
    "transpose",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array plus an optional gradient flag."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __hash__ = object.__hash__
    # make ndarray <op> Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Gradients:
    """Mapping from tensors to gradient arrays (zeros when unreached)."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._owners.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order and the backward sweep is a single reverse pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise TapeError("backward already called on this tape; re-run the forward pass")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise TapeError("tape is empty")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        return Gradients(grads, owners)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check(arr: np.ndarray, opname: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {opname}")
    return arr


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, opname: str) -> Tensor:
    _check(arr, opname)
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _emit(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` recorded as a single node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _emit(out, (x, weight), lambda g: (g @ wd.T, xd.T @ g), "linear")
    bias = as_tensor(bias)
    out += bias.data
    return _emit(out, (x, weight, bias),
                 lambda g: (g @ wd.T, xd.T @ g, _unbroadcast(g, bias.shape)), "linear")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def spmv(matrix, x) -> Tensor:
    """Product of a constant (sparse or dense) symmetric-or-not matrix with ``x``."""
    x = as_tensor(x)
    mt = matrix.T
    return _emit(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),), "spmv")


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / count)


def norm2(a) -> Tensor:
    """Euclidean norm of all entries; the subgradient at zero is taken as 0."""
    a = as_tensor(a)
    ad = a.data
    n = float(np.sqrt(np.sum(ad * ad)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return _emit(np.asarray(n), (a,), vjp, "norm2")


# -- elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tabs(a) -> Tensor:
    """Absolute value with sign(0) = 0 as the subgradient."""
    a = as_tensor(a)
    ad = a.data
    return _emit(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


_LN2 = float(np.log(2.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def shifted_softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    e = np.exp(-np.abs(ad))
    d = 1.0 + e
    out = np.maximum(ad, 0.0) + np.log(d) - _LN2

    def vjp(g):
        return (g * np.where(ad >= 0.0, 1.0, e) / d,)

    return _emit(out, (a,), vjp, "shifted_softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _emit(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "silu")


def activation(a, kind: str = "shifted-softplus") -> Tensor:
    if kind in ("shifted-softplus", "ssp"):
        return shifted_softplus(a)
    if kind == "silu":
        return silu(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- indexing over nodes and edges -------------------------------------------

def gather(a, index) -> Tensor:
    """Rows ``a[index]``; the adjoint scatters gradients back with addition."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    return _emit(a.data[idx], (a,), lambda g: (_segment_sum(g, idx, shape[0]),), "gather")


def gather_rowdot(a, index, matrix) -> Tensor:
    """``out[i] = sum_j a[index[i], j] * matrix[i, j]`` for a constant ``matrix``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    M = np.asarray(matrix, dtype=np.float64)
    rows = a.shape[0]
    out = np.einsum("ij,ij->i", a.data[idx], M)
    return _emit(out, (a,), lambda g: (_segment_sum(g[:, None] * M, idx, rows),), "gather_rowdot")


def _segment_sum(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=size)
    flat = values.reshape(len(values), int(np.prod(values.shape[1:])))
    m, c = flat.shape
    if m * c <= 4096:
        out = np.zeros((size, c))
        np.add.at(out, index, flat)
    elif c <= 12:
        out = np.empty((size, c))
        for j in range(c):
            out[:, j] = np.bincount(index, weights=flat[:, j], minlength=size)
    else:
        incidence = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(size, m))
        out = np.asarray(incidence @ flat)
    return out.reshape((size,) + values.shape[1:])


def scatter_add(a, index, size: int) -> Tensor:
    """Sum rows of ``a`` into ``size`` buckets given by ``index``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    out = _segment_sum(a.data, idx, size)
    return _emit(out, (a,), lambda g: (g[idx],), "scatter_add")


def segment_norm(a, index, size: int) -> Tensor:
    """Per-segment Euclidean norm of a 1-D tensor (zero subgradient at 0)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    ad = a.data
    out = np.sqrt(np.bincount(idx, weights=ad * ad, minlength=size))

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return (ad * scale[idx],)

    return _emit(out, (a,), vjp, "segment_norm")


def global_mean_pool(h, graph_index, n_graphs: int | None = None) -> Tensor:
    """Per-graph mean over member nodes (graph ids contiguous in [0, G))."""
    idx = np.asarray(graph_index, dtype=np.intp)
    G = int(idx.max()) + 1 if n_graphs is None else int(n_graphs)
    counts = np.bincount(idx, minlength=G).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("global_mean_pool: empty graph in batch")
    summed = scatter_add(h, idx, G)
    inv = 1.0 / counts
    if summed.ndim == 2:
        inv = inv[:, None]
    return mul(summed, inv)


def conv1d_nodes(h, kernel, graph_index=None) -> Tensor:
    """Cross-correlation along the node axis with 'same' zero padding.

    ``h`` is (n, C_in), ``kernel`` is (K, C_in, C_out) with K odd.  When
    ``graph_index`` is given, node windows never reach across graph
    boundaries (each graph is padded independently).
    """
    h, kernel = as_tensor(h), as_tensor(kernel)
    K = kernel.shape[0]
    if K % 2 == 0:
        raise ValueError(f"conv1d_nodes needs an odd kernel size, got {K}")
    if h.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != h.shape[1]:
        raise ValueError(f"conv1d_nodes shape mismatch: {h.shape} vs {kernel.shape}")
    hd, kd = h.data, kernel.data
    n = hd.shape[0]
    if K == 1:
        w = kd[0]
        return _emit(hd @ w, (h, kernel), lambda g: (g @ w.T, (hd.T @ g)[None]), "conv1d_nodes")
    half = K // 2
    gidx = None if graph_index is None else np.asarray(graph_index)

    # shifted[o] holds h[i + o - half] or zero when out of range / other graph
    shifted = []
    for o in range(K):
        s = o - half
        buf = np.zeros_like(hd)
        if s == 0:
            buf[:] = hd
        elif s > 0:
            buf[: n - s] = hd[s:]
            if gidx is not None:
                buf[: n - s][gidx[s:] != gidx[: n - s]] = 0.0
        else:
            buf[-s:] = hd[: n + s]
            if gidx is not None:
                buf[-s:][gidx[: n + s] != gidx[-s:]] = 0.0
        shifted.append(buf)
    out = sum(shifted[o] @ kd[o] for o in range(K))

    def vjp(g):
        gk = np.stack([shifted[o].T @ g for o in range(K)])
        gh = np.zeros_like(hd)
        for o in range(K):
            s = o - half
            gs = g @ kd[o].T  # gradient w.r.t. shifted[o]
            if s == 0:
                gh += gs
            elif s > 0:
                part = gs[: n - s].copy()
                if gidx is not None:
                    part[gidx[s:] != gidx[: n - s]] = 0.0
                gh[s:] += part
            else:
                part = gs[-s:].copy()
                if gidx is not None:
                    part[gidx[: n + s] != gidx[-s:]] = 0.0
                gh[: n + s] += part
        return gh, gk

    return _emit(out, (h, kernel), vjp, "conv1d_nodes")
