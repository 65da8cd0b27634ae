"""Reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and remembers the closure that propagates gradients
to its parents; backward() replays the graph once in reverse topological
order.  Parameters and bulk math are float32; reductions (sum, mean, bias
sums inside affine) accumulate in float64 so means over large batches do
not drift, and the loss comes out as a float64 scalar.

Gradient conventions at kinks: ReLU and |x| take subgradient 0 at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Var", "backward", "as_var", "add", "sub", "mul", "div", "matmul",
    "affine", "relu", "exp", "log", "softplus", "square", "absolute",
    "huber", "vsum", "vmean", "reshape", "slice_cols", "concat_cols",
    "gather_rows", "Param", "ParamStore", "AdamHyper", "adam_step",
    "clip_global_norm", "finite_diff_grad",
]


class Var:
    """Node in the autodiff graph.

    `parents` and `bwd` form the extension point: custom ops construct a Var
    whose bwd closure adds into each parent's .grad (allocate with _acc).
    """

    __slots__ = ("data", "grad", "parents", "bwd")

    def __init__(self, data, parents=(), bwd=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        backward(self)

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _acc(var: Var, g):
    """Accumulate gradient g into var.grad, allocating on first touch."""
    if var.grad is None:
        var.grad = np.zeros(var.data.shape, dtype=var.data.dtype)
    var.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` after a broadcasted elementwise op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def backward(root: Var):
    """Accumulate d(root)/d(leaf) into every reachable Var's .grad."""
    if root.data.size != 1:
        raise ValueError("backward() needs a scalar root")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones(root.data.shape, dtype=root.data.dtype)
    for node in reversed(topo):
        if node.bwd is not None:
            node.bwd(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    out.bwd = bwd
    return out


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data - b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, -_unbroadcast(g, b.data.shape))

    out.bwd = bwd
    return out


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data * b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    out.bwd = bwd
    return out


def div(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data / b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out.bwd = bwd
    return out


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data @ b.data, (a, b))

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    out.bwd = bwd
    return out


def affine(x, w, b):
    """x @ w + b with the bias sum accumulated in float64."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    out = Var(x.data @ w.data + b.data, (x, w, b))

    def bwd(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0, dtype=np.float64).astype(b.data.dtype))

    out.bwd = bwd
    return out


def relu(x):
    x = as_var(x)
    out = Var(np.maximum(x.data, 0), (x,))

    def bwd(g):
        _acc(x, g * (x.data > 0))

    out.bwd = bwd
    return out


def exp(x):
    x = as_var(x)
    y = np.exp(x.data)
    out = Var(y, (x,))

    def bwd(g):
        _acc(x, g * y)

    out.bwd = bwd
    return out


def log(x):
    x = as_var(x)
    out = Var(np.log(x.data), (x,))

    def bwd(g):
        _acc(x, g / x.data)

    out.bwd = bwd
    return out


def softplus(x):
    """log(1 + e^x), evaluated stably for large |x|."""
    x = as_var(x)
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    out = Var(y, (x,))

    def bwd(g):
        # sigmoid(d) via exp(-|d|), stable on both tails
        t = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        _acc(x, (g * s).astype(d.dtype, copy=False))

    out.bwd = bwd
    return out


def square(x):
    x = as_var(x)
    out = Var(x.data * x.data, (x,))

    def bwd(g):
        _acc(x, g * 2 * x.data)

    out.bwd = bwd
    return out


def absolute(x):
    x = as_var(x)
    out = Var(np.abs(x.data), (x,))

    def bwd(g):
        _acc(x, g * np.sign(x.data))

    out.bwd = bwd
    return out


def huber(x, delta: float):
    """Elementwise Huber: x^2/2 inside |x| <= delta, linear outside."""
    x = as_var(x)
    a = np.abs(x.data)
    inside = a <= delta
    y = np.where(inside, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))
    out = Var(y.astype(x.data.dtype, copy=False), (x,))

    def bwd(g):
        d = np.where(inside, x.data, delta * np.sign(x.data))
        _acc(x, g * d)

    out.bwd = bwd
    return out


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    x = as_var(x)
    out = Var(np.clip(x.data, lo, hi), (x,))
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        _acc(x, g * inside)

    out.bwd = bwd
    return out


def vsum(x, axis=None):
    """Sum with float64 accumulation; result dtype is float64."""
    x = as_var(x)
    out = Var(np.sum(x.data, axis=axis, dtype=np.float64), (x,))

    def bwd(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape)
                 .astype(x.data.dtype))

    out.bwd = bwd
    return out


def vmean(x, axis=None):
    x = as_var(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Var(np.mean(x.data, axis=axis, dtype=np.float64), (x,))

    def bwd(g):
        gg = g / n
        if axis is None:
            _acc(x, np.broadcast_to(gg, x.data.shape).astype(x.data.dtype))
        else:
            _acc(x, np.broadcast_to(np.expand_dims(gg, axis), x.data.shape)
                 .astype(x.data.dtype))

    out.bwd = bwd
    return out


def reshape(x, shape):
    x = as_var(x)
    out = Var(x.data.reshape(shape), (x,))

    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    out.bwd = bwd
    return out


def slice_cols(x, j0: int, j1: int):
    x = as_var(x)
    out = Var(np.ascontiguousarray(x.data[:, j0:j1]), (x,))

    def bwd(g):
        gx = np.zeros(x.data.shape, dtype=g.dtype)
        gx[:, j0:j1] = g
        _acc(x, gx)

    out.bwd = bwd
    return out


def concat_cols(parts):
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    widths = [p.data.shape[1] for p in parts]

    def bwd(g):
        j = 0
        for p, w in zip(parts, widths):
            _acc(p, g[:, j:j + w])
            j += w

    out.bwd = bwd
    return out


def gather_rows(table, idx):
    """table[idx] for an int index array; backward scatters via bincount."""
    table = as_var(table)
    idx = np.asarray(idx)
    out = Var(table.data[idx], (table,))
    nrows = table.data.shape[0]

    def bwd(g):
        if g.ndim == 1:
            gt = np.bincount(idx, weights=g, minlength=nrows)
            _acc(table, gt.astype(table.data.dtype))
        else:
            gt = np.empty((nrows, g.shape[1]), dtype=np.float64)
            for c in range(g.shape[1]):
                gt[:, c] = np.bincount(idx, weights=g[:, c], minlength=nrows)
            _acc(table, gt.astype(table.data.dtype))

    out.bwd = bwd
    return out


# ---------------------------------------------------------------------------
# parameters and Adam

@dataclass
class Param:
    data: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named parameter groups plus Adam moments and one global step counter."""

    def __init__(self):
        self.groups: dict[str, Param] = {}
        self.step = 0

    def register(self, name: str, array, trainable: bool = True) -> np.ndarray:
        if name in self.groups:
            raise ValueError(f"duplicate parameter group {name!r}")
        data = np.asarray(array)
        self.groups[name] = Param(
            data, np.zeros_like(data), np.zeros_like(data), trainable)
        return data

    def __getitem__(self, name: str) -> Param:
        return self.groups[name]

    def leaves(self) -> dict[str, Var]:
        """Fresh leaf Vars for one forward/backward pass."""
        return {name: Var(p.data) for name, p in self.groups.items()}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.groups.values())


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, grads: dict, hyper: AdamHyper,
              lr_overrides: dict | None = None):
    """One bias-corrected Adam update over the given gradient dict.

    Frozen groups are skipped.  store.step advances by exactly 1 per call
    regardless of how many groups received gradients.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, g in grads.items():
        p = store.groups[name]
        if not p.trainable or g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.data.shape} for group {name!r}")
        lr = hyper.lr if lr_overrides is None else lr_overrides.get(name, hyper.lr)
        p.m *= hyper.beta1
        p.m += (1 - hyper.beta1) * g
        p.v *= hyper.beta2
        p.v += (1 - hyper.beta2) * (g * g)
        mhat = p.m / c1
        vhat = p.v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(p.data.dtype)


def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients so their joint L2 norm is <= max_norm.

    Returns (norm_before, clipped?).  Mutates the arrays in place.
    """
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            if g is not None:
                g *= scale
        return norm, True
    return norm, False


def finite_diff_grad(f, x, h: float = 1e-3):
    """Central finite differences of scalar f at x, step h*(1+|x_i|)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite value in finite difference probe")
        gflat[i] = (fp - fm) / (2 * step)
    return g
