"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run graph engine: every Tensor stores its value, its
parents and the VJP closure of the operation that produced it.  Only the
operations needed by the field models are provided, and shapes are strict --
the single allowed broadcast is the bias add of a (D,) vector over the batch
axis of an (N, D) matrix.  All math runs in float64 so finite-difference
gradient checks are meaningful.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "rowscale",
    "matmul",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "sin",
    "softmax",
    "tsum",
    "tmean",
    "gather_rows",
    "gather_interpolate",
    "take_column",
    "take_columns",
    "concat_columns",
    "concat_rows",
    "reshape",
    "exclusive_cumsum",
    "clamp",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """Graph node: a float64 ndarray plus the VJP rule that produced it.

    Leaf tensors are either constants (requires_grad False) or parameters
    (requires_grad True).  Values are immutable once built into a graph;
    optimizers may rewrite leaf ``.data`` between steps.

    ``vjp_into``, when set, is an in-place alternative to ``vjp`` used by
    backward(): it receives (g, buffers) where buffers maps parent Tensors
    to preallocated gradient accumulators, and returns grads only for the
    parents it did not handle in place.  Table-sized scatter gradients use
    it to avoid one full-size allocation per graph node.
    """

    __slots__ = ("data", "op", "parents", "vjp", "vjp_into",
                 "requires_grad", "name")

    def __init__(self, data, op="const", parents=(), vjp=None,
                 requires_grad=False, name=None, vjp_into=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.vjp_into = vjp_into
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(data, name=None):
    """Leaf tensor that never receives a gradient."""
    return Tensor(data, op="const", name=name)


def parameter(data, name=None):
    """Leaf tensor tracked by backward()."""
    return Tensor(data, op="param", requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _shape_err(op, *shapes):
    listed = " and ".join(str(s) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {listed}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    """Elementwise add; also accepts an (N, D) + (D,) bias broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
    else:
        raise _shape_err("add", a.shape, b.shape)
    return Tensor(a.data + b.data, op="add", parents=(a, b), vjp=vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return Tensor(a.data - b.data, op="sub", parents=(a, b),
                  vjp=lambda g: (g, -g))


def neg(a):
    return Tensor(-a.data, op="neg", parents=(a,), vjp=lambda g: (-g,))


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    return Tensor(a.data * b.data, op="mul", parents=(a, b),
                  vjp=lambda g: (g * b.data, g * a.data))


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    return Tensor(a.data * c, op="scale", parents=(a,),
                  vjp=lambda g: (g * c,))


def rowscale(x, s):
    """Scale each row of (N, F) by the matching entry of (N,)."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise _shape_err("rowscale", x.shape, s.shape)
    return Tensor(x.data * s.data[:, None], op="rowscale", parents=(x, s),
                  vjp=lambda g: (g * s.data[:, None], (g * x.data).sum(axis=1)))


def matmul(a, b):
    """(N, K) @ (K, M) -> (N, M); also (N, K) @ (K,) -> (N,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g @ b.data.T, a.data.T @ g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return np.outer(g, b.data), a.data.T @ g
    else:
        raise _shape_err("matmul", a.shape, b.shape)
    return Tensor(a.data @ b.data, op="matmul", parents=(a, b), vjp=vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), op="relu", parents=(a,),
                  vjp=lambda g: (g * mask,))


def sigmoid(a):
    # Stable two-sided form; never overflows.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(y, op="sigmoid", parents=(a,),
                  vjp=lambda g: (g * y * (1.0 - y),))


def softplus(a):
    y = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return Tensor(y, op="softplus", parents=(a,),
                  vjp=lambda g: (g * sig,))


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError(
            f"exp: non-finite output for input with max {a.data.max()}")
    return Tensor(y, op="exp", parents=(a,), vjp=lambda g: (g * y,))


def sin(a):
    return Tensor(np.sin(a.data), op="sin", parents=(a,),
                  vjp=lambda g: (g * np.cos(a.data),))


def softmax(a):
    """Softmax over the last axis of a 2D tensor."""
    if a.data.ndim != 2:
        raise _shape_err("softmax", a.shape)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Tensor(y, op="softmax", parents=(a,), vjp=vjp)


def clamp(a, lo=0.0, hi=1.0):
    """Clamp values to [lo, hi]; gradient is zero in the clamped region."""
    mask = (a.data > lo) & (a.data < hi)
    return Tensor(np.clip(a.data, lo, hi), op="clamp", parents=(a,),
                  vjp=lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and layout


def tsum(a, axis=None):
    """Sum over all elements (scalar) or over one axis."""
    if axis is None:
        return Tensor(a.data.sum(), op="sum", parents=(a,),
                      vjp=lambda g: (np.full(a.shape, float(g)),))
    if not (0 <= axis < a.data.ndim):
        raise ValueError(f"sum: axis {axis} out of range for shape {a.shape}")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis), op="sum", parents=(a,), vjp=vjp)


def tmean(a):
    n = a.data.size
    return Tensor(a.data.mean(), op="mean", parents=(a,),
                  vjp=lambda g: (np.full(a.shape, float(g) / n),))


def gather_rows(table, idx):
    """out[n] = table[idx[n]]; gradient scatter-adds into the table."""
    if table.data.ndim != 2:
        raise _shape_err("gather_rows", table.shape)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows: index must be 1D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: index out of range for table {table.shape}")

    def vjp(g):
        acc = np.zeros(table.shape)
        np.add.at(acc, idx, g)
        return (acc,)

    return Tensor(table.data[idx], op="gather_rows", parents=(table,), vjp=vjp)


def gather_interpolate(table, idx, weights):
    """Fused gather-interpolate: out[n] = sum_k weights[n,k] * table[idx[n,k]].

    table is (M, C), idx a constant (N, K) int array, weights an (N, K)
    tensor.  One graph node instead of K gathers plus blends; the gradient
    scatter-adds into the table and contracts against the gathered rows for
    the weights.
    """
    if table.data.ndim != 2 or weights.data.ndim != 2:
        raise _shape_err("gather_interpolate", table.shape, weights.shape)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != weights.shape:
        raise ValueError(
            f"gather_interpolate: index shape {idx.shape} vs weight shape "
            f"{weights.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather_interpolate: index out of range for table {table.shape}")
    gathered = table.data[idx]  # (N, K, C)
    out = np.einsum("nk,nkc->nc", weights.data, gathered)

    def vjp(g):
        if table.requires_grad:
            acc = np.zeros(table.shape)
            np.add.at(acc, idx.ravel(),
                      (weights.data[..., None] * g[:, None, :])
                      .reshape(-1, table.shape[1]))
        else:
            acc = None
        return acc, np.einsum("nc,nkc->nk", g, gathered)

    def vjp_into(g, buffers):
        if table.requires_grad:
            np.add.at(buffers[table], idx.ravel(),
                      (weights.data[..., None] * g[:, None, :])
                      .reshape(-1, table.shape[1]))
        return None, np.einsum("nc,nkc->nk", g, gathered)

    return Tensor(out, op="gather_interpolate", parents=(table, weights),
                  vjp=vjp, vjp_into=vjp_into)


def concat_rows(parts):
    """Stack (N_i, C) tensors along axis 0."""
    parts = list(parts)
    widths = {p.shape[1] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise _shape_err("concat_rows", *[p.shape for p in parts])
    counts = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def vjp(g):
        return tuple(g[lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:]))

    return Tensor(np.concatenate([p.data for p in parts], axis=0),
                  op="concat_rows", parents=tuple(parts), vjp=vjp)


def take_column(x, j):
    """Column j of an (N, C) tensor as (N,)."""
    if x.data.ndim != 2 or not (0 <= j < x.shape[1]):
        raise ValueError(f"take_column: column {j} invalid for shape {x.shape}")

    def vjp(g):
        acc = np.zeros(x.shape)
        acc[:, j] = g
        return (acc,)

    return Tensor(x.data[:, j].copy(), op="take_column", parents=(x,), vjp=vjp)


def take_columns(x, cols):
    """Columns of an (N, C) tensor in the given order (repeats allowed)."""
    cols = [int(c) for c in cols]
    if x.data.ndim != 2 or any(not 0 <= c < x.shape[1] for c in cols):
        raise ValueError(f"take_columns: columns {cols} invalid for {x.shape}")

    def vjp(g):
        acc = np.zeros(x.shape)
        for k, c in enumerate(cols):
            acc[:, c] += g[:, k]
        return (acc,)

    return Tensor(x.data[:, cols].copy(), op="take_columns", parents=(x,),
                  vjp=vjp)


def concat_columns(parts):
    """Concatenate along axis 1; (N,) inputs are treated as (N, 1)."""
    parts = [_as_tensor(p) for p in parts]
    mats = [p.data if p.data.ndim == 2 else p.data[:, None] for p in parts]
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise _shape_err("concat_columns", *[p.shape for p in parts])
    widths = [m.shape[1] for m in mats]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        outs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = g[:, lo:hi]
            outs.append(piece if p.data.ndim == 2 else piece[:, 0])
        return tuple(outs)

    return Tensor(np.concatenate(mats, axis=1), op="concat_columns",
                  parents=tuple(parts), vjp=vjp)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    return Tensor(a.data.reshape(shape), op="reshape", parents=(a,),
                  vjp=lambda g: (g.reshape(a.shape),))


def _shifted_cumsum(x, axis):
    # Exclusive cumsum via shift, not subtraction: entry i must be exactly
    # independent of x_i (no rounding residue) for finite-difference checks.
    inc = np.cumsum(x, axis=axis)
    pad = list(x.shape)
    pad[axis] = 1
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, -1)
    return np.concatenate([np.zeros(pad), inc[tuple(sl)]], axis=axis)


def exclusive_cumsum(a, axis=1):
    """out[..., i] = sum of entries before i along the axis."""
    if not (0 <= axis < a.data.ndim):
        raise ValueError(
            f"exclusive_cumsum: axis {axis} invalid for shape {a.shape}")

    def vjp(g):
        # dL/dx_j = sum of g_i over i > j, i.e. a reversed exclusive cumsum.
        rev = np.flip(_shifted_cumsum(np.flip(g, axis=axis), axis), axis=axis)
        return (rev,)

    return Tensor(_shifted_cumsum(a.data, axis), op="exclusive_cumsum",
                  parents=(a,), vjp=vjp)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def _topo_order(root):
    """Postorder over the requires_grad subgraph; deterministic, iterative."""
    order = []
    seen = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Gradients of a scalar loss.

    Returns a dict mapping leaf parameter Tensors to ndarray gradients.  If
    ``params`` is given, every listed parameter appears in the result and
    unreachable ones get zeros; otherwise all reachable parameters are
    returned.  Each node's VJP runs exactly once, in reverse topological
    order.
    """
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.asarray(1.0)}
    order = _topo_order(loss)
    # shared accumulators for in-place scatter gradients (leaf tables)
    buffers = {}
    for node in order:
        if node.vjp_into is not None:
            t = node.parents[0]
            if t.requires_grad and t.vjp is None and t not in buffers:
                buffers[t] = np.zeros(t.shape)
    out = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.vjp is None:
            if not node.requires_grad:
                continue
            buf = buffers.get(node)
            if buf is not None:
                if g is not None:
                    buf += g
                out[node] = buf
            elif g is not None:
                out[node] = np.asarray(g, dtype=np.float64).reshape(node.shape)
            continue
        if g is None:
            continue
        if node.vjp_into is not None and (node.parents[0] in buffers
                                          or not node.parents[0].requires_grad):
            parent_grads = node.vjp_into(g, buffers)
        else:
            parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            have = grads.get(id(p))
            grads[id(p)] = pg if have is None else have + pg
    if params is not None:
        out = {p: out.get(p, np.zeros(p.shape)) for p in params}
    return out


def finite_diff_check(f, params, eps=1e-5, max_coords=64, rng=None):
    """Worst relative error between backward() and central differences.

    ``f`` maps the parameter list to a scalar Tensor.  For each parameter, up
    to ``max_coords`` coordinates are probed (all of them when the parameter
    is small).  The error metric is
    |analytic - central| / max(1e-12, |analytic| + |central|).
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    loss = f(params)
    if not np.isfinite(loss.data):
        raise FloatingPointError("finite_diff_check: non-finite base loss")
    grads = backward(loss, params=params)
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        g = grads[p].ravel()
        n = p.data.size
        if n <= max_coords:
            coords = range(n)
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False))
        flat = p.data.ravel()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f(params).item()
            flat[c] = orig - eps
            fm = f(params).item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"finite_diff_check: non-finite evaluation at parameter "
                    f"{p.name or p.op} coordinate {c}")
            central = (fp - fm) / (2.0 * eps)
            ana = g[c]
            err = abs(ana - central) / max(1e-12, abs(ana) + abs(central))
            worst = max(worst, err)
    return worst
