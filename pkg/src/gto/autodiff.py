"""Dense rank-2 tensors with tape-based reverse-mode differentiation.

Every tensor is a 2-D numpy array.  Operations executed while a :class:`Tape`
is active (and with at least one input that requires a gradient) are recorded
in creation order, which is a valid topological order, so ``Tape.backward``
only has to walk the record backwards once.

Train mode uses float32, gradient-check mode float64; switch with
:func:`precision`.
"""

import contextlib
import math

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, NumericError, UsageError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32}
_tape_stack = []


def default_dtype():
    return _state["dtype"]


def set_precision(name):
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}; expected float32 or float64")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an enclosing tape."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once.  Call :meth:`reset` to reuse the object.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise UsageError("tape already consumed; call reset() first")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out):
        out._tape = self
        self.nodes.append(out)
        for p in out._parents:
            if p.requires_grad and p._backward is None:
                self.leaves[id(p)] = p

    def reset(self):
        self.nodes = []
        self.leaves = {}
        self.consumed = False

    def backward(self, loss):
        if self.consumed:
            raise UsageError("backward() called twice on the same tape without reset()")
        if loss.shape != (1, 1):
            raise UsageError(f"loss must be a [1,1] tensor, got {list(loss.shape)}")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if p._backward is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    k = id(p)
                    grads[k] = grads[k] + pg if k in grads else pg
        for leaf in self.leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        # drop the recorded graph now; recorded tensors point back at the tape,
        # and leaving that cycle to the garbage collector keeps large buffers alive
        self.nodes = []
        self.leaves = {}
        self.consumed = True


class Tensor:
    """Rank-2 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are rank 2, got array of rank {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise UsageError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data):
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def custom_op(data, parents, backward):
    """Record a hand-written operation.

    ``backward(g)`` must return one gradient (or ``None``) per parent, each
    shaped like that parent.
    """
    return _result(data, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast")


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product with row/column broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c):
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def matmul(a, b):
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dims differ, {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward)


def affine(x, w, b):
    """``x @ w + b`` for a ``[1, k]`` bias row, recorded as a single operation."""
    if x.cols != w.rows:
        raise DimensionError(f"affine: inner dims differ, {list(x.shape)} @ {list(w.shape)}")
    if b.shape != (1, w.cols):
        raise DimensionError(f"affine: bias shape {list(b.shape)} does not match {w.cols} outputs")
    xd, wd = x.data, w.data
    out = xd @ wd
    out += b.data

    def backward(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0, keepdims=True) if b.requires_grad else None)

    return _result(out, (x, w, b), backward)


def transpose(x):
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x):
    shape = x.shape
    return _result(x.data.sum(dtype=x.data.dtype).reshape(1, 1), (x,),
                   lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),))


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.data.size)


def sqrt(x):
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def norm_all(x):
    """Frobenius norm of ``x`` as a [1,1] tensor; the subgradient at zero is zero."""
    xd = x.data
    out = np.sqrt((xd * xd).sum(dtype=xd.dtype)).reshape(1, 1)

    def backward(g):
        n = out[0, 0]
        if n == 0:
            return (np.zeros_like(xd),)
        return (xd * (g[0, 0] / n),)

    return _result(out, (x,), backward)


# ------------------------------------------------------------ normalization

def softmax_rows(x):
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise DimensionError(f"layer_norm: gain/bias must be [1,{x.cols}]")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


# --------------------------------------------------------------- activations

_GELU_K = math.sqrt(2.0 / math.pi)


def activation(x, kind, alpha=0.25):
    """Elementwise nonlinearity: silu, gelu (tanh form), relu or prelu."""
    xd = x.data
    if kind == "silu":
        # logistic via tanh, in place to keep temporaries down on edge-sized arrays
        s = np.tanh(0.5 * xd)
        s += 1.0
        s *= 0.5
        out = xd * s

        def silu_backward(g):
            d = 1.0 - s
            d *= xd
            d += 1.0
            d *= s
            d *= g
            return (d,)

        return _result(out, (x,), silu_backward)
    elif kind == "gelu":
        t = np.tanh(_GELU_K * (xd + 0.044715 * xd ** 3))
        out = 0.5 * xd * (1.0 + t)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * xd * xd)
    elif kind == "relu":
        pos = xd > 0
        out = np.where(pos, xd, 0).astype(xd.dtype)
        d = pos.astype(xd.dtype)
    elif kind == "prelu":
        pos = xd > 0
        out = np.where(pos, xd, alpha * xd).astype(xd.dtype)
        d = np.where(pos, 1.0, alpha).astype(xd.dtype)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return _result(out, (x,), lambda g: (g * d,))


# ------------------------------------------------------ indexing and layout

class SegmentPlan:
    """Precomputed averaging operator for :func:`segment_mean`.

    Reusing a plan avoids rebuilding the sparse matrix when the same index
    list is aggregated many times (once per block per step).
    """

    def __init__(self, segments, num_segments):
        seg = np.asarray(segments, dtype=np.int64).reshape(-1)
        if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
            raise IndexError(f"segment index out of range [0, {num_segments})")
        counts = np.bincount(seg, minlength=num_segments)
        w = 1.0 / np.maximum(counts, 1)
        self.num_segments = num_segments
        self.size = seg.size
        self.counts = counts
        matrix = sp.csr_matrix((w[seg], (seg, np.arange(seg.size))), shape=(num_segments, seg.size))
        self._ops = {np.dtype(np.float64): (matrix, matrix.T.tocsr())}

    def operators(self, dtype):
        """``(average, average^T)`` as sparse matrices in ``dtype``."""
        dtype = np.dtype(dtype)
        if dtype not in self._ops:
            fwd, bwd = self._ops[np.dtype(np.float64)]
            self._ops[dtype] = (fwd.astype(dtype), bwd.astype(dtype))
        return self._ops[dtype]


def segment_mean(values, segments, num_segments=None):
    """Mean of the rows of ``values`` grouped by segment id.

    Segments with no members produce a zero row.
    """
    plan = segments if isinstance(segments, SegmentPlan) else SegmentPlan(segments, num_segments)
    if plan.size != values.rows:
        raise DimensionError(f"segment_mean: {plan.size} ids for {values.rows} rows")
    fwd, bwd = plan.operators(values.data.dtype)
    return _result(fwd @ values.data, (values,), lambda g: (bwd @ g,))


class GatherPlan:
    """Row-gather indices plus the scatter-add operator for the backward pass."""

    def __init__(self, index, num_rows):
        idx = np.asarray(index, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
            raise IndexError(f"gather index out of range [0, {num_rows})")
        self.index = idx
        self.num_rows = num_rows
        self.scatter = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))),
                                     shape=(num_rows, idx.size))
        self._scatter = {np.dtype(np.float64): self.scatter}

    def scatter_op(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in self._scatter:
            self._scatter[dtype] = self.scatter.astype(dtype)
        return self._scatter[dtype]


def gather_rows(x, index):
    plan = index if isinstance(index, GatherPlan) else GatherPlan(index, x.rows)
    if plan.num_rows != x.rows:
        raise DimensionError("gather_rows: plan built for a different row count")
    scatter = plan.scatter_op(x.data.dtype)
    return _result(x.data[plan.index], (x,), lambda g: (scatter @ g,))


def concat_cols(tensors):
    tensors = [_wrap(t) for t in tensors]
    n = tensors[0].rows
    if any(t.rows != n for t in tensors):
        raise DimensionError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [t.cols for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _result(out, tuple(tensors),
                   lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def concat_rows(tensors):
    tensors = [_wrap(t) for t in tensors]
    c = tensors[0].cols
    if any(t.cols != c for t in tensors):
        raise DimensionError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [t.rows for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _result(out, tuple(tensors),
                   lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def slice_cols(x, start, stop):
    if not 0 <= start < stop <= x.cols:
        raise DimensionError(f"slice_cols: [{start},{stop}) outside width {x.cols}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def slice_rows(x, start, stop):
    if not 0 <= start < stop <= x.rows:
        raise DimensionError(f"slice_rows: [{start},{stop}) outside height {x.rows}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), backward)


def split_cols(x, at=None):
    """Split columns at ``at``; the default splits into equal halves."""
    if at is None:
        if x.cols % 2:
            raise DimensionError(f"split_cols: cannot halve odd width {x.cols}")
        at = x.cols // 2
    if not 0 < at < x.cols:
        raise DimensionError(f"split_cols: split point {at} outside (0, {x.cols})")
    return slice_cols(x, 0, at), slice_cols(x, at, x.cols)


def assign_rows(x, rows, values, cols=None):
    """Copy of ``x`` with ``rows`` (optionally only ``cols``) overwritten by constants.

    No gradient flows to the overwritten entries.
    """
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        return x
    if rows.min() < 0 or rows.max() >= x.rows:
        raise IndexError(f"assign_rows: row index outside [0, {x.rows})")
    sel = (rows[:, None], np.asarray(cols, dtype=np.int64)[None, :]) if cols is not None else rows
    vals = np.asarray(values, dtype=x.data.dtype)
    out = x.data.copy()
    out[sel] = vals

    def backward(g):
        g = g.copy()
        g[sel] = 0
        return (g,)

    return _result(out, (x,), backward)


def backward(loss):
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss._tape is None:
        raise UsageError("loss is not on a tape (no active Tape during forward, or no grad inputs)")
    loss._tape.backward(loss)


# ------------------------------------------------------------ gradient check

def finite_diff_check(f, x, h=1e-6):
    """Compare the taped gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max|analytic - numeric| / (max|analytic| + max|numeric| + 1e-12)``.
    Scaling by the largest entry rather than entry by entry keeps
    near-zero gradient components, where central differences are pure
    rounding noise, from dominating the result.
    ``x.data`` is perturbed in place and restored.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out._tape is None:
        analytic = np.zeros_like(x.data)
    else:
        tape.backward(out)
        analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    orig = x.data.copy()
    with no_tape():
        for idx in np.ndindex(*x.shape):
            x.data[idx] = orig[idx] + h
            fp = f(x).item()
            x.data[idx] = orig[idx] - h
            fm = f(x).item()
            x.data[idx] = orig[idx]
            numeric[idx] = (fp - fm) / (2 * h)
    x.data[...] = orig
    if not analytic.size:
        return 0.0
    scale = np.abs(analytic).max() + np.abs(numeric).max() + 1e-12
    return float(np.abs(analytic - numeric).max() / scale)
