"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active on the
current thread, every op records a backward closure; :func:`backward` replays
the tape in reverse. With no tape active the same ops run forward-only, which
is how evaluation and decoding stay cheap.

Tensors are treated as immutable once produced by an op. Leaf parameters may
be nudged in place between forward passes (finite differencing relies on
this), never mid-tape.
"""

import threading

import numpy as np

from . import kernels
from .errors import ShapeError

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of forward ops; inputs of an entry always precede it."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self):
        return len(self._nodes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        elif dtype is not None and data.dtype != dtype:
            data = data.astype(dtype)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _record(out, parents, fn):
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, parents, fn))
    return out


def backward(loss, tape, params=None):
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tracked tensor.

    Walks the tape once, in reverse. When ``params`` is given, parameters the
    loss never touched end up with explicit zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not tracked by the given tape")
    loss.grad = np.ones_like(loss.data)
    for out, parents, fn in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        pieces = fn(g)
        for p, piece in zip(parents, pieces):
            if piece is None or not p.requires_grad:
                continue
            # never accumulate in place: pieces may be views of upstream grads
            p.grad = piece if p.grad is None else p.grad + piece
    if params is not None:
        for name in params.names():
            p = params[name]
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    ash, bsh = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _record(out, (a, b), fn)


def mul(a, b):
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), fn)


def scale(a, c):
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c)

    def fn(g):
        return (g * c,)

    return _record(out, (a,), fn)


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    try:
        out = Tensor(ad @ bd)
    except ValueError:
        raise ShapeError(f"matmul: batch extents disagree for {a.shape} x {b.shape}")

    def reduce_batch(g, shape):
        # collapse broadcast batch dims back onto the operand's shape
        if g.shape == shape:
            return g
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    def fn(g):
        ga = reduce_batch(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = reduce_batch(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def transpose_last2(a):
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (a,), fn)


def permute(a, axes):
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), fn)


def slice_last(a, start, stop):
    """Contiguous slice along the last axis; gradient scatters back as zeros."""
    out = Tensor(a.data[..., start:stop])
    shape = a.data.shape
    dtype = a.data.dtype

    def fn(g):
        da = np.zeros(shape, dtype)
        da[..., start:stop] = g
        return (da,)

    return _record(out, (a,), fn)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def fn(g):
        return (g.reshape(orig),)

    return _record(out, (a,), fn)


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def fn(g):
        return (g * mask,)

    return _record(out, (a,), fn)


def concat(tensors, axis=-1):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), fn)


def stack(tensors, axis=0):
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), fn)


def tile_rows(a, n):
    """Repeat a 1-D vector as n identical rows."""
    if a.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {a.shape}")
    out = Tensor(np.broadcast_to(a.data, (n, a.data.shape[0])).copy())

    def fn(g):
        return (g.sum(axis=0),)

    return _record(out, (a,), fn)


def pad_rows(a, total):
    """Zero-pad a (L, d) tensor on the bottom up to ``total`` rows."""
    L = a.data.shape[0]
    if L >= total:
        return a
    out = Tensor(np.concatenate([a.data, np.zeros((total - L,) + a.data.shape[1:], a.data.dtype)]))

    def fn(g):
        return (g[:L],)

    return _record(out, (a,), fn)


def take_rows(a, idx):
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])
    shape = a.data.shape
    dtype = a.data.dtype

    def fn(g):
        da = np.zeros(shape, dtype)
        np.add.at(da, idx, g)
        return (da,)

    return _record(out, (a,), fn)


def embedding(table, token_ids):
    """Row lookup into an embedding matrix; gradients scatter-add back."""
    return take_rows(table, token_ids)


def mean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size if axis is None else a.data.shape[axis]
    shape = a.data.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _record(out, (a,), fn)


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.data.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), fn)


def max_rows(a):
    """Column-wise max over the rows of a (L, d) tensor -> (d,).

    Ties route the gradient to the first maximal row, matching argmax.
    """
    idx = a.data.argmax(axis=0)
    out = Tensor(a.data[idx, np.arange(a.data.shape[1])])
    shape = a.data.shape
    dtype = a.data.dtype

    def fn(g):
        da = np.zeros(shape, dtype)
        da[idx, np.arange(shape[1])] = g
        return (da,)

    return _record(out, (a,), fn)


def dropout(a, rate, rng=None, train=False):
    """Inverted dropout; exact identity when ``train`` is false or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep /= a.data.dtype.type(1.0 - rate)
    out = Tensor(a.data * keep)

    def fn(g):
        return (g * keep,)

    return _record(out, (a,), fn)


def softmax_lastdim(x):
    """Softmax along the last axis, computed with max-subtraction."""
    flat = x.data.reshape(-1, x.data.shape[-1])
    y = kernels.softmax_rows(flat)
    out = Tensor(y.reshape(x.data.shape))

    def fn(g):
        gflat = np.ascontiguousarray(g.reshape(y.shape))
        return (kernels.softmax_rows_bwd(y, gflat).reshape(x.data.shape),)

    return _record(out, (x,), fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Row-wise normalization (population variance) with learned gain/bias."""
    d = x.data.shape[-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, inv_std = kernels.layernorm(flat, gain.data, bias.data, x.data.dtype.type(eps))
    out = Tensor(y.reshape(x.data.shape))
    gd = gain.data

    def fn(g):
        gflat = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgain, dbias = kernels.layernorm_bwd(gd, xhat, inv_std, gflat)
        return dx.reshape(x.data.shape), dgain, dbias

    return _record(out, (x, gain, bias), fn)


def conv1d(x, w, b):
    """Valid 1-D convolution over rows of x (L, d) with filters w (oc, k, d)."""
    L = x.data.shape[0]
    k = w.data.shape[1]
    if L < k:
        raise ShapeError(f"conv1d: input length {L} shorter than kernel {k}")
    if w.data.shape[2] != x.data.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch {x.shape} vs {w.shape}")
    xd = np.ascontiguousarray(x.data)
    out = Tensor(kernels.conv1d(xd, w.data, b.data))
    wd = w.data

    def fn(g):
        dx, dw, db = kernels.conv1d_bwd(xd, wd, np.ascontiguousarray(g))
        return dx, dw, db

    return _record(out, (x, w, b), fn)


def cross_entropy_label_smoothed(logits, gold, eps_ls=0.1):
    """Mean label-smoothed cross entropy of (T, V) logits against T gold ids.

    Smoothing mass eps_ls/V is spread over all V classes, gold included. A 1-D
    logits vector is treated as a single position.
    """
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps_ls}")
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    T, V = z.shape
    gold = np.asarray(gold, dtype=np.intp).reshape(-1)
    if gold.shape[0] != T:
        raise ShapeError(f"cross entropy: {T} positions but {gold.shape[0]} targets")
    if gold.min() < 0 or gold.max() >= V:
        raise IndexError(f"gold token id out of range [0, {V})")
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    dt = z.dtype.type
    off = dt(eps_ls) / dt(V)
    on = dt(1.0 - eps_ls)
    rows = -(on * logp[np.arange(T), gold] + off * logp.sum(axis=1))
    out = Tensor(np.asarray(rows.mean(), dtype=z.dtype))
    p = ez / sez

    def fn(g):
        dz = p.copy()
        dz[np.arange(T), gold] -= on
        dz -= off
        dz *= g / dt(T)
        if logits.data.ndim == 1:
            dz = dz[0]
        return (dz,)

    return _record(out, (logits,), fn)


def text_cnn(x, bank):
    """Multi-width conv bank over a token-embedding matrix, pooled to one vector.

    For each filter width the input is convolved (valid, stride 1), passed
    through ReLU, and max-pooled over positions; the per-width vectors are
    concatenated and linearly projected back to the model dimension. Inputs
    shorter than the widest filter are zero-padded on the bottom.
    """
    widths = bank.widths
    x = pad_rows(x, max(widths))
    pooled = []
    for k in widths:
        c = conv1d(x, bank.w[k], bank.b[k])
        pooled.append(max_rows(relu(c)))
    cat = concat(pooled, axis=-1)
    return reshape(add(matmul(reshape(cat, (1, -1)), bank.proj_w), bank.proj_b), (-1,))


class ConvBank:
    """Filter bank for :func:`text_cnn`: one (oc, k, d) filter set per width."""

    def __init__(self, widths, w, b, proj_w, proj_b):
        self.widths = tuple(widths)
        self.w = w
        self.b = b
        self.proj_w = proj_w
        self.proj_b = proj_b


# ---------------------------------------------------------------------------
# parameters and verification


class ParamStore:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._params = {}

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def copy_values(self):
        return {name: p.data.copy() for name, p in self.items()}

    def load_values(self, values):
        for name, arr in values.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def grad_check(f, params, h=1e-5, samples=None, rng=None):
    """Max relative error between tape gradients of ``f()`` and central differences.

    ``f`` must read parameters from ``params`` and be fully deterministic
    (freeze dropout and any sampling before calling). When ``samples`` is
    given, that many coordinates are checked, drawn without replacement.
    """
    params.zero_grads()
    with Tape() as tape:
        loss = f()
    backward(loss, tape, params)
    grads = {name: p.grad.copy() for name, p in params.items()}

    coords = []
    for name, p in params.items():
        coords.extend((name, i) for i in range(p.data.size))
    if samples is not None and samples < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picked = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in picked]

    max_rel = 0.0
    for name, i in coords:
        data = params[name].data
        orig = data.flat[i]
        data.flat[i] = orig + h
        fp = f().item()
        data.flat[i] = orig - h
        fm = f().item()
        data.flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        ad = float(grads[name].flat[i])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
        if rel > max_rel:
            max_rel = rel
    return max_rel
