"""Hot numeric kernels with two interchangeable backends.

The tensor layer calls these for the inner loops that dominate training time
(1-D conv banks, row softmax, layer norm). Each kernel has a vectorized
numpy implementation and a numba ``@njit`` implementation; the active set is
picked once at import. Set ``WATCHDIAL_NUMBA=0`` to force the pure-numpy
path (useful when numba is unavailable or when bisecting a miscompile).
``benchmarks/bench_kernels.py`` times the two side by side.

All kernels take 2-D (or 3-D for conv weights) contiguous arrays; callers
reshape. Forward kernels return whatever the matching backward needs.
"""

import os

import numpy as np

# ---------------------------------------------------------------------------
# numpy reference implementations


def _softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    y = np.exp(x - m)
    y /= y.sum(axis=1, keepdims=True)
    return y


def _softmax_rows_bwd_np(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def _layernorm_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def _layernorm_bwd_np(gain, xhat, inv_std, g):
    gg = g * gain
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = (gg * xhat).mean(axis=1, keepdims=True)
    dx = (gg - m1 - xhat * m2) * inv_std[:, None]
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _conv_windows(x, k):
    # (L-k+1, k, d) sliding view, no copy
    L, d = x.shape
    s0, s1 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(L - k + 1, k, d), strides=(s0, s0, s1), writeable=False
    )


def _conv1d_np(x, w, b):
    win = _conv_windows(x, w.shape[1])
    return np.tensordot(win, w, axes=([1, 2], [1, 2])) + b


def _conv1d_bwd_np(x, w, g):
    k = w.shape[1]
    win = _conv_windows(x, k)
    dw = np.tensordot(g, win, axes=([0], [0]))
    db = g.sum(axis=0)
    dx = np.zeros_like(x)
    p = g.shape[0]
    for i in range(k):
        dx[i : i + p] += g @ w[:, i, :]
    return dx, dw, db


NUMPY_IMPL = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_bwd": _softmax_rows_bwd_np,
    "layernorm": _layernorm_np,
    "layernorm_bwd": _layernorm_bwd_np,
    "conv1d": _conv1d_np,
    "conv1d_bwd": _conv1d_bwd_np,
}

# ---------------------------------------------------------------------------
# numba implementations (loop form; one lazy specialization per dtype)

NUMBA_IMPL = None

_want_numba = os.environ.get("WATCHDIAL_NUMBA", "1") != "0"
if _want_numba:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - mirror has numba preinstalled
        njit = None
        _want_numba = False

if _want_numba:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        n, m = x.shape
        y = np.empty_like(x)
        for r in range(n):
            mx = x[r, 0]
            for c in range(1, m):
                if x[r, c] > mx:
                    mx = x[r, c]
            s = x[r, 0] * 0
            for c in range(m):
                e = np.exp(x[r, c] - mx)
                y[r, c] = e
                s += e
            inv = 1.0 / s
            for c in range(m):
                y[r, c] *= inv
        return y

    @njit(cache=True)
    def _softmax_rows_bwd_nb(y, g):
        n, m = y.shape
        dx = np.empty_like(y)
        for r in range(n):
            dot = y[r, 0] * 0
            for c in range(m):
                dot += g[r, c] * y[r, c]
            for c in range(m):
                dx[r, c] = y[r, c] * (g[r, c] - dot)
        return dx

    @njit(cache=True)
    def _layernorm_nb(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        inv_std = np.empty(n, x.dtype)
        for r in range(n):
            mu = x[r, 0] * 0
            for c in range(d):
                mu += x[r, c]
            mu /= d
            var = x[r, 0] * 0
            for c in range(d):
                t = x[r, c] - mu
                var += t * t
            var /= d
            inv = 1.0 / np.sqrt(var + eps)
            inv_std[r] = inv
            for c in range(d):
                h = (x[r, c] - mu) * inv
                xhat[r, c] = h
                y[r, c] = h * gain[c] + bias[c]
        return y, xhat, inv_std

    @njit(cache=True)
    def _layernorm_bwd_nb(gain, xhat, inv_std, g):
        n, d = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(d, xhat.dtype)
        dbias = np.zeros(d, xhat.dtype)
        for r in range(n):
            m1 = xhat[r, 0] * 0
            m2 = xhat[r, 0] * 0
            for c in range(d):
                gg = g[r, c] * gain[c]
                m1 += gg
                m2 += gg * xhat[r, c]
                dgain[c] += g[r, c] * xhat[r, c]
                dbias[c] += g[r, c]
            m1 /= d
            m2 /= d
            for c in range(d):
                gg = g[r, c] * gain[c]
                dx[r, c] = (gg - m1 - xhat[r, c] * m2) * inv_std[r]
        return dx, dgain, dbias

    @njit(cache=True)
    def _conv1d_nb(x, w, b):
        L, d = x.shape
        oc, k, _ = w.shape
        p = L - k + 1
        out = np.empty((p, oc), x.dtype)
        for pos in range(p):
            for o in range(oc):
                acc = b[o]
                for i in range(k):
                    for c in range(d):
                        acc += w[o, i, c] * x[pos + i, c]
                out[pos, o] = acc
        return out

    @njit(cache=True)
    def _conv1d_bwd_nb(x, w, g):
        L, d = x.shape
        oc, k, _ = w.shape
        p = L - k + 1
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        db = np.zeros(oc, x.dtype)
        for pos in range(p):
            for o in range(oc):
                go = g[pos, o]
                db[o] += go
                for i in range(k):
                    for c in range(d):
                        dw[o, i, c] += go * x[pos + i, c]
                        dx[pos + i, c] += go * w[o, i, c]
        return dx, dw, db

    NUMBA_IMPL = {
        "softmax_rows": _softmax_rows_nb,
        "softmax_rows_bwd": _softmax_rows_bwd_nb,
        "layernorm": _layernorm_nb,
        "layernorm_bwd": _layernorm_bwd_nb,
        "conv1d": _conv1d_nb,
        "conv1d_bwd": _conv1d_bwd_nb,
    }

_ACTIVE = NUMBA_IMPL if NUMBA_IMPL is not None else NUMPY_IMPL


def backend():
    """Name of the backend selected at import ("numba" or "numpy")."""
    return "numba" if _ACTIVE is NUMBA_IMPL else "numpy"


softmax_rows = _ACTIVE["softmax_rows"]
softmax_rows_bwd = _ACTIVE["softmax_rows_bwd"]
layernorm = _ACTIVE["layernorm"]
layernorm_bwd = _ACTIVE["layernorm_bwd"]
conv1d = _ACTIVE["conv1d"]
conv1d_bwd = _ACTIVE["conv1d_bwd"]
