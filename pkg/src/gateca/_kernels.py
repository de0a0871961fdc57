"""Fused inner loops for layer evaluation, JIT-compiled when numba is
available and falling back to vectorized numpy otherwise.

The numba paths do the index gather and the bilinear form in one pass with
no temporaries. Training here is memory-bound, so the backward re-gathers
each node's inputs from the previous layer's stored outputs instead of
reading back a twice-as-large saved copy. Per-element arithmetic matches
the numpy fallback's expression shape; reduction order is fixed, so each
backend is deterministic.
"""

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _forward_layer_jit(x, in0, in1, w, out):
    B, n = out.shape
    for r in range(B):
        for j in range(n):
            a = x[r, in0[j]]
            b = x[r, in1[j]]
            out[r, j] = w[j, 0] + w[j, 1] * a + w[j, 2] * b + w[j, 3] * (a * b)


@njit(cache=True)
def _backward_layer_jit(g, prev, in0, in1, w, g_prev, moments):
    B, n = g.shape
    for j in range(n):
        moments[j, 0] = 0.0
        moments[j, 1] = 0.0
        moments[j, 2] = 0.0
        moments[j, 3] = 0.0
    for r in range(B):
        for j in range(n):
            gj = g[r, j]
            a = prev[r, in0[j]]
            b = prev[r, in1[j]]
            g_prev[r, in0[j]] += gj * (w[j, 1] + w[j, 3] * b)
            g_prev[r, in1[j]] += gj * (w[j, 2] + w[j, 3] * a)
            ga = gj * a
            moments[j, 0] += gj
            moments[j, 1] += ga
            moments[j, 2] += gj * b
            moments[j, 3] += ga * b


@njit(cache=True)
def _hard_layer_jit(x, in0, in1, c, out):
    B, n = out.shape
    for r in range(B):
        for j in range(n):
            a = x[r, in0[j]]
            b = x[r, in1[j]]
            out[r, j] = c[j, 0] + c[j, 1] * a + c[j, 2] * b + c[j, 3] * (a * b)


def forward_layer(x, layer, w):
    """One soft layer pass over [B, prev_width] values."""
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if HAVE_NUMBA:
        out = np.empty((x.shape[0], layer.width), dtype=x.dtype)
        _forward_layer_jit(x, layer.in0, layer.in1, w, out)
        return out
    a = x[:, layer.in0]
    b = x[:, layer.in1]
    return w[:, 0] + w[:, 1] * a + w[:, 2] * b + w[:, 3] * (a * b)


def backward_layer(g, prev, w, layer):
    """One soft layer reverse pass.

    `prev` holds the previous layer's outputs (the values this layer read).
    Returns (moments [n,4] float64, g_prev [B, prev_width]): the bilinear
    moments feeding the logit gradient, and the gradient scattered onto the
    previous layer's outputs.
    """
    w = np.ascontiguousarray(w, dtype=g.dtype)
    if HAVE_NUMBA:
        g_prev = np.zeros(prev.shape, dtype=g.dtype)
        moments = np.empty((g.shape[1], 4), dtype=g.dtype)
        _backward_layer_jit(g, prev, layer.in0, layer.in1, w, g_prev, moments)
        return moments.astype(np.float64, copy=False), g_prev
    a = prev[:, layer.in0]
    b = prev[:, layer.in1]
    da = g * (w[:, 1] + w[:, 3] * b)
    db = g * (w[:, 2] + w[:, 3] * a)
    ga = g * a
    moments = np.stack(
        [g.sum(axis=0), ga.sum(axis=0), (g * b).sum(axis=0),
         (ga * b).sum(axis=0)], axis=1).astype(np.float64)
    order, starts, uniq = layer.scatter_plan()
    cat = np.concatenate([da, db], axis=1)[:, order]
    g_prev = np.zeros(prev.shape, dtype=g.dtype)
    g_prev[:, uniq] = np.add.reduceat(cat, starts, axis=1)
    return moments, g_prev


def hard_layer(x, layer, coeffs):
    """One hard layer pass on 0/1 int8 values."""
    c = np.ascontiguousarray(coeffs, dtype=np.int8)
    if HAVE_NUMBA:
        out = np.empty((x.shape[0], layer.width), dtype=np.int8)
        _hard_layer_jit(x, layer.in0, layer.in1, c, out)
        return out
    a = x[:, layer.in0]
    b = x[:, layer.in1]
    return c[:, 0] + c[:, 1] * a + c[:, 2] * b + c[:, 3] * (a * b)
