"""Hot inner loops for the depthwise convolutions.

When numba is importable the loops are JIT-compiled (sequential, strict
IEEE: no fastmath, no threading, so results stay deterministic); otherwise
the numpy tap-accumulation fallbacks below are used. Both paths implement
the same summation order per output element.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in dev env
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn
        return deco


@njit(cache=True)
def _dw_forward_jit(xp, wk, out, d):  # pragma: no cover - compiled
    bn, c, h, w = out.shape
    k = wk.shape[1]
    for b in range(bn):
        for ch in range(c):
            for u in range(k):
                for v in range(k):
                    wv = wk[ch, u, v]
                    for i in range(h):
                        for j in range(w):
                            out[b, ch, i, j] += wv * xp[b, ch, i + d * u,
                                                        j + d * v]


@njit(cache=True)
def _dw_wgrad_jit(xp, g, dw, d):  # pragma: no cover - compiled
    bn, c, h, w = g.shape
    k = dw.shape[1]
    for b in range(bn):
        for ch in range(c):
            for u in range(k):
                for v in range(k):
                    acc = 0.0
                    for i in range(h):
                        for j in range(w):
                            acc += g[b, ch, i, j] * xp[b, ch, i + d * u,
                                                       j + d * v]
                    dw[ch, u, v] += acc


@njit(cache=True)
def _dw_xgrad_jit(g, wk, dxp, d):  # pragma: no cover - compiled
    bn, c, h, w = g.shape
    k = wk.shape[1]
    for b in range(bn):
        for ch in range(c):
            for u in range(k):
                for v in range(k):
                    wv = wk[ch, u, v]
                    for i in range(h):
                        for j in range(w):
                            dxp[b, ch, i + d * u, j + d * v] += wv * g[b, ch,
                                                                       i, j]


@njit(cache=True)
def _gelu_forward_jit(x, t, out, a, c3):  # pragma: no cover - compiled
    n = x.size
    xf = x.reshape(n)
    tf = t.reshape(n)
    of = out.reshape(n)
    for i in range(n):
        xi = xf[i]
        ti = np.tanh(a * xi + c3 * xi * xi * xi)
        tf[i] = ti
        of[i] = 0.5 * xi * (1.0 + ti)


@njit(cache=True)
def _gelu_backward_jit(x, t, g, out, a, c3):  # pragma: no cover - compiled
    n = x.size
    xf = x.reshape(n)
    tf = t.reshape(n)
    gf = g.reshape(n)
    of = out.reshape(n)
    for i in range(n):
        xi = xf[i]
        ti = tf[i]
        du = a + 3.0 * c3 * xi * xi
        of[i] = gf[i] * (0.5 + 0.5 * ti + 0.5 * xi * (1.0 - ti * ti) * du)


def _tap(xp, u, v, d, h, w):
    return xp[:, :, u * d:u * d + h, v * d:v * d + w]


def dw_forward(xp: np.ndarray, wk: np.ndarray, d: int, h: int, w: int):
    k = wk.shape[1]
    bn, c = xp.shape[:2]
    out = np.zeros((bn, c, h, w))
    if HAVE_NUMBA:
        _dw_forward_jit(xp, wk, out, d)
        return out
    for u in range(k):
        for v in range(k):
            out += wk[:, u, v][:, None, None] * _tap(xp, u, v, d, h, w)
    return out


def dw_wgrad(xp: np.ndarray, g: np.ndarray, d: int, k: int):
    c = g.shape[1]
    dw = np.zeros((c, k, k))
    if HAVE_NUMBA:
        _dw_wgrad_jit(xp, g, dw, d)
        return dw
    h, w = g.shape[2:]
    for u in range(k):
        for v in range(k):
            dw[:, u, v] = np.einsum("bchw,bchw->c", g, _tap(xp, u, v, d, h, w))
    return dw


def dw_xgrad(g: np.ndarray, wk: np.ndarray, d: int, hp: int, wp: int):
    bn, c, h, w = g.shape
    k = wk.shape[1]
    dxp = np.zeros((bn, c, hp, wp))
    if HAVE_NUMBA:
        _dw_xgrad_jit(g, wk, dxp, d)
        return dxp
    for u in range(k):
        for v in range(k):
            _tap(dxp, u, v, d, h, w)[...] += wk[:, u, v][:, None, None] * g
    return dxp


def gelu_forward(x: np.ndarray, a: float, c3: float):
    """Returns (gelu(x), tanh buffer); tanh form with u = a*x + c3*x^3."""
    if HAVE_NUMBA:
        t = np.empty_like(x)
        out = np.empty_like(x)
        _gelu_forward_jit(x, t, out, a, c3)
        return out, t
    t = np.tanh(a * x + c3 * x * x * x)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray,
                  a: float, c3: float):
    if HAVE_NUMBA:
        out = np.empty_like(x)
        _gelu_backward_jit(x, t, g, out, a, c3)
        return out
    du = a + 3.0 * c3 * x * x
    return g * (0.5 + 0.5 * t + 0.5 * x * (1.0 - t * t) * du)
