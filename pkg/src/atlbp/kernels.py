"""Hot loops of the training path: LSTM recurrence forward/backward and Adam.

Each kernel has a numba ``@njit`` build and a pure-numpy fallback with the
same signature. The numba build is used when numba imports and the
``ATLBP_DISABLE_NUMBA`` environment variable is unset (or ``0``). Both
paths are exposed as ``numba_kernels`` / ``numpy_kernels`` so tests and the
benchmark can compare them directly.

Gate layout in every ``[4H]`` pre-activation block is ``i, f, g, o``.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

_flag = os.environ.get("ATLBP_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _flag in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


# --------------------------------------------------------------------------
# numpy reference path

def _np_sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def np_lstm_forward(xw, U, h0, c0):
    """Run the recurrence given input projections ``xw[t] = W x_t + b``.

    Returns ``(hs, cs, acts)``: hidden states, cell states (both ``T x H``)
    and activated gates ``T x 4H``.
    """
    T = xw.shape[0]
    H = U.shape[1]
    hs = np.empty((T, H))
    cs = np.empty((T, H))
    acts = np.empty((T, 4 * H))
    h, c = h0, c0
    for t in range(T):
        a = xw[t] + U @ h
        i = _np_sigmoid(a[:H])
        f = _np_sigmoid(a[H:2 * H])
        g = np.tanh(a[2 * H:3 * H])
        o = _np_sigmoid(a[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        acts[t, :H] = i
        acts[t, H:2 * H] = f
        acts[t, 2 * H:3 * H] = g
        acts[t, 3 * H:] = o
        hs[t] = h
        cs[t] = c
    return hs, cs, acts


def np_lstm_backward(dh, hs, cs, acts, U, h0, c0):
    """Backpropagate through time.

    ``dh[t]`` is the loss gradient arriving at ``h_t`` from above. Returns
    ``(da, dU)``: pre-activation gradients ``T x 4H`` and the recurrent
    weight gradient.
    """
    T, H = hs.shape
    da = np.empty((T, 4 * H))
    dU = np.zeros_like(U)
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i = acts[t, :H]
        f = acts[t, H:2 * H]
        g = acts[t, 2 * H:3 * H]
        o = acts[t, 3 * H:]
        c_prev = cs[t - 1] if t > 0 else c0
        h_prev = hs[t - 1] if t > 0 else h0
        tc = np.tanh(cs[t])
        dht = dh[t] + dh_next
        dc = dc_next + dht * o * (1.0 - tc * tc)
        da[t, :H] = dc * g * i * (1.0 - i)
        da[t, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        da[t, 3 * H:] = dht * tc * o * (1.0 - o)
        dU += np.outer(da[t], h_prev)
        dh_next = U.T @ da[t]
        dc_next = dc * f
    return da, dU


def np_adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


numpy_kernels = SimpleNamespace(
    name="numpy",
    lstm_forward=np_lstm_forward,
    lstm_backward=np_lstm_backward,
    adam_update=np_adam_update,
)


# --------------------------------------------------------------------------
# numba path

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _nb_sigmoid(z):
        return 0.5 * (np.tanh(0.5 * z) + 1.0)

    @_jit
    def nb_lstm_forward(xw, U, h0, c0):
        T = xw.shape[0]
        H = U.shape[1]
        hs = np.empty((T, H))
        cs = np.empty((T, H))
        acts = np.empty((T, 4 * H))
        h = h0.copy()
        c = c0.copy()
        a = np.empty(4 * H)
        # column-major walk so the inner loop is a contiguous axpy
        UT = np.ascontiguousarray(U.T)
        for t in range(T):
            for r in range(4 * H):
                a[r] = xw[t, r]
            for k in range(H):
                hk = h[k]
                for r in range(4 * H):
                    a[r] += UT[k, r] * hk
            for k in range(H):
                i = _nb_sigmoid(a[k])
                f = _nb_sigmoid(a[H + k])
                g = np.tanh(a[2 * H + k])
                o = _nb_sigmoid(a[3 * H + k])
                c[k] = f * c[k] + i * g
                h[k] = o * np.tanh(c[k])
                acts[t, k] = i
                acts[t, H + k] = f
                acts[t, 2 * H + k] = g
                acts[t, 3 * H + k] = o
                hs[t, k] = h[k]
                cs[t, k] = c[k]
        return hs, cs, acts

    @_jit
    def nb_lstm_backward(dh, hs, cs, acts, U, h0, c0):
        T, H = hs.shape
        da = np.empty((T, 4 * H))
        dU = np.zeros_like(U)
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            for k in range(H):
                i = acts[t, k]
                f = acts[t, H + k]
                g = acts[t, 2 * H + k]
                o = acts[t, 3 * H + k]
                c_prev = cs[t - 1, k] if t > 0 else c0[k]
                tc = np.tanh(cs[t, k])
                dht = dh[t, k] + dh_next[k]
                dc = dc_next[k] + dht * o * (1.0 - tc * tc)
                da[t, k] = dc * g * i * (1.0 - i)
                da[t, H + k] = dc * c_prev * f * (1.0 - f)
                da[t, 2 * H + k] = dc * i * (1.0 - g * g)
                da[t, 3 * H + k] = dht * tc * o * (1.0 - o)
                dc_next[k] = dc * f
            for r in range(4 * H):
                d = da[t, r]
                if t > 0:
                    for k in range(H):
                        dU[r, k] += d * hs[t - 1, k]
                else:
                    for k in range(H):
                        dU[r, k] += d * h0[k]
            dh_next[:] = 0.0
            for r in range(4 * H):
                d = da[t, r]
                for k in range(H):
                    dh_next[k] += U[r, k] * d
        return da, dU

    @_jit
    def nb_adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
        for j in range(p.shape[0]):
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j]
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j]
            p[j] -= lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + eps)

    numba_kernels = SimpleNamespace(
        name="numba",
        lstm_forward=nb_lstm_forward,
        lstm_backward=nb_lstm_backward,
        adam_update=nb_adam_update,
    )
else:  # pragma: no cover
    numba_kernels = None


active = numba_kernels if (NUMBA_REQUESTED and numba_kernels is not None) else numpy_kernels
BACKEND = active.name


def lstm_forward(xw, U, h0, c0):
    return active.lstm_forward(xw, U, h0, c0)


def lstm_backward(dh, hs, cs, acts, U, h0, c0):
    return active.lstm_backward(dh, hs, cs, acts, U, h0, c0)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update needs contiguous buffers")
    active.adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2)
