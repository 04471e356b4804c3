"""Pure-numpy reference implementations of the hot kernels.

These mirror the compiled routines in ``_ckernels.pyx`` and are used as the
fallback backend when the extension is not built. Both backends are exercised
by the test suite and compared in ``benchmarks/bench_kernels.py``.
"""

import numpy as np

BACKEND = "pure"


def rnn_tanh_forward(x, wx, wh, b, h0):
    """Run a tanh RNN over a sequence.

    x: (T, d) inputs, wx: (d, H), wh: (H, H), b: (H,), h0: (H,) initial state.
    Returns the (T, H) matrix of hidden states.
    """
    n_steps = x.shape[0]
    n_hidden = wh.shape[0]
    h = np.empty((n_steps, n_hidden), dtype=np.float64)
    xw = x @ wx
    prev = h0
    for t in range(n_steps):
        prev = np.tanh(xw[t] + prev @ wh + b)
        h[t] = prev
    return h


def rnn_tanh_backward(x, h, h0, wx, wh, dh_out):
    """Backpropagate through ``rnn_tanh_forward``.

    dh_out is the loss gradient w.r.t. every hidden state (T, H).
    Returns (dx, dwx, dwh, db, dh0).
    """
    n_steps = x.shape[0]
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(wh.shape[0], dtype=np.float64)
    dx = np.empty_like(x)
    dh = np.zeros(wh.shape[0], dtype=np.float64)
    for t in range(n_steps - 1, -1, -1):
        dh = dh + dh_out[t]
        da = dh * (1.0 - h[t] * h[t])
        dwx += np.outer(x[t], da)
        prev = h[t - 1] if t > 0 else h0
        dwh += np.outer(prev, da)
        db += da
        dx[t] = da @ wx.T
        dh = da @ wh.T
    return dx, dwx, dwh, db, dh


def levenshtein(a, b):
    """Minimal edit distance between two int sequences, unit costs."""
    n, m = len(a), len(b)
    if n == 0:
        return m
    if m == 0:
        return n
    prev = list(range(m + 1))
    cur = [0] * (m + 1)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev, cur = cur, prev
    return prev[m]
