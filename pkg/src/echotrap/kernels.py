"""Kernel backend selection.

Imports the compiled extension when it is available (and not disabled via
the ``ECHOTRAP_PURE=1`` environment variable), otherwise falls back to the
pure-numpy implementations. The public wrappers coerce dtypes and layout so
callers never have to care which backend is active.
"""

import os

import numpy as np

from echotrap import _pykernels

if os.environ.get("ECHOTRAP_PURE", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from echotrap import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def rnn_tanh_forward(x, wx, wh, b, h0=None):
    """Hidden states (T, H) of a tanh RNN run over x (T, d)."""
    x = _as_f64(x)
    wx = _as_f64(wx)
    wh = _as_f64(wh)
    b = _as_f64(b)
    if h0 is None:
        h0 = np.zeros(wh.shape[0], dtype=np.float64)
    else:
        h0 = _as_f64(h0)
    if x.shape[1] != wx.shape[0]:
        raise ValueError(
            f"input dim {x.shape[1]} does not match weight dim {wx.shape[0]}"
        )
    return _impl.rnn_tanh_forward(x, wx, wh, b, h0)


def rnn_tanh_backward(x, h, h0, wx, wh, dh_out):
    """Gradients (dx, dwx, dwh, db, dh0) for ``rnn_tanh_forward``."""
    x = _as_f64(x)
    h = _as_f64(h)
    wx = _as_f64(wx)
    wh = _as_f64(wh)
    dh_out = _as_f64(dh_out)
    if h0 is None:
        h0 = np.zeros(wh.shape[0], dtype=np.float64)
    else:
        h0 = _as_f64(h0)
    return _impl.rnn_tanh_backward(x, h, h0, wx, wh, dh_out)


def levenshtein(a, b):
    """Minimal unit-cost edit distance between two id sequences."""
    a = np.ascontiguousarray(a, dtype=np.int32)
    b = np.ascontiguousarray(b, dtype=np.int32)
    return _impl.levenshtein(a, b)
