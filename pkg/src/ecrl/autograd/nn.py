"""Recurrent and attention layers built on the tape.

``lstm_cell`` is composed of primitive tape ops and serves as the readable
reference. ``lstm_sequence`` runs a whole sequence as one recorded op with
hand-written backpropagation through time; the two agree to rounding and both
pass finite-difference checks.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    _make,
    _sigmoid,
    concat,
    getitem,
    matmul,
    sigmoid,
    softmax,
    tanh,
    transpose,
)

_corrupted = set()


@contextmanager
def corrupt_gradient(op_name):
    """Deliberately break one backward rule (negative control for grad checks)."""
    _corrupted.add(op_name)
    try:
        yield
    finally:
        _corrupted.discard(op_name)


def init_uniform(rng, shape, fan_in, dtype=np.float64, name=None):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype, name=name)


def zeros(shape, dtype=np.float64, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype, name=name)


def lstm_params(rng, d_in, hidden, dtype=np.float64, prefix="lstm"):
    """Weights for one LSTM direction; gate column order is input, forget, cell, output."""
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget-gate bias
    return {
        f"{prefix}.wx": init_uniform(rng, (d_in, 4 * hidden), hidden, dtype, f"{prefix}.wx"),
        f"{prefix}.wh": init_uniform(rng, (hidden, 4 * hidden), hidden, dtype, f"{prefix}.wh"),
        f"{prefix}.b": Tensor(b, requires_grad=True, dtype=dtype, name=f"{prefix}.b"),
    }


def lstm_cell(x, h_prev, c_prev, wx, wh, b):
    """One gated step. Returns ``(h, c)``."""
    hidden = h_prev.shape[-1]
    if wx.shape[-1] != 4 * hidden or wh.shape != (hidden, 4 * hidden):
        raise DimensionError(f"lstm weights {wx.shape}, {wh.shape} do not fit hidden={hidden}")
    z = matmul(x, wx) + matmul(h_prev, wh) + b
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    g = tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_sequence(x, wx, wh, b):
    """Unidirectional LSTM over axis -2 of ``x`` (``(T, D)`` or ``(B, T, D)``), zero initial state."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n, steps, d_in = xd.shape
    if steps == 0:
        raise DimensionError("lstm_sequence needs at least one step")
    hidden = wh.shape[0]
    if wx.shape != (d_in, 4 * hidden) or wh.shape != (hidden, 4 * hidden):
        raise DimensionError(f"lstm weights {wx.shape}, {wh.shape} do not fit input {xd.shape}")
    dtype = xd.dtype
    zx = xd @ wx.data + b.data
    hs = np.zeros((n, steps + 1, hidden), dtype=dtype)
    cs = np.zeros((n, steps + 1, hidden), dtype=dtype)
    gates = np.empty((n, steps, 4 * hidden), dtype=dtype)
    tc = np.empty((n, steps, hidden), dtype=dtype)
    whd = wh.data
    for t in range(steps):
        z = zx[:, t] + hs[:, t] @ whd
        act = _sigmoid(z)
        act[:, 2 * hidden:3 * hidden] = np.tanh(z[:, 2 * hidden:3 * hidden])
        gates[:, t] = act
        i, f, g, o = (act[:, k * hidden:(k + 1) * hidden] for k in range(4))
        cs[:, t + 1] = f * cs[:, t] + i * g
        tc[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tc[:, t]
    out = hs[:, 1:]

    def rule(gout):
        gout = gout[None] if squeeze else gout
        dz_all = np.empty_like(gates)
        dh_next = np.zeros((n, hidden), dtype=dtype)
        dc_next = np.zeros((n, hidden), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            act = gates[:, t]
            i, f, g, o = (act[:, k * hidden:(k + 1) * hidden] for k in range(4))
            dh = gout[:, t] + dh_next
            do = dh * tc[:, t]
            dc = dh * o * (1.0 - tc[:, t] ** 2) + dc_next
            dz = dz_all[:, t]
            dz[:, :hidden] = dc * g * i * (1.0 - i)
            dz[:, hidden:2 * hidden] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
            dz[:, 3 * hidden:] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ whd.T
        dx = dz_all @ wx.data.T
        dwx = np.einsum("ntd,ntk->dk", xd, dz_all)
        dwh = np.einsum("nth,ntk->hk", hs[:, :-1], dz_all)
        db = dz_all.sum(axis=(0, 1))
        if "lstm_sequence" in _corrupted:
            dwh = dwh * 1.5
        return (dx[0] if squeeze else dx), dwx, dwh, db

    return _make(out[0] if squeeze else out, (x, wx, wh, b), rule)


def reverse_valid(x, lengths=None):
    """Reverse each sequence along axis -2 within its valid prefix; padding stays in place."""
    steps = x.shape[-2]
    if lengths is None:
        return getitem(x, (Ellipsis, slice(None, None, -1), slice(None)))
    lengths = np.asarray(lengths)
    t = np.arange(steps)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(len(lengths))[:, None]
    return getitem(x, (rows, idx))


def bilstm(x, params, prefix, lengths=None):
    """Forward and backward LSTM passes concatenated to width ``2H``."""
    if x.shape[-2] == 0:
        raise DimensionError("bilstm needs a non-empty sequence")
    fwd = lstm_sequence(x, params[f"{prefix}.fw.wx"], params[f"{prefix}.fw.wh"], params[f"{prefix}.fw.b"])
    rev = reverse_valid(x, lengths)
    bwd = lstm_sequence(rev, params[f"{prefix}.bw.wx"], params[f"{prefix}.bw.wh"], params[f"{prefix}.bw.b"])
    return concat([fwd, reverse_valid(bwd, lengths)], axis=-1)


def bilstm_params(rng, d_in, hidden, dtype=np.float64, prefix="bilstm"):
    p = lstm_params(rng, d_in, hidden, dtype, f"{prefix}.fw")
    p.update(lstm_params(rng, d_in, hidden, dtype, f"{prefix}.bw"))
    return p


def attention_params(rng, dim, dtype=np.float64, prefix="attn"):
    return {f"{prefix}.{k}": init_uniform(rng, (dim, dim), dim, dtype, f"{prefix}.{k}")
            for k in ("wq", "wk", "wv")}


def self_attention(x, params, prefix, key_mask=None, return_weights=False):
    """Single-head scaled dot-product self-attention with a residual connection."""
    dim = x.shape[-1]
    q = matmul(x, params[f"{prefix}.wq"])
    k = matmul(x, params[f"{prefix}.wk"])
    v = matmul(x, params[f"{prefix}.wv"])
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(dim))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[..., None, :]
    attn = softmax(scores, axis=-1, mask=mask)
    out = x + matmul(attn, v)
    return (out, attn) if return_weights else out
