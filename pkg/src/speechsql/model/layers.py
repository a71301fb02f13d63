"""Parameter initializers and the recurrent / attention building blocks.

Everything here operates on autodiff Tensors living on a caller-owned
Tape; parameters come from a shared ParamStore so training and
checkpointing see one flat namespace.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import DTYPE


def uniform_init(rng, shape, scale=0.1):
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


def xavier_init(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DTYPE)


def orthogonal_init(rng, rows, cols):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(DTYPE)


class Linear:
    def __init__(self, store, rng, name, n_in, n_out, bias=True):
        self.w = store.add(f"{name}.w", xavier_init(rng, n_in, n_out))
        self.b = store.add(f"{name}.b", np.zeros(n_out, DTYPE)) if bias else None

    def __call__(self, tape, x):
        out = tape.matmul(x, tape.watch(self.w))
        if self.b is not None:
            out = tape.add(out, tape.watch(self.b))
        return out


class LayerNorm:
    def __init__(self, store, name, dim):
        self.g = store.add(f"{name}.g", np.ones(dim, DTYPE))
        self.b = store.add(f"{name}.b", np.zeros(dim, DTYPE))

    def __call__(self, tape, x):
        return tape.layer_norm(x, tape.watch(self.g), tape.watch(self.b))


class LSTMCell:
    """Gates packed as [input, forget, cell, output]; forget bias starts
    at 1 to keep early gradients alive."""

    def __init__(self, store, rng, name, n_in, hidden):
        self.hidden = hidden
        self.w_ih = store.add(f"{name}.w_ih", xavier_init(rng, n_in, 4 * hidden))
        self.w_hh = store.add(f"{name}.w_hh", np.concatenate(
            [orthogonal_init(rng, hidden, hidden) for _ in range(4)], axis=1))
        bias = np.zeros(4 * hidden, DTYPE)
        bias[hidden:2 * hidden] = 1.0
        self.b = store.add(f"{name}.b", bias)

    def input_gates(self, tape, xs):
        """Precompute x @ W_ih + b for a whole (B, T, D) batch at once;
        returns (T, B, 4H) for cheap per-step row slicing."""
        gates = tape.add(tape.matmul(xs, tape.watch(self.w_ih)), tape.watch(self.b))
        return tape.transpose(gates, (1, 0, 2))

    def step_pre(self, tape, gx, h, c):
        """One step given the precomputed input gates gx (B, 4H)."""
        gates = tape.add(gx, tape.matmul(h, tape.watch(self.w_hh)))
        H = self.hidden
        ifo = tape.sigmoid(tape.narrow(gates, -1, 0, 3 * H))
        i = tape.narrow(ifo, -1, 0, H)
        f = tape.narrow(ifo, -1, H, H)
        o = tape.narrow(ifo, -1, 2 * H, H)
        g = tape.tanh(tape.narrow(gates, -1, 3 * H, H))
        c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
        h_new = tape.mul(o, tape.tanh(c_new))
        return h_new, c_new

    def step(self, tape, x, h, c):
        gx = tape.add(tape.matmul(x, tape.watch(self.w_ih)), tape.watch(self.b))
        return self.step_pre(tape, gx, h, c)


def mask_consts(tape, mask):
    """(keep new, keep old) const pairs per step, shared across layers."""
    if mask is None:
        return None
    return [(tape.const(mask[:, t:t + 1].astype(DTYPE)),
             tape.const(1.0 - mask[:, t:t + 1].astype(DTYPE)))
            for t in range(mask.shape[1])]


def run_lstm(tape, cell, xs, mask=None, reverse=False):
    """Run a cell over (B, T, D); mask is an (B, T) array or the
    mask_consts() list. Masked positions hold state, so the last valid
    step's state survives in the forward direction and the first valid
    one going backward. Returns (outputs (B, T, H), last hidden (B, H)).
    """
    B, T, _ = xs.data.shape
    H = cell.hidden
    if mask is not None and not isinstance(mask, list):
        mask = mask_consts(tape, mask)
    gates = cell.input_gates(tape, xs)      # (T, B, 4H)
    h = tape.const(np.zeros((B, H), DTYPE))
    c = h
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outs = [None] * T
    for t in steps:
        h_new, c_new = cell.step_pre(tape, tape.row(gates, t), h, c)
        if mask is not None:
            m, keep = mask[t]
            h = tape.add(tape.mul(h_new, m), tape.mul(h, keep))
            c = tape.add(tape.mul(c_new, m), tape.mul(c, keep))
        else:
            h, c = h_new, c_new
        outs[t] = h
    stacked = tape.concat([tape.reshape(o, (B, 1, H)) for o in outs], axis=1)
    return stacked, h


class BiLSTM:
    def __init__(self, store, rng, name, n_in, hidden, layers, dropout=0.0):
        self.layers = []
        self.dropout = dropout
        for i in range(layers):
            self.layers.append((
                LSTMCell(store, rng, f"{name}.l{i}.fwd", n_in, hidden),
                LSTMCell(store, rng, f"{name}.l{i}.bwd", n_in, hidden)))
            n_in = 2 * hidden

    def __call__(self, tape, xs, mask=None, rng=None, train=False):
        out = xs
        if mask is not None and not isinstance(mask, list):
            mask = mask_consts(tape, mask)
        for i, (fwd, bwd) in enumerate(self.layers):
            if train and self.dropout > 0 and i > 0:
                out = tape.dropout(out, self.dropout, rng, train=True)
            f_out, _ = run_lstm(tape, fwd, out, mask)
            b_out, _ = run_lstm(tape, bwd, out, mask, reverse=True)
            out = tape.concat([f_out, b_out], axis=2)
        return out


class MultiHeadAttention:
    """Plain scaled dot-product attention of (B, Q, D) over (B, L, D)."""

    def __init__(self, store, rng, name, dim, heads):
        self.heads = heads
        self.dim = dim
        self.head_dim = dim // heads
        self.wq = Linear(store, rng, f"{name}.wq", dim, dim, bias=False)
        self.wk = Linear(store, rng, f"{name}.wk", dim, dim, bias=False)
        self.wv = Linear(store, rng, f"{name}.wv", dim, dim, bias=False)
        self.wo = Linear(store, rng, f"{name}.wo", dim, dim, bias=False)

    def project_kv(self, tape, memory):
        B, L, _ = memory.data.shape
        k = self._split(tape, self.wk(tape, memory), B, L)
        v = self._split(tape, self.wv(tape, memory), B, L)
        return k, v

    def _split(self, tape, x, B, L):
        return tape.transpose(tape.reshape(x, (B, L, self.heads, self.head_dim)),
                              (0, 2, 1, 3))

    def attend(self, tape, query, kv, key_mask):
        """query (B, Q, D); kv from project_kv; key_mask (B, L) additive."""
        k, v = kv
        B, Q, _ = query.data.shape
        q = self._split(tape, self.wq(tape, query), B, Q)
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))),
                            1.0 / np.sqrt(self.head_dim))
        if key_mask is not None:
            scores = tape.add(scores, tape.const(
                key_mask[:, None, None, :].astype(DTYPE)))
        alpha = tape.softmax(scores)
        ctx = tape.matmul(alpha, v)
        ctx = tape.reshape(tape.transpose(ctx, (0, 2, 1, 3)), (B, Q, self.dim))
        return self.wo(tape, ctx)
