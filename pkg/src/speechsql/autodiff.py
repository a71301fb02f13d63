"""Reverse-mode automatic differentiation on float32 arrays.

A small define-by-run engine: a Tape records every primitive applied to
Tensors and backward() replays the record in reverse. The primitive set
is exactly what recurrent nets, relation-aware attention and a tree
decoder need: matmul, broadcasting arithmetic, concat/slice/reshape,
tanh/sigmoid/relu, softmax, layer norm, embedding lookup, dropout,
cross-entropy, and the gradient-reversal passthrough.

The tape is rebuilt every step (no graph caching). A Tape is single
owner: never share one across threads. Separate Tapes are independent.
"""

from __future__ import annotations

import struct

import numpy as np

DTYPE = np.float32

# Forward ops verify their outputs are finite; flip off only for
# benchmarking, never in tests.
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand shapes do not fit an op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {tuple(shapes)}")


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Parameter:
    """Named trainable array. Lives in a ParamStore, outlives tapes."""

    __slots__ = ("name", "data")

    def __init__(self, name, data):
        self.name = name
        self.data = np.array(data, dtype=DTYPE, order="C")

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class ParamStore:
    """Flat name -> Parameter map for a whole model."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params)

    def n_scalars(self):
        return sum(p.data.size for p in self)

    def copy_values(self):
        return {p.name: p.data.copy() for p in self}

    def load_values(self, values):
        for name, arr in values.items():
            p = self._params[name]
            if p.data.shape != np.asarray(arr).shape:
                raise ShapeError("load_values", p.data.shape, np.asarray(arr).shape)
            p.data = np.array(arr, dtype=DTYPE, order="C")


class Tensor:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "idx", "data")

    def __init__(self, tape, idx, data):
        self.tape = tape
        self.idx = idx
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.data.shape})"


class Tape:
    """Ordered op record. Nodes are appended in forward (topological)
    order and visited in exact reverse order by backward()."""

    def __init__(self, dtype=DTYPE):
        self.dtype = dtype   # float64 is a diagnostic mode for FD oracles
        self._datas = []
        self._parents = []   # tuple of node indices per node
        self._vjps = []      # callable(grad) -> tuple of parent grads, or None
        self._watched = {}   # param name -> (Parameter, node idx)

    def __len__(self):
        return len(self._datas)

    # -- node plumbing ---------------------------------------------------

    def _record(self, op, data, parents, vjp):
        data = np.asarray(data, dtype=self.dtype)
        if CHECK_FINITE and not np.isfinite(data.sum()):
            if not np.all(np.isfinite(data)):
                raise NumericError(f"{op}: non-finite values in forward output")
        idx = len(self._datas)
        self._datas.append(data)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Tensor(self, idx, data)

    def const(self, data):
        """Leaf with no gradient tracking (inputs, masks, targets)."""
        return self._record("const", data, (), None)

    def watch(self, param):
        """Leaf bound to a Parameter; backward() reports its gradient."""
        got = self._watched.get(param.name)
        if got is not None:
            return Tensor(self, got[1], self._datas[got[1]])
        t = self._record("param", param.data, (), None)
        self._watched[param.name] = (param, t.idx)
        return t

    def _lift(self, x):
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.const(x)

    # -- arithmetic ------------------------------------------------------

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        out = a.data + b.data

        def vjp(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return self._record("add", out, (a.idx, b.idx), vjp)

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        out = a.data - b.data

        def vjp(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return self._record("sub", out, (a.idx, b.idx), vjp)

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        out = a.data * b.data

        def vjp(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return self._record("mul", out, (a.idx, b.idx), vjp)

    def div(self, a, b):
        a, b = self._lift(a), self._lift(b)
        out = a.data / b.data

        def vjp(g):
            ga = _unbroadcast(g / b.data, a.data.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            return ga, gb

        return self._record("div", out, (a.idx, b.idx), vjp)

    def neg(self, a):
        a = self._lift(a)
        return self._record("neg", -a.data, (a.idx,), lambda g: (-g,))

    def scale(self, a, c):
        a = self._lift(a)
        c = float(c)
        return self._record("scale", a.data * c, (a.idx,), lambda g: (g * c,))

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError("matmul", a.data.shape, b.data.shape)
        out = np.matmul(a.data, b.data)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 \
                else np.multiply.outer(g, b.data)
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return (_unbroadcast(ga, a.data.shape),
                    _unbroadcast(gb, b.data.shape))

        return self._record("matmul", out, (a.idx, b.idx), vjp)

    # -- shape ops ---------------------------------------------------------

    def concat(self, parts, axis):
        parts = [self._lift(p) for p in parts]
        out = np.concatenate([p.data for p in parts], axis=axis)
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            g = np.moveaxis(g, axis, 0)
            return tuple(np.ascontiguousarray(
                np.moveaxis(g[offsets[i]:offsets[i + 1]], 0, axis))
                for i in range(len(parts)))

        return self._record("concat", out, tuple(p.idx for p in parts), vjp)

    def narrow(self, a, axis, start, length):
        a = self._lift(a)
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + length)
        sl = tuple(sl)
        out = a.data[sl]

        def vjp(g):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        return self._record("narrow", out, (a.idx,), vjp)

    def reshape(self, a, shape):
        a = self._lift(a)
        out = a.data.reshape(shape)
        return self._record("reshape", out, (a.idx,),
                            lambda g: (g.reshape(a.data.shape),))

    def transpose(self, a, axes):
        a = self._lift(a)
        inv = np.argsort(axes)
        return self._record("transpose", np.transpose(a.data, axes), (a.idx,),
                            lambda g: (np.transpose(g, inv),))

    def sum(self, a, axis=None, keepdims=False):
        a = self._lift(a)
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).astype(DTYPE),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.data.shape).astype(DTYPE),)

        return self._record("sum", out, (a.idx,), vjp)

    def mean(self, a, axis=None, keepdims=False):
        a = self._lift(a)
        n = a.data.size if axis is None else a.data.shape[axis]
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / n)

    # -- nonlinearities ----------------------------------------------------

    def tanh(self, a):
        a = self._lift(a)
        out = np.tanh(a.data)
        return self._record("tanh", out, (a.idx,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a):
        a = self._lift(a)
        out = 1.0 / (1.0 + np.exp(-a.data))
        return self._record("sigmoid", out, (a.idx,), lambda g: (g * out * (1.0 - out),))

    def relu(self, a):
        a = self._lift(a)
        out = np.maximum(a.data, 0.0)
        return self._record("relu", out, (a.idx,),
                            lambda g: (g * (a.data > 0),))

    def log(self, a):
        a = self._lift(a)
        out = np.log(a.data)
        return self._record("log", out, (a.idx,), lambda g: (g / a.data,))

    def logsumexp(self, a):
        """log(sum(exp(a))) over the last axis, shift-stabilized."""
        a = self._lift(a)
        m = a.data.max(axis=-1, keepdims=True)
        e = np.exp(a.data - m)
        s = e.sum(axis=-1, keepdims=True)
        out = (m + np.log(s)).squeeze(-1)

        def vjp(g):
            return (np.expand_dims(g, -1) * (e / s),)

        return self._record("logsumexp", out, (a.idx,), vjp)

    def softmax(self, a):
        """Softmax over the last axis."""
        a = self._lift(a)
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._record("softmax", out, (a.idx,), vjp)

    def layer_norm(self, x, gain, bias, eps=1e-5):
        """Normalize the last axis to zero mean / unit variance, then affine."""
        x, gain, bias = self._lift(x), self._lift(gain), self._lift(bias)
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gain.data + bias.data
        n = x.data.shape[-1]

        def vjp(g):
            gxhat = g * gain.data
            gx = inv * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            axes = tuple(range(g.ndim - 1))
            ggain = (g * xhat).sum(axis=axes) if axes else g * xhat
            gbias = g.sum(axis=axes) if axes else g
            return (gx.astype(x.data.dtype), ggain.reshape(gain.data.shape),
                    gbias.reshape(bias.data.shape))

        return self._record("layer_norm", out, (x.idx, gain.idx, bias.idx), vjp)

    # -- lookup / selection --------------------------------------------------

    def embedding(self, weight, ids):
        """Row lookup weight[ids]; ids is any integer array."""
        weight = self._lift(weight)
        ids = np.asarray(ids, dtype=np.int64)
        out = weight.data[ids]

        def vjp(g):
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids, g)
            return (gw,)

        return self._record("embedding", out, (weight.idx,), vjp)

    def select_positions(self, x, pos):
        """x: (B, L, H), pos: (B,) -> (B, H) picking x[b, pos[b]]."""
        x = self._lift(x)
        pos = np.asarray(pos, dtype=np.int64)
        bidx = np.arange(x.data.shape[0])
        out = x.data[bidx, pos]

        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[bidx, pos] = g
            return (gx,)

        return self._record("select_positions", out, (x.idx,), vjp)

    def row(self, x, i):
        """x[i] along axis 0, dimension squeezed."""
        x = self._lift(x)
        out = x.data[i]

        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[i] = g
            return (gx,)

        return self._record("row", out, (x.idx,), vjp)

    def time_gather(self, x, idx):
        """x: (T, B, H), idx: (B,) -> (B, H) picking x[idx[b], b]."""
        x = self._lift(x)
        idx = np.asarray(idx, dtype=np.int64)
        bidx = np.arange(x.data.shape[1])
        out = x.data[idx, bidx]

        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[idx, bidx] = g
            return (gx,)

        return self._record("time_gather", out, (x.idx,), vjp)

    # -- regularization / losses ----------------------------------------------

    def dropout(self, x, p, rng, train=True):
        """Inverted dropout with an explicit seeded generator; identity in eval."""
        x = self._lift(x)
        if not train or p <= 0.0:
            return x
        keep = 1.0 - p
        mask = (rng.random(x.data.shape) < keep).astype(self.dtype) / self.dtype(keep)
        return self._record("dropout", x.data * mask, (x.idx,),
                            lambda g: (g * mask,))

    def cross_entropy(self, logits, targets):
        """-log softmax picked at integer targets over the last axis.

        1-D logits give a scalar; (B, C) logits give a (B,) vector.
        """
        logits = self._lift(logits)
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != logits.data.shape[:-1]:
            raise ShapeError("cross_entropy", logits.data.shape, targets.shape)
        shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1))
        picked = np.take_along_axis(
            shifted, np.expand_dims(targets, -1), axis=-1).squeeze(-1)
        out = lse - picked

        def vjp(g):
            soft = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, np.expand_dims(targets, -1), 1.0, axis=-1)
            return ((soft - onehot) * np.expand_dims(g, -1),)

        return self._record("cross_entropy", out, (logits.idx,), vjp)

    def grad_reverse(self, x):
        """Identity forward; negates the gradient on the way back."""
        x = self._lift(x)
        return self._record("grad_reverse", x.data, (x.idx,), lambda g: (-g,))

    # -- backward -----------------------------------------------------------

    def backward(self, loss):
        """Gradients of a scalar loss for every watched Parameter.

        Unreached parameters get zeros.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not a tensor on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.data.shape)
        grads = [None] * len(self._datas)
        grads[loss.idx] = np.ones_like(self._datas[loss.idx])
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue  # leaf: keep the gradient for the watched readout
            for pidx, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                if grads[pidx] is None:
                    grads[pidx] = pg.astype(self.dtype, copy=False)
                else:
                    grads[pidx] = grads[pidx] + pg
            grads[i] = None  # free as we go
        out = {}
        for name, (param, idx) in self._watched.items():
            g = grads[idx]
            out[name] = (np.zeros(param.data.shape, dtype=self.dtype)
                         if g is None else g.astype(self.dtype))
        return out


def _unbroadcast(grad, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Adam with linear warmup


class AdamState:
    """First/second moment buffers plus the warmup schedule."""

    def __init__(self, store, peak_lr=7.4e-4, warmup_steps=4000,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}
        self.step = 0
        self.peak_lr = float(peak_lr)
        self.warmup_steps = int(warmup_steps)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def lr_at(self, step):
        """Linear warmup from 0 at step 0 to peak at warmup_steps, then flat."""
        if self.warmup_steps <= 0:
            return self.peak_lr
        return self.peak_lr * min(1.0, step / self.warmup_steps)


def adam_step(store, grads, state, lr=None):
    """One Adam update over every parameter present in `grads`."""
    state.step += 1
    if lr is None:
        lr = state.lr_at(state.step)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = store[name]
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(DTYPE)
    return lr


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        factor = DTYPE(max_norm / norm)
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# Checkpoint container
#
# Layout: magic "W2SQ", version u32 LE, then per-array records:
#   u32 name length | UTF-8 name | u64 rank | u64 x rank dims | f32 LE values
# Optimizer state rides in the same container under the "opt/" prefix.

CHECKPOINT_MAGIC = b"W2SQ"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_record(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes for {what}, got {len(buf)}")
    return buf


def save_checkpoint(path, store, adam=None):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for p in store:
            _write_record(fh, p.name, p.data)
        if adam is not None:
            for name, arr in adam.m.items():
                _write_record(fh, "opt/m/" + name, arr)
            for name, arr in adam.v.items():
                _write_record(fh, "opt/v/" + name, arr)
            scalars = {
                "opt/step": float(adam.step),
                "opt/peak_lr": adam.peak_lr,
                "opt/warmup_steps": float(adam.warmup_steps),
            }
            for name, val in scalars.items():
                _write_record(fh, name, np.asarray(val, dtype=DTYPE))


def load_checkpoint(path):
    """Read raw arrays back: ({param name: array}, {opt key: array})."""
    params, opt = {}, {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated record header")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
            dims = tuple(struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0]
                         for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, count * 4, f"values of {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(DTYPE)
            if name.startswith("opt/"):
                opt[name] = arr
            else:
                params[name] = arr
    return params, opt


def restore_adam(store, opt):
    """Rebuild an AdamState from the opt/ records of a checkpoint."""
    state = AdamState(
        store,
        peak_lr=float(opt["opt/peak_lr"]),
        warmup_steps=int(round(float(opt["opt/warmup_steps"]))),
    )
    state.step = int(round(float(opt["opt/step"])))
    for p in store:
        state.m[p.name] = opt["opt/m/" + p.name].copy()
        state.v[p.name] = opt["opt/v/" + p.name].copy()
    return state
