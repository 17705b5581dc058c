"""Small reverse-mode automatic differentiation engine on top of numpy.

Every Tensor produced by a primitive remembers its parents and a closure
computing the vector-Jacobian product. Creation order is tracked with a
global sequence counter, so :func:`backward` replays the recorded graph in
exact reverse order of the forward pass.

Broadcasting is restricted to leading-axis expansion: in a binary op the
smaller operand's shape must be a suffix of the larger one's.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

_SEQ = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_seq")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _vjp: Callable | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise


def _check_expand(a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shape mismatch: {sa} vs {sb}")


def _unexpand(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_expand(a.data, b.data)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unexpand(g, a.shape), _unexpand(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_expand(a.data, b.data)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unexpand(g, a.shape), _unexpand(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_expand(a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unexpand(g * bd, a.shape), _unexpand(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_expand(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unexpand(g / bd, a.shape), _unexpand(-g * out / bd, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(f"shape mismatch: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., n, k) and ``b`` of shape (k, m)."""
    a, b = _pair(a, b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        # gradients for parents that do not need them are skipped
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 "same" convolution (cross-correlation).

    ``x`` is channels-last (B, T, F, C_in); ``w`` is (kh, kw, C_in, C_out)
    with odd kh, kw.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"shape mismatch: {x.shape} vs {w.shape}")
    kh, kw = w.shape[:2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must have odd extents, got {w.shape}")
    B, T, F, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wd = w.data
    # im2col: one (B*T*F, kh*kw*C) patch matrix, then a single matmul
    cols = np.concatenate([xp[:, i:i + T, j:j + F, :] for i in range(kh) for j in range(kw)], axis=-1)
    cols = cols.reshape(-1, kh * kw * C)
    wm = wd.reshape(kh * kw * C, -1)
    out = (cols @ wm).reshape(B, T, F, -1)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = (cols.T @ g2).reshape(wd.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gc = (g2 @ wm.T).reshape(B, T, F, kh * kw, C)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + T, j:j + F, :] += gc[:, :, :, i * kw + j, :]
        return gxp[:, ph:ph + T, pw:pw + F, :], gw

    return _make(out, (x, w), vjp)


def maxpool_freq(x: Tensor, pool: int) -> Tensor:
    """Max-pool a (B, T, F, C) tensor over the frequency axis only."""
    B, T, F, C = x.shape
    if F % pool:
        raise ShapeError(f"frequency extent {F} not divisible by pool {pool}")
    blocks = x.data.reshape(B, T, F // pool, pool, C)
    out = blocks.max(axis=3)

    def vjp(g):
        gb = np.zeros_like(blocks)
        taken = np.zeros(out.shape, dtype=bool)
        # the first maximal element takes the whole gradient on ties
        for k in range(pool):
            hit = (blocks[:, :, :, k, :] == out) & ~taken
            gb[:, :, :, k, :] = np.where(hit, g, 0.0)
            taken |= hit
        return (gb.reshape(B, T, F, C),)

    return _make(out, (x,), vjp)


def gru(x: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor,
        reverse: bool = False) -> Tensor:
    """Run a gated-recurrent layer over a (B, T, D) sequence from a zero state.

    Gate layout along the last axis of the weights is (reset, update, new):

        r = sig(x Wr + h Ur + br),  z = sig(x Wz + h Uz + bz)
        n = tanh(x Wn + bxn + r * (h Un + bhn)),  h' = (1 - z) * n + z * h

    Returns the (B, T, H) hidden states, in input time order also when
    ``reverse`` is set.
    """
    B, T, D = x.shape
    H = w_h.shape[0]
    if w_x.shape != (D, 3 * H) or w_h.shape != (H, 3 * H) \
            or b_x.shape != (3 * H,) or b_h.shape != (3 * H,):
        raise ShapeError(f"shape mismatch: {x.shape} vs {w_x.shape}/{w_h.shape}")
    xd = x.data[:, ::-1] if reverse else x.data
    wx, wh = w_x.data, w_h.data
    gx = xd @ wx + b_x.data
    dtype = gx.dtype
    hs = np.zeros((B, T + 1, H), dtype=dtype)
    rs = np.empty((B, T, H), dtype=dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    bh = b_h.data
    for t in range(T):
        h = hs[:, t]
        gh = h @ wh + bh
        r = _sig(gx[:, t, :H] + gh[:, :H])
        z = _sig(gx[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, t, 2 * H:] + r * gh[:, 2 * H:])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], hns[:, t] = r, z, n, gh[:, 2 * H:]
    out = hs[:, 1:]
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def vjp(g):
        if reverse:
            g = g[:, ::-1]
        dgx = np.empty_like(gx)
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n, hn, hp = rs[:, t], zs[:, t], ns[:, t], hns[:, t], hs[:, t]
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (hp - n) * z * (1.0 - z)
            dr = dn * hn * r * (1.0 - r)
            dgh = np.concatenate([dr, dz, dn * r], axis=1)
            dgx[:, t] = np.concatenate([dr, dz, dn], axis=1)
            dwh += hp.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh * z + dgh @ wh.T
        dx = dgx @ wx.T
        if reverse:
            dx = dx[:, ::-1]
        dwx = xd.reshape(-1, D).T @ dgx.reshape(-1, 3 * H)
        dbx = dgx.sum(axis=(0, 1))
        return np.ascontiguousarray(dx), dwx, dwh, dbx, dbh

    return _make(out, (x, w_x, w_h, b_x, b_h), vjp)


def _sig(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves are tensors with ``requires_grad`` and no recorded parents
    (parameters, or inputs marked for gradient as VAT needs).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._vjp is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching other leaves' ``.grad``."""
    saved = [t.grad for t in wrt]
    for t in wrt:
        t.grad = None
    backward(loss)
    out = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    for t, s in zip(wrt, saved):
        t.grad = s
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update of ``params``; returns the advanced state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"WSEDCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, dtype=np.float32) -> dict[str, Parameter]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    params: dict[str, Parameter] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = Parameter(name, data.astype(dtype))
    return params
