"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure mapping the output gradient to gradients for each
parent; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order. Only the operations the toy transformer needs exist.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no allowed entry."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called on a graph that was already differentiated."""


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- sugar ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        The graph is released afterwards; a second call raises
        :class:`GraphConsumedError`.
        """
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        _accumulate(self, np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _accumulate(t, g):
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    if t.grad is not None:
        t.grad = t.grad + g
    elif t._backward is None:
        # leaves keep a private writable buffer
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad = g.astype(t.dtype, copy=False)


def _topological_order(root):
    """Parents-before-children order of the nodes reachable from ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.dtype.type(b) if np.isscalar(b) else np.asarray(b, dtype=a.dtype)
        return _node(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def silu(x):
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _node(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


# -- shape ---------------------------------------------------------------------
def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), back)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def tsum(x, axis=None):
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), back)


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


# -- linear algebra --------------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _node(np.matmul(ad, bd), (a, b), back)


# -- normalisation and attention ----------------------------------------------
def _softmax_layout(scores_shape, mask):
    """Map (scores, mask) onto the kernel's (B, H, T, K) / (M, T, K) layout."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        mask = mask.astype(bool)
    nd = len(scores_shape)
    if mask.shape == tuple(scores_shape):
        k = scores_shape[-1]
        t = scores_shape[-2] if nd >= 2 else 1
        n = int(np.prod(scores_shape[:-2])) if nd > 2 else 1
        return (n, 1, t, k), mask.reshape(n, t, k)
    if nd == 4 and mask.ndim in (2, 3) and mask.shape[-2:] == tuple(scores_shape[-2:]):
        m3 = mask.reshape((-1,) + mask.shape[-2:])
        if m3.shape[0] in (1, scores_shape[0]):
            return tuple(scores_shape), m3
    raise DimensionError(f"mask shape {mask.shape} does not fit scores shape {tuple(scores_shape)}")


def masked_softmax(scores, mask, scale=1.0):
    """Softmax over the last axis after pushing blocked entries to -1e9.

    ``mask`` is boolean (True = attend). It may match ``scores`` exactly or,
    for rank-4 scores ``(B, H, T, K)``, be ``(T, K)`` / ``(B, T, K)``.
    Blocked entries come out exactly zero.
    """
    scores = _as_tensor(scores)
    layout, m3 = _softmax_layout(scores.shape, mask)
    if not m3.any(axis=-1).all():
        raise DegenerateRowError("masked_softmax: a row has no allowed entry")
    s4 = np.ascontiguousarray(scores.data.reshape(layout))
    allowed = np.ascontiguousarray(m3).view(np.uint8)
    probs = kernels.softmax_fwd(s4, allowed, float(scale))
    shape = scores.shape

    def back(g):
        g4 = np.ascontiguousarray(g.reshape(layout), dtype=probs.dtype)
        return (kernels.softmax_bwd(probs, g4, float(scale)).reshape(shape),)

    return _node(probs.reshape(shape), (scores,), back)


def rms_norm(x, weight, eps=1e-6):
    d = x.shape[-1]
    if weight.shape != (d,):
        raise DimensionError(f"rms_norm weight {weight.shape} vs feature dim {d}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    w = np.ascontiguousarray(weight.data, dtype=x2.dtype)
    y, inv = kernels.rmsnorm_fwd(x2, w, float(eps))
    shape = x.shape

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d), dtype=x2.dtype)
        gx, gw = kernels.rmsnorm_bwd(x2, w, inv, g2)
        return gx.reshape(shape), gw

    return _node(y.reshape(shape), (x, weight), back)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    flat = np.ascontiguousarray(ids.reshape(-1))

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, dim))
        return (kernels.embed_bwd(flat, g2, vocab),)

    return _node(table.data[ids], (table,), back)


def rope_angles(positions, head_dim, base=10000.0, dtype=None):
    """cos/sin tables of shape ``(P, T, head_dim // 2)`` for integer positions."""
    if head_dim % 2:
        raise DimensionError("rotary embedding needs an even head dimension")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[None]
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[..., None] * inv_freq
    dt = dtype or _DEFAULT_DTYPE
    return np.cos(ang).astype(dt), np.sin(ang).astype(dt)


def rope(x, positions, base=10000.0):
    """Rotate pairs ``(i, i + D/2)`` of ``x`` (B, H, T, D) by per-position angles.

    Positions may repeat or go backwards; each row is rotated by its own id.
    """
    b, _, t, d = x.shape
    cos, sin = rope_angles(positions, d, base, x.dtype)
    if cos.shape[1] != t or cos.shape[0] not in (1, b):
        raise DimensionError(f"positions {np.shape(positions)} do not fit {x.shape}")
    xd = np.ascontiguousarray(x.data)
    out = kernels.rope_apply(xd, cos, sin, False)

    def back(g):
        return (kernels.rope_apply(np.ascontiguousarray(g, dtype=xd.dtype), cos, sin, True),)

    return _node(out, (x,), back)


def cross_entropy(logits, target, reduction="sum"):
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    Rank-1 logits take an integer target and return a scalar. Rank-2
    logits ``(N, V)`` take an int array; entries equal to -1 are ignored.
    ``reduction`` is 'sum', 'mean' (over kept rows) or 'none'.
    """
    logits = _as_tensor(logits)
    vocab = logits.shape[-1]
    single = logits.ndim == 1
    tg = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if single and (tg.size != 1 or tg[0] < 0):
        raise IndexError(f"target {target} out of vocabulary of size {vocab}")
    if tg.size and (tg.max() >= vocab or tg.min() < -1):
        raise IndexError(f"target out of vocabulary of size {vocab}")
    l2 = np.ascontiguousarray(logits.data.reshape(-1, vocab))
    if l2.shape[0] != tg.shape[0]:
        raise DimensionError(f"{l2.shape[0]} logit rows vs {tg.shape[0]} targets")
    losses, dl = kernels.xent_fwd(l2, np.ascontiguousarray(tg))
    shape = logits.shape

    if reduction == "none" and not single:
        return _node(losses, (logits,), lambda g: ((dl * g[:, None]).reshape(shape),))
    if reduction == "mean":
        n = max(int((tg >= 0).sum()), 1)
        factor = 1.0 / n
    elif reduction in ("sum", "none"):
        factor = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    total = np.asarray(losses.sum() * factor, dtype=losses.dtype)
    return _node(total, (logits,), lambda g: ((dl * (g * factor)).reshape(shape),))


# -- initialisation ------------------------------------------------------------
def randn(shape, std=1.0, rng=None, seed=None, dtype=None, requires_grad=False):
    """Seeded normal initializer."""
    if rng is None:
        rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape) * std
    return Tensor(data.astype(dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def parameter(data, dtype=None):
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)


def scaled_dot_scale(head_dim):
    return 1.0 / math.sqrt(head_dim)
