"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` module; used when the
extension is missing or ``LOMA_KERNELS=python`` is set.
"""

import numpy as np

MASK_OFFSET = -1e9


def softmax_fwd(scores, allowed, scale):
    # scores (B, H, T, K); allowed (M, T, K) with M in {1, B}
    z = scores * scores.dtype.type(scale)
    z = z + np.where(allowed, 0.0, MASK_OFFSET).astype(scores.dtype)[:, None]
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_bwd(probs, gout, scale):
    dot = (gout * probs).sum(axis=-1, keepdims=True)
    return probs * (gout - dot) * probs.dtype.type(scale)


def rmsnorm_fwd(x, w, eps):
    # x (N, D)
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1) + eps)
    inv = inv.astype(x.dtype)
    return x * inv[:, None] * w, inv


def rmsnorm_bwd(x, w, inv, gy):
    d = x.shape[1]
    u = gy * w
    dot = (u * x).sum(axis=-1)
    gx = inv[:, None] * u - x * (inv ** 3 * dot / d)[:, None]
    gw = (gy * x * inv[:, None]).sum(axis=0)
    return gx, gw


def rope_apply(x, cos, sin, inverse):
    # x (B, H, T, D); cos/sin (P, T, D/2) with P in {1, B}
    half = x.shape[-1] // 2
    c = cos[:, None]
    s = -sin[:, None] if inverse else sin[:, None]
    x1 = x[..., :half]
    x2 = x[..., half:]
    out = np.empty_like(x)
    out[..., :half] = x1 * c - x2 * s
    out[..., half:] = x1 * s + x2 * c
    return out


def xent_fwd(logits, targets):
    # logits (N, V); targets (N,) int64 with -1 = ignored
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    tot = e.sum(axis=-1, keepdims=True)
    lse = np.log(tot)[:, 0]
    keep = targets >= 0
    safe = np.where(keep, targets, 0)
    rows = np.arange(logits.shape[0])
    loss = np.where(keep, lse - z[rows, safe], 0.0).astype(logits.dtype)
    grad = e / tot
    grad[rows[keep], safe[keep]] -= 1.0
    grad[~keep] = 0.0
    return loss, grad


def embed_bwd(ids, gout, vocab):
    g = np.zeros((vocab, gout.shape[1]), dtype=gout.dtype)
    np.add.at(g, ids, gout)
    return g
