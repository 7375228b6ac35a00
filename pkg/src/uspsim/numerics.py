"""Dense attention kernels on (batch, sequence, heads, head_size) arrays.

``reference_attention`` / ``reference_attention_grad`` are the single-device
oracle.  ``SoftmaxState`` + ``blockwise_update`` + ``finalize`` implement the
online-softmax recurrence that ring attention runs one key block at a time.

Arrays are plain numpy ``float64`` or ``float32`` with layout
``(bs, L, hc, hs)``; computation stays in the input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISIONS = {"fp64": np.float64, "fp32": np.float32}


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ValueError(f"{name} must have 4 axes (bs, L, hc, hs), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {x.shape}")
    if x.dtype not in (np.float64, np.float32):
        raise TypeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def expand_kv(x: np.ndarray, hc: int) -> np.ndarray:
    """Replicate kv heads so query head h reads kv head h * kv_hc // hc."""
    kv_hc = x.shape[2]
    if hc % kv_hc:
        raise ValueError(f"query heads {hc} not divisible by kv heads {kv_hc}")
    if kv_hc == hc:
        return x
    return np.repeat(x, hc // kv_hc, axis=2)


def reduce_kv(dx: np.ndarray, kv_hc: int) -> np.ndarray:
    """Sum per-query-head gradients back onto their shared kv head."""
    bs, L, hc, hs = dx.shape
    if hc == kv_hc:
        return dx
    return dx.reshape(bs, L, kv_hc, hc // kv_hc, hs).sum(axis=3)


def causal_mask(q_pos, k_pos) -> np.ndarray:
    """Boolean (Lq, Lk) mask, True where key position is after the query position."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    return k_pos[None, :] > q_pos[:, None]


def _check_qkv(q, k, v):
    for name, x in (("Q", q), ("K", k), ("V", v)):
        check_tensor4(x, name)
    if k.shape != v.shape:
        raise ValueError(f"K and V shapes differ: {k.shape} vs {v.shape}")
    if q.shape[0] != k.shape[0] or q.shape[3] != k.shape[3]:
        raise ValueError(f"Q {q.shape} and K {k.shape} disagree on batch or head size")
    if q.shape[2] % k.shape[2]:
        raise ValueError(
            f"query heads {q.shape[2]} not divisible by kv heads {k.shape[2]}")


def _scores(q, k):
    # (bs, hc, Lq, Lk)
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[3]))
    return np.einsum("bqhd,bkhd->bhqk", q, k) * scale


def _probs(q, k, causal, positions):
    L = q.shape[1]
    if k.shape[1] != L:
        raise ValueError(f"sequence lengths differ: Q has {L}, K has {k.shape[1]}")
    k = expand_kv(k, q.shape[2])
    s = _scores(q, k)
    if causal:
        pos = np.arange(L) if positions is None else np.asarray(positions)
        if pos.shape != (L,):
            raise ValueError(f"positions must have length {L}, got {pos.shape}")
        s = np.where(causal_mask(pos, pos)[None, None], -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def reference_attention(q, k, v, causal=False, positions=None):
    """Exact softmax(Q K^T / sqrt(hs)) V with optional position-based causal mask.

    ``positions`` gives the original-order index of each stored token; the
    mask compares positions, never storage order.  K/V may carry fewer heads
    than Q (grouped-query attention).
    """
    _check_qkv(q, k, v)
    p = _probs(q, k, causal, positions)
    return np.einsum("bhqk,bkhd->bqhd", p, expand_kv(v, q.shape[2]))


def softmax_probs(q, k, causal=False, positions=None):
    """Attention probabilities, layout (bs, hc, Lq, Lk)."""
    _check_qkv(q, k, k)
    return _probs(q, k, causal, positions)


def reference_attention_grad(q, k, v, do, causal=False, positions=None):
    """Analytic (dQ, dK, dV) of reference_attention for cotangent ``do``."""
    _check_qkv(q, k, v)
    if do.shape != q.shape:
        raise ValueError(f"dO shape {do.shape} does not match Q {q.shape}")
    hc, kv_hc = q.shape[2], k.shape[2]
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[3]))
    ke = expand_kv(k, hc)
    ve = expand_kv(v, hc)
    p = _probs(q, k, causal, positions)
    dv = np.einsum("bhqk,bqhd->bkhd", p, do)
    dp = np.einsum("bqhd,bkhd->bhqk", do, ve)
    # rowsum(P * dP) == rowsum(dO * O)
    delta = (p * dp).sum(axis=-1, keepdims=True)
    ds = p * (dp - delta)
    dq = np.einsum("bhqk,bkhd->bqhd", ds, ke) * scale
    dk = np.einsum("bhqk,bqhd->bkhd", ds, q) * scale
    return dq, reduce_kv(dk, kv_hc), reduce_kv(dv, kv_hc)


@dataclass
class SoftmaxState:
    """Running online-softmax statistics for a block of query rows.

    m and l have shape (bs, Lq, hc); acc has the output shape (bs, Lq, hc, hs).
    """

    m: np.ndarray
    l: np.ndarray
    acc: np.ndarray

    @classmethod
    def empty(cls, q: np.ndarray) -> SoftmaxState:
        bs, L, hc, _ = q.shape
        return cls(
            m=np.full((bs, L, hc), -np.inf, dtype=q.dtype),
            l=np.zeros((bs, L, hc), dtype=q.dtype),
            acc=np.zeros_like(q),
        )

    def copy(self) -> SoftmaxState:
        return SoftmaxState(self.m.copy(), self.l.copy(), self.acc.copy())


def blockwise_update(state: SoftmaxState, q, k, v, mask=None) -> SoftmaxState:
    """Fold one key/value block into ``state`` and return the new state.

    ``mask`` is a boolean (Lq, Lk) array, True marking pairs to drop.  Rows
    that see no unmasked key in this block keep their previous statistics;
    a block that is masked everywhere returns ``state`` untouched.
    """
    _check_qkv(q, k, v)
    if mask is not None and mask.all():
        return state
    hc = q.shape[2]
    s = _scores(q, expand_kv(k, hc))  # (bs, hc, Lq, Lk)
    if mask is not None:
        s = np.where(mask[None, None], -np.inf, s)
    s = s.transpose(0, 2, 1, 3)  # (bs, Lq, hc, Lk)

    m_blk = s.max(axis=-1)
    m_new = np.maximum(state.m, m_blk)
    seen = np.isfinite(m_new)
    # rows with no finite score so far: hold m at 0 so exp() stays finite
    m_safe = np.where(seen, m_new, 0)
    alpha = np.where(seen, np.exp(state.m - m_safe), 1)
    p = np.exp(s - m_safe[..., None])
    l_new = state.l * alpha + p.sum(axis=-1)
    pv = np.einsum("bqhk,bkhd->bqhd", p, expand_kv(v, hc))
    acc_new = state.acc * alpha[..., None] + pv
    return SoftmaxState(m=m_new.astype(q.dtype), l=l_new.astype(q.dtype),
                        acc=acc_new.astype(q.dtype))


def finalize(state: SoftmaxState) -> tuple[np.ndarray, np.ndarray]:
    """Return (O, logsumexp) with O = acc / l and logsumexp = m + log(l)."""
    if np.any(state.l == 0):
        raise ValueError("row saw no keys")
    out = state.acc / state.l[..., None]
    lse = state.m + np.log(state.l)
    return out, lse


def blockwise_attention(q, k, v, causal=False, positions=None, block_size=None,
                        order=None):
    """Single-device online-softmax attention over key blocks.

    ``order`` optionally permutes the sequence of key blocks; the result is
    independent of it up to rounding.
    """
    _check_qkv(q, k, v)
    L = k.shape[1]
    pos = np.arange(L) if positions is None else np.asarray(positions)
    block_size = block_size or L
    starts = list(range(0, L, block_size))
    if order is not None:
        starts = [starts[i] for i in order]
    state = SoftmaxState.empty(q)
    for s0 in starts:
        sl = slice(s0, s0 + block_size)
        mask = causal_mask(pos, pos[sl]) if causal else None
        state = blockwise_update(state, q, k[:, sl], v[:, sl], mask)
    return finalize(state)[0]


def random_qkv(rng: np.random.Generator, bs, L, hc, kv_hc, hs, dtype=np.float64):
    """Standard-normal Q, K, V, dO drawn in a fixed order from ``rng``."""
    q = rng.standard_normal((bs, L, hc, hs)).astype(dtype)
    k = rng.standard_normal((bs, L, kv_hc, hs)).astype(dtype)
    v = rng.standard_normal((bs, L, kv_hc, hs)).astype(dtype)
    do = rng.standard_normal((bs, L, hc, hs)).astype(dtype)
    return q, k, v, do
