"""Unified Ulysses + Ring sequence-parallel attention on the simulated runtime.

Inputs arrive sequence-sharded: rank (u, r) of a ``ProcessMesh`` holds
``L / (U R)`` tokens laid out as ``(bs, tokens, heads, hs)``.  The forward pass
all-to-alls Q, K, V inside the Ulysses row (scatter heads, gather tokens),
runs load-balanced ring attention down the Ring column, and all-to-alls O
back.  Every shard carries the original position of each token it holds;
causal masking compares positions, so the zigzag reordering needs no
special cases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (SoftmaxState, blockwise_update, causal_mask, expand_kv, finalize,
                       reduce_kv)
from .simcomm import CommLedger, Communicator, ProcessGroup, ProcessMesh, spawn

SEQ = "sequence-sharded"
HEAD = "head-sharded"

# forward: scatter the head axis, gather the sequence axis
FWD_IDX = (2, 1)
BWD_IDX = (1, 2)


class ConstraintError(ValueError):
    """Invalid parallel configuration; ``tip`` names the governing rule."""

    def __init__(self, message: str, tip: str):
        super().__init__(message)
        self.tip = tip


@dataclass
class Shard:
    data: np.ndarray
    positions: np.ndarray
    layout: str

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.data.shape[1] != len(self.positions):
            raise ValueError(f"shard holds {self.data.shape[1]} tokens but "
                             f"{len(self.positions)} positions")
        if self.layout not in (SEQ, HEAD):
            raise ValueError(f"unknown layout {self.layout!r}")


def zigzag_partition(L: int, R: int) -> list[list[int]]:
    """Ring rank p gets chunk p and chunk 2R-1-p of 2R equal chunks."""
    if R < 1 or L % (2 * R):
        raise ValueError(f"zigzag partition needs L divisible by 2R, got L={L}, R={R}")
    c = L // (2 * R)
    return [list(range(p * c, (p + 1) * c)) + list(range((2 * R - 1 - p) * c, (2 * R - p) * c))
            for p in range(R)]


def even_partition(L: int, R: int) -> list[list[int]]:
    if R < 1 or L % R:
        raise ValueError(f"even partition needs L divisible by R, got L={L}, R={R}")
    c = L // R
    return [list(range(p * c, (p + 1) * c)) for p in range(R)]


def causal_workload(assignment, L: int) -> list[int]:
    """Causal (q, k) pairs with k <= q per rank; query q contributes q + 1 pairs."""
    covered = sorted(p for part in assignment for p in part)
    if covered != list(range(L)):
        raise ValueError("assignment does not cover 0..L-1 exactly once")
    return [sum(q + 1 for q in part) for part in assignment]


def check_usp_config(L: int, hc: int, kv_hc: int, ulysses: int, ring: int) -> None:
    """Raise ConstraintError for a mesh the algorithm cannot run."""
    if ulysses < 1 or ring < 1:
        raise ConstraintError(f"degrees must be >= 1 (ulysses={ulysses}, ring={ring})",
                              "degrees")
    if hc % kv_hc:
        raise ConstraintError(f"query heads {hc} not divisible by kv heads {kv_hc}", "gqa")
    if ulysses > kv_hc:
        raise ConstraintError(
            f"Ulysses degree {ulysses} exceeds KV head count {kv_hc}: the Ulysses degree "
            f"cannot exceed the number of attention heads", "head-limit")
    if kv_hc % ulysses:
        raise ConstraintError(
            f"Ulysses degree {ulysses} does not divide KV head count {kv_hc}", "head-limit")
    if L % (2 * ring):
        raise ConstraintError(
            f"sequence length {L} not divisible by 2 x ring degree ({2 * ring}) "
            f"needed for zigzag balancing", "zigzag")
    if (L // ring) % ulysses:
        raise ConstraintError(
            f"per-ring-rank tokens {L // ring} not divisible by Ulysses degree {ulysses}",
            "zigzag")


def sequence_assignment(L: int, mesh: ProcessMesh, causal: bool) -> list[np.ndarray]:
    """Original positions held by each world rank in the sequence-sharded layout.

    Ring rank r owns a zigzag slice (causal) or a contiguous slice; its Ulysses
    row splits that slice into U consecutive sub-shards.
    """
    U, R = mesh.ulysses, mesh.ring
    parts = zigzag_partition(L, R) if causal else even_partition(L, R)
    t = L // (U * R)
    out = []
    for rank in range(mesh.world_size):
        u, r = mesh.coords(rank)
        out.append(np.asarray(parts[r][u * t:(u + 1) * t], dtype=np.int64))
    return out


def all_to_all_4d(comm: Communicator, shard: Shard, scatter_idx: int, gather_idx: int,
                  group: ProcessGroup) -> Shard:
    """Swap which of {sequence, head} is sharded across ``group``.

    Axis indices refer to the (bs, L, hc, hs) layout: (2, 1) scatters heads
    and gathers tokens, (1, 2) is its exact inverse.
    """
    n = group.size
    if (scatter_idx, gather_idx) == FWD_IDX:
        if shard.layout != SEQ:
            raise ValueError(f"forward all_to_all_4d expects {SEQ} input, got {shard.layout}")
        heads = shard.data.shape[2]
        if heads % n:
            raise ConstraintError(f"{heads} heads not divisible by Ulysses degree {n}",
                                  "head-limit")
        parts = np.split(shard.data, n, axis=2)
        recv, recv_pos = comm.all_to_all(parts, group, meta=[shard.positions] * n)
        return Shard(np.concatenate(recv, axis=1), np.concatenate(recv_pos), HEAD)
    if (scatter_idx, gather_idx) == BWD_IDX:
        if shard.layout != HEAD:
            raise ValueError(f"backward all_to_all_4d expects {HEAD} input, got {shard.layout}")
        tokens = shard.data.shape[1]
        if tokens % n:
            raise ValueError(f"{tokens} tokens not divisible by group size {n}")
        parts = np.split(shard.data, n, axis=1)
        pos_parts = np.split(shard.positions, n)
        recv, recv_pos = comm.all_to_all(parts, group, meta=pos_parts)
        for p in recv_pos[1:]:
            if not np.array_equal(p, recv_pos[0]):
                raise ValueError("Ulysses peers disagree on token positions")
        return Shard(np.concatenate(recv, axis=2), recv_pos[0], SEQ)
    raise ValueError(f"unsupported (scatter_idx, gather_idx) = ({scatter_idx}, {gather_idx})")


def _check_ring_inputs(q, k, v, group):
    if k.shape != v.shape:
        raise ValueError(f"K {k.shape} and V {v.shape} shard shapes differ")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"ring shards must hold equal token counts: {q.shape} vs {k.shape}")
    if group.size < 1:
        raise ValueError("empty ring group")


def ring_attention(comm: Communicator, q, k, v, q_pos, k_pos, group: ProcessGroup,
                   causal: bool):
    """Online-softmax attention with K/V circulating around ``group``.

    Step t folds in the K/V block that started on ring rank (r - t) mod R;
    the last step skips the shift.  Returns (O, logsumexp).
    """
    _check_ring_inputs(q, k, v, group)
    R = group.size
    state = SoftmaxState.empty(q)
    for t in range(R):
        mask = causal_mask(q_pos, k_pos) if causal else None
        state = blockwise_update(state, q, k, v, mask)
        if t < R - 1:
            k, k_pos = comm.ring_shift(k, group, meta=k_pos)
            v = comm.ring_shift(v, group)
    return finalize(state)


def ring_attention_backward(comm: Communicator, q, k, v, o, do, lse, q_pos, k_pos,
                            group: ProcessGroup, causal: bool):
    """Gradients of ring_attention, recomputing block probabilities from ``lse``.

    dQ accumulates locally.  The owner keeps its own dK/dV contribution at
    home; every other contribution rides an accumulator that starts one rank
    downstream of the owner, picks up a partial at each later stop and takes
    its last hop home after the final step.  K, V, dK and dV therefore each
    shift R-1 times.
    """
    if o is None or lse is None:
        raise ValueError("ring_attention_backward needs the forward output and logsumexp")
    _check_ring_inputs(q, k, v, group)
    R = group.size
    hc, kv_hc = q.shape[2], k.shape[2]
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[3]))
    lse_t = lse.transpose(0, 2, 1)[..., None]  # (bs, hc, Lq, 1)
    delta = (do * o).sum(axis=-1).transpose(0, 2, 1)[..., None]
    dq = np.zeros_like(q)
    dk_home = dv_home = dk_acc = dv_acc = None
    for t in range(R):
        ke = expand_kv(k, hc)
        s = np.einsum("bqhd,bkhd->bhqk", q, ke) * scale
        if causal:
            s = np.where(causal_mask(q_pos, k_pos)[None, None], -np.inf, s)
        p = np.exp(s - lse_t)
        dv_part = reduce_kv(np.einsum("bhqk,bqhd->bkhd", p, do), kv_hc)
        dp = np.einsum("bqhd,bkhd->bhqk", do, expand_kv(v, hc))
        ds = p * (dp - delta)
        dq = dq + np.einsum("bhqk,bkhd->bqhd", ds, ke) * scale
        dk_part = reduce_kv(np.einsum("bhqk,bqhd->bkhd", ds, q) * scale, kv_hc)
        if t == 0:
            dk_home, dv_home = dk_part, dv_part
        elif t == 1:
            dk_acc, dv_acc = dk_part, dv_part
        else:
            dk_acc, dv_acc = dk_acc + dk_part, dv_acc + dv_part
        if t < R - 1:
            k, k_pos = comm.ring_shift(k, group, meta=k_pos)
            v = comm.ring_shift(v, group)
        if t >= 1:
            # the accumulator follows its K/V block to the next rank
            dk_acc = comm.ring_shift(dk_acc, group)
            dv_acc = comm.ring_shift(dv_acc, group)
    if R == 1:
        return dq, dk_home, dv_home
    return dq, dk_home + dk_acc, dv_home + dv_acc


@dataclass
class UspContext:
    """Head-sharded forward artifacts kept for the backward pass."""

    q: Shard
    k: Shard
    v: Shard
    out: np.ndarray
    lse: np.ndarray
    mesh: ProcessMesh
    causal: bool


def _validate_inputs(q: Shard, k: Shard, v: Shard, mesh: ProcessMesh):
    U, R = mesh.ulysses, mesh.ring
    L = q.data.shape[1] * U * R
    check_usp_config(L, q.data.shape[2], k.data.shape[2], U, R)
    for name, s in (("Q", q), ("K", k), ("V", v)):
        if s.layout != SEQ:
            raise ValueError(f"{name} must be {SEQ}, got {s.layout}")


def usp_attention_forward(comm: Communicator, q: Shard, k: Shard, v: Shard,
                          mesh: ProcessMesh, causal: bool):
    """Sequence-sharded Q, K, V -> (sequence-sharded O, context for backward)."""
    _validate_inputs(q, k, v, mesh)
    ug, rg = mesh.groups_of(comm.rank)
    qh = all_to_all_4d(comm, q, *FWD_IDX, ug)
    kh = all_to_all_4d(comm, k, *FWD_IDX, ug)
    vh = all_to_all_4d(comm, v, *FWD_IDX, ug)
    oh, lse = ring_attention(comm, qh.data, kh.data, vh.data, qh.positions, kh.positions,
                             rg, causal)
    o = all_to_all_4d(comm, Shard(oh, qh.positions, HEAD), *BWD_IDX, ug)
    return o, UspContext(qh, kh, vh, oh, lse, mesh, causal)


def usp_attention_backward(comm: Communicator, do: Shard, ctx: UspContext):
    """Sequence-sharded dO -> sequence-sharded (dQ, dK, dV)."""
    ug, rg = ctx.mesh.groups_of(comm.rank)
    doh = all_to_all_4d(comm, do, *FWD_IDX, ug)
    dqh, dkh, dvh = ring_attention_backward(
        comm, ctx.q.data, ctx.k.data, ctx.v.data, ctx.out, doh.data, ctx.lse,
        ctx.q.positions, ctx.k.positions, rg, ctx.causal)
    dq = all_to_all_4d(comm, Shard(dqh, ctx.q.positions, HEAD), *BWD_IDX, ug)
    dk = all_to_all_4d(comm, Shard(dkh, ctx.k.positions, HEAD), *BWD_IDX, ug)
    dv = all_to_all_4d(comm, Shard(dvh, ctx.v.positions, HEAD), *BWD_IDX, ug)
    return dq, dk, dv


def usp_attention(comm: Communicator, q: Shard, k: Shard, v: Shard, mesh: ProcessMesh,
                  causal: bool) -> Shard:
    return usp_attention_forward(comm, q, k, v, mesh, causal)[0]


@dataclass
class UspRun:
    out: np.ndarray
    dq: np.ndarray | None
    dk: np.ndarray | None
    dv: np.ndarray | None
    ledger: CommLedger
    assignment: list[np.ndarray]


def simulate_usp(q, k, v, do=None, ulysses=1, ring=1, causal=False) -> UspRun:
    """Shard global tensors over a U x R mesh, run USP attention, gather results.

    Gathered outputs are put back in original token order.  With ``do`` the
    backward pass runs too.
    """
    L = q.shape[1]
    check_usp_config(L, q.shape[2], k.shape[2], ulysses, ring)
    mesh = ProcessMesh(ulysses, ring)
    assignment = sequence_assignment(L, mesh, causal)

    def program(comm):
        pos = assignment[comm.rank]
        qs, ks, vs = (Shard(x[:, pos], pos, SEQ) for x in (q, k, v))
        o, ctx = usp_attention_forward(comm, qs, ks, vs, mesh, causal)
        if do is None:
            return o, None
        grads = usp_attention_backward(comm, Shard(do[:, pos], pos, SEQ), ctx)
        return o, grads

    res = spawn(mesh.world_size, program)
    out = np.empty_like(q)
    grads = None if do is None else (np.empty_like(q), np.empty_like(k), np.empty_like(v))
    for o, g in res.results:
        out[:, o.positions] = o.data
        if g is not None:
            for dst, s in zip(grads, g):
                dst[:, s.positions] = s.data
    dq, dk, dv = grads if grads is not None else (None, None, None)
    return UspRun(out, dq, dk, dv, res.ledger, assignment)
