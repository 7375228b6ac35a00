import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from oracles import causal_pairs_brute
from uspsim.numerics import (blockwise_attention, random_qkv, reference_attention,
                             reference_attention_grad)
from uspsim.simcomm import ProcessGroup, ProcessMesh, spawn
from uspsim.usp import (BWD_IDX, FWD_IDX, HEAD, SEQ, ConstraintError, Shard, all_to_all_4d,
                        causal_workload, check_usp_config, even_partition, ring_attention,
                        ring_attention_backward, sequence_assignment, simulate_usp,
                        zigzag_partition)


# load balancing

def test_zigzag_examples():
    parts = zigzag_partition(16, 4)
    assert parts[0] == [0, 1, 14, 15]
    assert parts[3] == [6, 7, 8, 9]
    assert zigzag_partition(10, 1) == [list(range(10))]


def test_zigzag_rejects_bad_length():
    with pytest.raises(ValueError, match="2R"):
        zigzag_partition(12, 4)


def test_workload_examples():
    assert causal_workload(even_partition(16, 4), 16) == [10, 26, 42, 58]
    assert causal_workload(zigzag_partition(16, 4), 16) == [34] * 4
    assert causal_workload([list(range(9))], 9) == [45]


def test_workload_requires_cover():
    with pytest.raises(ValueError):
        causal_workload([[0, 1], [1, 2]], 3)


@settings(max_examples=50, deadline=None)
@given(R=st.integers(1, 8), chunk=st.integers(1, 6))
def test_zigzag_is_perfectly_balanced(R, chunk):
    L = 2 * R * chunk
    parts = zigzag_partition(L, R)
    assert sorted(p for part in parts for p in part) == list(range(L))
    counts = causal_workload(parts, L)
    assert counts == causal_pairs_brute(parts, L)
    assert counts == [L * (L + 1) // (2 * R)] * R


def test_even_partition_ratio_approaches_2r_minus_1():
    c = causal_workload(even_partition(4096, 4), 4096)
    assert c[-1] / c[0] == pytest.approx(7, rel=0.05)


# all_to_all_4d

def _a2a_roundtrip(U, tokens, heads):
    data = np.random.default_rng(0).standard_normal((U, 2, tokens, heads, 3))
    group = ProcessGroup(tuple(range(U)))

    def program(comm):
        pos = np.arange(tokens) + comm.rank * tokens
        s = Shard(data[comm.rank], pos, SEQ)
        h = all_to_all_4d(comm, s, *FWD_IDX, group)
        back = all_to_all_4d(comm, h, *BWD_IDX, group)
        return s, h, back

    return spawn(U, program)


def test_a2a4d_single_rank_is_identity():
    res = _a2a_roundtrip(1, 3, 2)
    s, h, _ = res.results[0]
    assert np.array_equal(h.data, s.data) and h.layout == HEAD
    assert res.ledger.total_bytes() == 0


@pytest.mark.parametrize("U,tokens,heads", [(2, 2, 4), (4, 3, 8), (3, 1, 6)])
def test_a2a4d_round_trip_is_bitwise(U, tokens, heads):
    for s, _, back in _a2a_roundtrip(U, tokens, heads).results:
        assert back.layout == SEQ
        assert back.data.tobytes() == s.data.tobytes()
        assert np.array_equal(back.positions, s.positions)


def test_a2a4d_index_mapping():
    # rank 0 ends up with heads {0, 1} of all 4 tokens, its own tokens first
    res = _a2a_roundtrip(2, 2, 4)
    inputs = [r[0] for r in res.results]
    h0 = res.results[0][1]
    assert h0.data.shape == (2, 4, 2, 3)
    np.testing.assert_array_equal(h0.data[:, :2], inputs[0].data[:, :, 0:2])
    np.testing.assert_array_equal(h0.data[:, 2:], inputs[1].data[:, :, 0:2])
    np.testing.assert_array_equal(h0.positions, [0, 1, 2, 3])
    h1 = res.results[1][1]
    np.testing.assert_array_equal(h1.data[:, 2:], inputs[1].data[:, :, 2:4])


def test_a2a4d_rejects_wrong_layout_and_heads():
    group = ProcessGroup((0, 1))

    def wrong_layout(comm):
        all_to_all_4d(comm, Shard(np.zeros((1, 2, 2, 1)), [0, 1], HEAD), *FWD_IDX, group)

    with pytest.raises(ValueError, match="expects sequence-sharded"):
        spawn(2, wrong_layout)

    def odd_heads(comm):
        all_to_all_4d(comm, Shard(np.zeros((1, 2, 3, 1)), [0, 1], SEQ), *FWD_IDX, group)

    with pytest.raises(ConstraintError):
        spawn(2, odd_heads)


# ring attention

def _run_ring(q, k, v, R, causal, do=None):
    L = q.shape[1]
    parts = zigzag_partition(L, R) if causal else even_partition(L, R)
    group = ProcessGroup(tuple(range(R)), "ring")

    def program(comm):
        pos = np.array(parts[comm.rank])
        qs, ks, vs = q[:, pos], k[:, pos], v[:, pos]
        o, lse = ring_attention(comm, qs, ks, vs, pos, pos, group, causal)
        grads = None
        if do is not None:
            grads = ring_attention_backward(comm, qs, ks, vs, o, do[:, pos], lse, pos, pos,
                                            group, causal)
        return pos, o, grads

    res = spawn(R, program)
    out = np.empty_like(q)
    grads = [np.empty_like(q), np.empty_like(k), np.empty_like(v)]
    for pos, o, g in res.results:
        out[:, pos] = o
        if g is not None:
            for dst, x in zip(grads, g):
                dst[:, pos] = x
    return out, grads, res.ledger


def test_ring_of_one_equals_blockwise():
    q, k, v, _ = random_qkv(np.random.default_rng(0), 1, 6, 2, 2, 3)
    out, _, ledger = _run_ring(q, k, v, 1, True)
    np.testing.assert_array_equal(out, blockwise_attention(q, k, v, causal=True))
    assert len(ledger) == 0


def test_ring_two_noncausal():
    q, k, v, do = random_qkv(np.random.default_rng(1), 2, 8, 2, 2, 4)
    out, grads, _ = _run_ring(q, k, v, 2, False, do)
    np.testing.assert_allclose(out, reference_attention(q, k, v), rtol=0, atol=1e-12)
    for g, ref in zip(grads, reference_attention_grad(q, k, v, do)):
        np.testing.assert_allclose(g, ref, rtol=0, atol=1e-10)


def test_ring_four_causal_zigzag():
    q, k, v, do = random_qkv(np.random.default_rng(2), 1, 16, 4, 2, 4)
    out, grads, ledger = _run_ring(q, k, v, 4, True, do)
    np.testing.assert_allclose(out, reference_attention(q, k, v, causal=True), rtol=0, atol=1e-12)
    for g, ref in zip(grads, reference_attention_grad(q, k, v, do, causal=True)):
        np.testing.assert_allclose(g, ref, rtol=0, atol=1e-10)
    # forward K,V and backward K,V,dK,dV: 3 hops each
    assert len(ledger.filter("ring_shift")) == 3 * 6


def test_ring_backward_zero_cotangent():
    q, k, v, _ = random_qkv(np.random.default_rng(3), 1, 8, 2, 1, 2)
    _, grads, _ = _run_ring(q, k, v, 2, True, np.zeros_like(q))
    for g in grads:
        assert not g.any()


def test_ring_backward_needs_forward_artifacts():
    def program(comm):
        x = np.zeros((1, 2, 1, 1))
        ring_attention_backward(comm, x, x, x, None, x, None, [0, 1], [0, 1],
                                comm.world_group, False)

    with pytest.raises(ValueError, match="forward output"):
        spawn(1, program)


# unified attention

def test_degenerate_mesh_equals_reference():
    q, k, v, do = random_qkv(np.random.default_rng(4), 2, 8, 4, 2, 3)
    run = simulate_usp(q, k, v, do, 1, 1, causal=True)
    np.testing.assert_allclose(run.out, reference_attention(q, k, v, causal=True), atol=1e-14)
    assert run.ledger.total_bytes() == 0


def test_all_factorizations_of_eight_agree():
    q, k, v, do = random_qkv(np.random.default_rng(5), 1, 32, 8, 8, 4)
    ref = reference_attention(q, k, v, causal=True)
    outs = []
    for U in (1, 2, 4, 8):
        run = simulate_usp(q, k, v, None, U, 8 // U, causal=True)
        np.testing.assert_allclose(run.out, ref, rtol=0, atol=1e-12)
        outs.append(run.out)
    for a, b in itertools.combinations(outs, 2):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_fp32_oracle_equivalence():
    q, k, v, do = random_qkv(np.random.default_rng(6), 1, 16, 4, 2, 8, np.float32)
    ref = reference_attention(*(x.astype(np.float64) for x in (q, k, v)), causal=True)
    run = simulate_usp(q, k, v, do, 2, 2, causal=True)
    assert run.out.dtype == np.float32
    np.testing.assert_allclose(run.out, ref, rtol=0, atol=1e-4)


def test_llama3_8b_degrees():
    check_usp_config(L=64, hc=32, kv_hc=8, ulysses=8, ring=2)
    with pytest.raises(ConstraintError, match="cannot exceed the number of attention heads") as exc:
        check_usp_config(L=64, hc=32, kv_hc=8, ulysses=16, ring=1)
    assert exc.value.tip == "head-limit"


def test_mqa_rejects_ulysses():
    with pytest.raises(ConstraintError):
        check_usp_config(L=16, hc=4, kv_hc=1, ulysses=2, ring=1)


def test_sequence_assignment_covers_and_uses_zigzag():
    mesh = ProcessMesh(2, 2)
    parts = sequence_assignment(8, mesh, causal=True)
    assert [p.tolist() for p in parts] == [[0, 1], [6, 7], [2, 3], [4, 5]]
    assert sorted(np.concatenate(parts).tolist()) == list(range(8))


@pytest.mark.parametrize("U,R", [(2, 2), (4, 1), (1, 4), (2, 4)])
def test_comm_accounting(U, R):
    hc, kv = 8, 4
    q, k, v, do = random_qkv(np.random.default_rng(7), 1, 16, hc, kv, 4)
    ledger = simulate_usp(q, k, v, do, U, R, causal=True).ledger
    a2a = ledger.filter("all_to_all")
    groups = {e.group for e in a2a}
    assert len(groups) == R
    for g in groups:
        events = [e for e in a2a if e.group == g]
        assert len(events) == 8
        q_bytes, k_bytes, v_bytes = (e.total_bytes for e in events[:3])
        assert k_bytes == v_bytes == q_bytes * kv / hc
    shifts = ledger.filter("ring_shift")
    if R == 1:
        assert not shifts
    else:
        # per ring group: fwd K,V; bwd K,V,dK,dV; R-1 shifts each
        for u in range(U):
            assert len([e for e in shifts if e.group == f"ring[{u}]"]) == 6 * (R - 1)


def test_usp_is_deterministic():
    q, k, v, do = random_qkv(np.random.default_rng(8), 1, 16, 4, 4, 2)
    a = simulate_usp(q, k, v, do, 2, 2, True)
    b = simulate_usp(q, k, v, do, 2, 2, True)
    for x, y in zip((a.out, a.dq, a.dk, a.dv), (b.out, b.dq, b.dk, b.dv)):
        assert x.tobytes() == y.tobytes()
    assert a.ledger.entries == b.ledger.entries


@settings(max_examples=12, deadline=None)
@given(mesh=st.sampled_from([(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1), (2, 3)]),
       kv=st.sampled_from([2, 4]), causal=st.booleans(), seed=st.integers(0, 2**16))
def test_oracle_equivalence_property(mesh, kv, causal, seed):
    U, R = mesh
    assume(kv % U == 0)
    L = 4 * U * R
    q, k, v, do = random_qkv(np.random.default_rng(seed), 1, L, 4, kv, 3)
    run = simulate_usp(q, k, v, do, U, R, causal)
    np.testing.assert_allclose(run.out, reference_attention(q, k, v, causal), rtol=0, atol=1e-12)
    for g, ref in zip((run.dq, run.dk, run.dv), reference_attention_grad(q, k, v, do, causal)):
        np.testing.assert_allclose(g, ref, rtol=0, atol=1e-10)
