import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uspsim.simcomm import (CollectiveMismatchError, DeadlockError, ProcessGroup, ProcessMesh,
                            spawn)


def test_single_rank_collectives_are_identity():
    x = np.arange(6.0).reshape(3, 2)

    def program(comm):
        return [comm.all_reduce(x), comm.all_gather(x), comm.reduce_scatter(x),
                comm.all_to_all([x])[0], comm.ring_shift(x)]

    res = spawn(1, program)
    for y in res.results[0]:
        np.testing.assert_array_equal(y, x)
    assert len(res.ledger) == 5
    assert res.ledger.total_bytes() == 0


def test_mismatched_kinds_name_both_call_sites():
    def program(comm):
        if comm.rank == 0:
            return comm.all_reduce(np.ones(2))
        return comm.all_gather(np.ones(2))

    with pytest.raises(CollectiveMismatchError) as exc:
        spawn(2, program)
    msg = str(exc.value)
    assert "all_reduce" in msg and "all_gather" in msg
    assert msg.count("test_simcomm.py:") == 2


def test_mismatched_payload_sizes():
    def program(comm):
        return comm.all_reduce(np.ones(2 + comm.rank))

    with pytest.raises(CollectiveMismatchError, match="payload sizes"):
        spawn(2, program)


def test_rank_leaving_early_is_a_deadlock():
    def program(comm):
        if comm.rank == 2:
            return None
        return comm.all_reduce(np.ones(1))

    with pytest.raises(DeadlockError, match="rank 2 finished"):
        spawn(3, program)


def test_crossed_group_order_is_a_deadlock():
    a, b = ProcessGroup((0, 1), "a"), ProcessGroup((0, 1), "b")

    def program(comm):
        first, second = (a, b) if comm.rank == 0 else (b, a)
        comm.all_reduce(np.ones(1), first)
        comm.all_reduce(np.ones(1), second)

    with pytest.raises(DeadlockError):
        spawn(2, program)


def test_rank_exception_propagates():
    def program(comm):
        if comm.rank == 1:
            raise KeyError("boom")
        return comm.all_reduce(np.ones(1))

    with pytest.raises(KeyError, match="boom"):
        spawn(2, program)


def test_all_reduce_scalar_four_ranks():
    vals = [0.1, 0.7, 1e16, -1e16]

    def program(comm):
        return comm.all_reduce(np.float64(vals[comm.rank]))

    res = spawn(4, program)
    expected = ((vals[0] + vals[1]) + vals[2]) + vals[3]
    assert all(r == expected for r in res.results)
    (entry,) = res.ledger.entries
    assert [b for _, b in entry.bytes_sent] == [12, 12, 12, 12]


def test_all_to_all_transposition():
    def program(comm):
        mine = [np.array([10.0 * comm.rank + j]) for j in range(2)]
        return comm.all_to_all(mine)

    res = spawn(2, program)
    assert [p.item() for p in res.results[0]] == [0.0, 10.0]
    assert [p.item() for p in res.results[1]] == [1.0, 11.0]


def test_all_to_all_bytes_exclude_self_part():
    def program(comm):
        return comm.all_to_all([np.zeros(2) for _ in range(4)])  # 16 bytes per part

    (entry,) = spawn(4, program).ledger.entries
    assert [b for _, b in entry.bytes_sent] == [48] * 4


def test_all_to_all_rejects_ragged_parts():
    def program(comm):
        return comm.all_to_all([np.zeros(1), np.zeros(2)])

    with pytest.raises(ValueError, match="ragged"):
        spawn(2, program)


def test_all_to_all_meta_follows_payload():
    def program(comm):
        return comm.all_to_all([np.zeros(1)] * 3, meta=[(comm.rank, j) for j in range(3)])

    res = spawn(3, program)
    for i, (_, meta) in enumerate(res.results):
        assert [tuple(m) for m in meta] == [(j, i) for j in range(3)]
    assert res.ledger.total_bytes() == 3 * 2 * 8


def test_reduce_scatter_of_ones():
    def program(comm):
        return comm.reduce_scatter(np.ones((4, 3)))

    res = spawn(4, program)
    for shard in res.results:
        np.testing.assert_array_equal(shard, np.full((1, 3), 4.0))
    (entry,) = res.ledger.entries
    assert entry.bytes_sent[0][1] == 96 * 3 / 4


def test_all_gather_order_and_bytes():
    def program(comm):
        return comm.all_gather(np.array([comm.rank, comm.rank]), axis=0)

    res = spawn(3, program)
    np.testing.assert_array_equal(res.results[2], [0, 0, 1, 1, 2, 2])
    assert res.ledger.entries[0].bytes_sent[0][1] == 2 * 16


def test_ring_shift_direction_and_full_cycle():
    def program(comm):
        x = np.array([float(comm.rank)])
        one = comm.ring_shift(x)
        y = x
        for _ in range(comm.world_size):
            y = comm.ring_shift(y)
        return one, y, comm.ring_shift(x, steps=2)

    res = spawn(4, program)
    for r, (one, cycle, two) in enumerate(res.results):
        assert one.item() == (r - 1) % 4
        assert cycle.item() == r
        assert two.item() == (r - 2) % 4
    sent = [e.bytes_sent[0][1] for e in res.ledger.entries]
    assert sent == [8] * 5 + [16]


def test_subgroups_on_a_mesh():
    mesh = ProcessMesh(ulysses=2, ring=3)
    assert mesh.ulysses_group(1).ranks == (2, 3)
    assert mesh.ring_group(1).ranks == (1, 3, 5)
    assert mesh.coords(5) == (1, 2)

    def program(comm):
        row, col = mesh.groups_of(comm.rank)
        return (comm.all_reduce(np.float64(comm.rank), row).item(),
                comm.all_reduce(np.float64(comm.rank), col).item())

    res = spawn(6, program)
    assert res.results[4] == (4 + 5, 0 + 2 + 4)
    assert res.results[1] == (0 + 1, 1 + 3 + 5)


def test_non_member_call_is_rejected():
    def program(comm):
        return comm.all_reduce(np.ones(1), ProcessGroup((0,)))

    with pytest.raises(ValueError, match="not a member"):
        spawn(2, program)


def test_ledger_csv_columns():
    def program(comm):
        comm.all_reduce(np.ones(3))
        comm.ring_shift(np.ones(1))

    buf = io.StringIO()
    spawn(2, program).ledger.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,collective,group,rank,bytes"
    assert lines[1:] == ["0,all_reduce,world,0,24", "0,all_reduce,world,1,24",
                         "1,ring_shift,world,0,8", "1,ring_shift,world,1,8"]


def _mixed_program(comm):
    mesh = ProcessMesh(2, 2)
    row, col = mesh.groups_of(comm.rank)
    x = np.random.default_rng(comm.rank).standard_normal(8)
    a = comm.all_reduce(x, row)
    b = comm.ring_shift(a, col)
    c = comm.all_to_all(np.split(b, 2), row)
    return comm.all_reduce(np.concatenate(c))


def test_runs_are_bitwise_reproducible():
    r1, r2 = spawn(4, _mixed_program), spawn(4, _mixed_program)
    for a, b in zip(r1.results, r2.results):
        assert a.tobytes() == b.tobytes()
    assert r1.ledger.entries == r2.ledger.entries


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), rows=st.integers(1, 3), cols=st.integers(1, 4),
       seed=st.integers(0, 2**32 - 1))
def test_all_reduce_is_reduce_scatter_then_all_gather(n, rows, cols, seed):
    data = np.random.default_rng(seed).standard_normal((n, n * rows, cols))

    def program(comm):
        x = data[comm.rank]
        return comm.all_reduce(x), comm.all_gather(comm.reduce_scatter(x))

    res = spawn(n, program)
    for direct, composed in res.results:
        assert direct.tobytes() == composed.tobytes()
    ar, rs, ag = res.ledger.entries
    for (_, b_ar), (_, b_rs), (_, b_ag) in zip(ar.bytes_sent, rs.bytes_sent, ag.bytes_sent):
        assert b_ar == pytest.approx(b_rs + b_ag, rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), elems=st.integers(1, 12))
def test_ledger_closed_forms(n, elems):
    E = 8 * n * elems

    def program(comm):
        comm.all_reduce(np.zeros(n * elems))
        comm.all_gather(np.zeros(elems))
        comm.reduce_scatter(np.zeros(n * elems))
        comm.all_to_all(np.split(np.zeros(n * elems), n))
        comm.ring_shift(np.zeros(n * elems))

    entries = spawn(n, program).ledger.entries
    expected = [E * 2 * (n - 1) / n, E * (n - 1) / n, E * (n - 1) / n, E * (n - 1) / n,
                E if n > 1 else 0]
    for e, want in zip(entries, expected):
        for _, b in e.bytes_sent:
            assert b == pytest.approx(want, rel=1e-15, abs=0)
