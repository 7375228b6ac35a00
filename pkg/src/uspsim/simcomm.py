"""Deterministic in-process SPMD runtime with accounted collectives.

``spawn(n, program)`` runs ``program(comm)`` once per rank, each on its own
thread, but only one rank executes at a time: the running rank keeps the
baton until it blocks in a collective or returns, then the lowest runnable
rank takes over.  Collectives complete when every member of the group has
arrived.  Scheduling is therefore a pure function of the program, which
makes results and the ledger bitwise reproducible, and lets a stalled world
be detected exactly (no runnable rank left) instead of by timeout.

Byte accounting per rank, for a payload of E bytes in a group of n ranks::

    all_reduce       2 (n-1)/n * E
    all_gather       (n-1)/n * E     (E = gathered size)
    reduce_scatter   (n-1)/n * E     (E = input size)
    all_to_all       (n-1)/n * E     (E = sum of parts; self part not sent)
    ring_shift       E per step

``meta`` arguments ride along with a payload (same routing) without being
accounted; they carry token positions, which a real system knows statically.
"""
from __future__ import annotations

import csv
import threading
import traceback
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

COLLECTIVES = ("all_reduce", "all_gather", "reduce_scatter", "all_to_all", "ring_shift")


class CollectiveMismatchError(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    pass


class _WorldAborted(BaseException):
    """Unwinds a rank thread after another rank failed."""


@dataclass(frozen=True)
class ProcessGroup:
    ranks: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        if len(set(self.ranks)) != len(self.ranks):
            raise ValueError(f"duplicate ranks in group {self.ranks}")
        if not self.ranks:
            raise ValueError("empty process group")

    @property
    def size(self) -> int:
        return len(self.ranks)

    @property
    def gid(self) -> str:
        return self.name or "g[" + ",".join(map(str, self.ranks)) + "]"

    def index(self, rank: int) -> int:
        return self.ranks.index(rank)


@dataclass(frozen=True)
class ProcessMesh:
    """Ulysses x Ring mesh; rank = r * U + u, Ulysses groups are rows."""

    ulysses: int
    ring: int

    def __post_init__(self):
        if self.ulysses < 1 or self.ring < 1:
            raise ValueError(f"mesh degrees must be >= 1, got {self.ulysses}x{self.ring}")

    @property
    def world_size(self) -> int:
        return self.ulysses * self.ring

    def coords(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside mesh of size {self.world_size}")
        return rank % self.ulysses, rank // self.ulysses

    def rank(self, u: int, r: int) -> int:
        return r * self.ulysses + u

    def ulysses_group(self, r: int) -> ProcessGroup:
        return ProcessGroup(tuple(self.rank(u, r) for u in range(self.ulysses)),
                            f"ulysses[{r}]")

    def ring_group(self, u: int) -> ProcessGroup:
        return ProcessGroup(tuple(self.rank(u, r) for r in range(self.ring)),
                            f"ring[{u}]")

    def groups_of(self, rank: int) -> tuple[ProcessGroup, ProcessGroup]:
        u, r = self.coords(rank)
        return self.ulysses_group(r), self.ring_group(u)


@dataclass(frozen=True)
class LedgerEntry:
    step: int
    collective: str
    group: str
    bytes_sent: tuple[tuple[int, float], ...]  # (rank, bytes) in group order

    @property
    def total_bytes(self) -> float:
        return sum(b for _, b in self.bytes_sent)


class CommLedger:
    """Append-only record of every completed collective."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self):
        return len(self._entries)

    def filter(self, collective=None, group_prefix=None) -> list[LedgerEntry]:
        out = []
        for e in self._entries:
            if collective is not None and e.collective != collective:
                continue
            if group_prefix is not None and not e.group.startswith(group_prefix):
                continue
            out.append(e)
        return out

    def total_bytes(self, collective=None) -> float:
        return sum(e.total_bytes for e in self.filter(collective))

    def rows(self):
        for e in self._entries:
            for rank, b in e.bytes_sent:
                yield e.step, e.collective, e.group, rank, b

    def to_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write_csv(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as f:
                self._write_csv(f)

    def _write_csv(self, f):
        w = csv.writer(f)
        w.writerow(["step", "collective", "group", "rank", "bytes"])
        for step, kind, group, rank, b in self.rows():
            w.writerow([step, kind, group, rank, _fmt_bytes(b)])

    def summary(self) -> dict:
        out: dict[str, dict] = {}
        for e in self._entries:
            s = out.setdefault(e.collective, {"events": 0, "bytes": 0.0})
            s["events"] += 1
            s["bytes"] += e.total_bytes
        return out

    def to_dict(self) -> list[dict]:
        return [
            {"step": e.step, "collective": e.collective, "group": e.group,
             "bytes": {str(r): b for r, b in e.bytes_sent}}
            for e in self._entries
        ]


def _fmt_bytes(b: float) -> str:
    return str(int(b)) if float(b).is_integer() else repr(float(b))


@dataclass
class _Pending:
    kind: str
    group: ProcessGroup
    signature: tuple
    callsite: str
    first_rank: int
    step: int
    payloads: dict[int, Any] = field(default_factory=dict)
    results: dict[int, Any] | None = None


def _callsite() -> str:
    # first frame outside this module
    for fs in reversed(traceback.extract_stack()[:-1]):
        if fs.filename != __file__:
            return f"{fs.filename}:{fs.lineno} in {fs.name}"
    return "<unknown>"


class _World:
    def __init__(self, size: int):
        self.size = size
        self.ledger = CommLedger()
        self.world_group = ProcessGroup(tuple(range(size)), "world")
        self._go = [threading.Semaphore(0) for _ in range(size)]
        self._state = ["runnable"] * size
        self._waiting_on: dict[int, tuple] = {}
        self._pending: dict[tuple, _Pending] = {}
        self._group_seq: dict[tuple[int, str], int] = {}
        self._local_step = [0] * size
        self.error: BaseException | None = None

    # scheduling; always called by the rank currently holding the baton
    def _pass_baton(self):
        for r in range(self.size):
            if self._state[r] == "runnable":
                self._go[r].release()
                return
        if all(s == "done" for s in self._state):
            return
        if self.error is None:
            lines = []
            for r in range(self.size):
                if self._state[r] == "blocked":
                    key = self._waiting_on[r]
                    p = self._pending[key]
                    lines.append(f"rank {r} waiting in {p.kind} on {p.group.gid} "
                                 f"(first called at {p.callsite})")
                else:
                    lines.append(f"rank {r} finished")
            self.error = DeadlockError("no rank can make progress:\n  " + "\n  ".join(lines))
        self._abort_all()

    def _abort_all(self):
        for r in range(self.size):
            if self._state[r] != "done":
                self._go[r].release()

    def _wait_turn(self, rank):
        self._go[rank].acquire()
        if self.error is not None:
            raise _WorldAborted()

    def run_rank(self, rank, program, results):
        try:
            self._go[rank].acquire()
            if self.error is not None:
                return
            results[rank] = program(Communicator(self, rank))
        except _WorldAborted:
            pass
        except BaseException as exc:  # noqa: BLE001 - forwarded to spawn()
            if self.error is None:
                self.error = exc
            self._state[rank] = "done"
            self._abort_all()
            return
        self._state[rank] = "done"
        if self.error is None:
            self._pass_baton()

    def collective(self, rank, kind, group: ProcessGroup, payload, signature, reducer):
        if rank not in group.ranks:
            raise ValueError(f"rank {rank} is not a member of {group.gid}")
        for m in group.ranks:
            if not 0 <= m < self.size:
                raise ValueError(f"group {group.gid} names rank {m} outside world of {self.size}")
        seq = self._group_seq.get((rank, group.gid), 0)
        self._group_seq[(rank, group.gid)] = seq + 1
        key = (group.gid, group.ranks, seq)
        site = _callsite()
        step = self._local_step[rank]
        self._local_step[rank] += 1

        p = self._pending.get(key)
        if p is None:
            p = _Pending(kind, group, signature, site, rank, step)
            self._pending[key] = p
        elif p.kind != kind or p.signature != signature:
            what = "collective kinds" if p.kind != kind else "payload sizes"
            self.error = CollectiveMismatchError(
                f"mismatched {what} on {group.gid} (call #{seq}): "
                f"rank {p.first_rank} called {p.kind}{p.signature} at {p.callsite}; "
                f"rank {rank} called {kind}{signature} at {site}")
            raise self.error
        p.payloads[rank] = payload

        if len(p.payloads) == group.size:
            ordered = [p.payloads[m] for m in group.ranks]
            outs, sent = reducer(ordered)
            p.results = dict(zip(group.ranks, outs))
            self.ledger.append(LedgerEntry(p.step, kind, group.gid,
                                           tuple(zip(group.ranks, sent))))
            del self._pending[key]
            for m in group.ranks:
                if m != rank:
                    self._state[m] = "runnable"
                    self._waiting_on.pop(m, None)
            return p.results[rank]

        self._state[rank] = "blocked"
        self._waiting_on[rank] = key
        self._pass_baton()
        self._wait_turn(rank)
        return p.results[rank]


def _nbytes(x) -> int:
    return int(np.asarray(x).nbytes)


def _signature(x) -> tuple:
    a = np.asarray(x)
    return (a.shape, str(a.dtype))


def _copy(x):
    return None if x is None else np.array(x, copy=True)


class Communicator:
    """Per-rank handle passed to SPMD programs."""

    def __init__(self, world: _World, rank: int):
        self._world = world
        self.rank = rank
        self.world_size = world.size

    @property
    def world_group(self) -> ProcessGroup:
        return self._world.world_group

    def _g(self, group):
        return self._world.world_group if group is None else group

    def all_reduce(self, x, group: ProcessGroup | None = None):
        """Elementwise sum, accumulated in ascending group order."""
        g = self._g(group)
        x = np.asarray(x)
        n = g.size

        def reduce(parts):
            acc = parts[0].copy()
            for y in parts[1:]:
                acc = acc + y
            sent = [2 * (n - 1) * _nbytes(x) / n] * n
            return [acc.copy() for _ in parts], sent

        return self._world.collective(self.rank, "all_reduce", g, x, _signature(x), reduce)

    def all_gather(self, shard, group: ProcessGroup | None = None, axis: int = 0):
        """Concatenate shards along ``axis`` in group order."""
        g = self._g(group)
        shard = np.asarray(shard)
        n = g.size

        def gather(parts):
            full = np.concatenate(parts, axis=axis)
            sent = [(n - 1) * _nbytes(shard)] * n
            return [full.copy() for _ in parts], sent

        return self._world.collective(self.rank, "all_gather", g, shard,
                                      _signature(shard), gather)

    def reduce_scatter(self, full, group: ProcessGroup | None = None, axis: int = 0):
        """Sum inputs (ascending group order) and keep this rank's slice along ``axis``."""
        g = self._g(group)
        full = np.asarray(full)
        n = g.size
        if full.shape[axis] % n:
            raise ValueError(f"reduce_scatter axis {axis} of length {full.shape[axis]} "
                             f"not divisible by group size {n}")

        def reduce(parts):
            acc = parts[0].copy()
            for y in parts[1:]:
                acc = acc + y
            shards = np.split(acc, n, axis=axis)
            sent = [(n - 1) * _nbytes(full) / n] * n
            return [s.copy() for s in shards], sent

        return self._world.collective(self.rank, "reduce_scatter", g, full,
                                      _signature(full), reduce)

    def all_to_all(self, send_parts: Sequence, group: ProcessGroup | None = None,
                   meta: Sequence | None = None):
        """recv[j] on rank i is send_parts[i] of rank j.

        Every part in the group must have the same shape and dtype.  With
        ``meta``, returns ``(recv_parts, recv_meta)``.
        """
        g = self._g(group)
        n = g.size
        parts = [np.asarray(p) for p in send_parts]
        if len(parts) != n:
            raise ValueError(f"all_to_all needs {n} parts, got {len(parts)}")
        sigs = {_signature(p) for p in parts}
        if len(sigs) != 1:
            raise ValueError(f"ragged all_to_all parts on rank {self.rank}: {sorted(sigs)}")
        if meta is not None and len(meta) != n:
            raise ValueError(f"all_to_all meta needs {n} entries, got {len(meta)}")

        def exchange(payloads):
            outs, sent = [], []
            for i in range(n):
                data = [payloads[j][0][i].copy() for j in range(n)]
                metas = None if meta is None else [_copy(payloads[j][1][i]) for j in range(n)]
                outs.append((data, metas))
                own = payloads[i][0]
                sent.append(sum(_nbytes(own[j]) for j in range(n) if j != i))
            return outs, sent

        recv, recv_meta = self._world.collective(
            self.rank, "all_to_all", g, (parts, meta), (n, *sigs.pop()), exchange)
        return recv if meta is None else (recv, recv_meta)

    def ring_shift(self, buf, group: ProcessGroup | None = None, steps: int = 1, meta=None):
        """Send to the next rank in the group, receive from the previous one.

        With ``steps=k`` the buffer arrives from k positions back; every step
        is accounted as one full send of the buffer.
        """
        g = self._g(group)
        buf = np.asarray(buf)
        n = g.size

        def shift(payloads):
            outs = []
            for i in range(n):
                src = payloads[(i - steps) % n]
                outs.append((src[0].copy(), _copy(src[1])))
            cost = 0 if n == 1 else steps * _nbytes(buf)
            return outs, [cost] * n

        out, out_meta = self._world.collective(
            self.rank, "ring_shift", g, (buf, meta), (_signature(buf), steps), shift)
        return out if meta is None else (out, out_meta)


@dataclass
class SpawnResult:
    results: list
    ledger: CommLedger


def spawn(world_size: int, program: Callable[[Communicator], Any]) -> SpawnResult:
    """Run ``program`` on ``world_size`` ranks; return per-rank results and the ledger.

    Raises the first rank failure, ``CollectiveMismatchError`` or
    ``DeadlockError``.
    """
    if world_size < 1:
        raise ValueError(f"world_size must be >= 1, got {world_size}")
    world = _World(world_size)
    results: list = [None] * world_size
    threads = [
        threading.Thread(target=world.run_rank, args=(r, program, results),
                         name=f"rank{r}", daemon=True)
        for r in range(world_size)
    ]
    for t in threads:
        t.start()
    world._go[0].release()
    for t in threads:
        t.join()
    if world.error is not None:
        raise world.error
    return SpawnResult(results, world.ledger)
