"""Communication and memory cost model for one transformer block.

Two views of communication are reported:

* the tabulated volumes (``comm_cost``) keep the O(1) algorithm-bandwidth
  simplification and the literal constants 12 d^2, 18 d^2, 8 bs L d.  Parameter
  volume is per device; activation volume is per block over the whole
  sequence, G = hc / kv_hc shrinking the K/V share.
* ``estimate_step_time`` works per device with exact algobw factors and the
  bandwidth of the slowest link each process group spans.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from itertools import product

DIMS = ("tp", "ulysses", "ring", "dp", "pp")  # innermost first


def algobw_factor(collective: str, n: int) -> Fraction:
    if n < 1:
        raise ValueError(f"group size must be >= 1, got {n}")
    if collective == "all_reduce":
        return Fraction(2 * (n - 1), n)
    if collective in ("all_gather", "reduce_scatter"):
        return Fraction(n - 1, n)
    if collective == "all_to_all":
        return Fraction(1)
    raise ValueError(f"unknown collective {collective!r}")


@dataclass(frozen=True)
class ModelConfig:
    seqlen: int
    hidden: int
    heads: int
    kv_heads: int | None = None
    batch: int = 1
    layers: int = 1
    dtype_bytes: int = 2
    param_formula: str = "gpt"
    params_per_block: int | None = None
    act_multiplier: float = 17.0
    tp_act_fraction: float = 0.5

    def __post_init__(self):
        if self.kv_heads is None:
            object.__setattr__(self, "kv_heads", self.heads)
        for name in ("seqlen", "hidden", "heads", "kv_heads", "batch", "layers", "dtype_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.heads % self.kv_heads:
            raise ValueError(f"heads {self.heads} not divisible by kv_heads {self.kv_heads}")
        if self.param_formula not in ("gpt", "custom"):
            raise ValueError(f"param_formula must be 'gpt' or 'custom', got {self.param_formula!r}")
        if self.param_formula == "custom" and not self.params_per_block:
            raise ValueError("param_formula 'custom' needs params_per_block")
        if not 0 < self.tp_act_fraction < 1:
            raise ValueError("tp_act_fraction must lie in (0, 1)")

    @property
    def head_size(self) -> int:
        return self.hidden // self.heads

    @property
    def gqa_group(self) -> int:
        return self.heads // self.kv_heads

    @property
    def block_params(self) -> int:
        if self.param_formula == "custom":
            return int(self.params_per_block)
        return 12 * self.hidden ** 2

    @property
    def hidden_state_elems(self) -> int:
        return self.batch * self.seqlen * self.hidden

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClusterConfig:
    devices: int
    devices_per_node: int
    intra_bw: float  # bytes/s
    inter_bw: float  # bytes/s
    device_memory: float  # bytes
    latency: float = 0.0  # seconds per collective call
    overlap_budget: float = 0.0  # seconds of compute per block that can hide ring P2P

    def __post_init__(self):
        if self.devices < 1 or self.devices_per_node < 1:
            raise ValueError("devices and devices_per_node must be >= 1")
        if self.devices % self.devices_per_node:
            raise ValueError(f"devices {self.devices} not a multiple of devices_per_node "
                             f"{self.devices_per_node}")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ValueError("bandwidths must be positive")

    @property
    def nodes(self) -> int:
        return self.devices // self.devices_per_node

    @classmethod
    def from_dict(cls, d: dict) -> ClusterConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Strategy:
    tp: int = 1
    ulysses: int = 1
    ring: int = 1
    dp: int = 1
    pp: int = 1
    zero_stage: int = 0
    tp_sp: bool = False

    def __post_init__(self):
        for name in DIMS:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} degree must be >= 1")
        if self.zero_stage not in (0, 1, 2, 3):
            raise ValueError(f"zero_stage must be 0..3, got {self.zero_stage}")

    @property
    def world(self) -> int:
        return self.tp * self.ulysses * self.ring * self.dp * self.pp

    @property
    def sp(self) -> int:
        return self.ulysses * self.ring

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(getattr(self, d) for d in DIMS)

    def label(self) -> str:
        s = (f"tp{self.tp}-u{self.ulysses}-r{self.ring}-dp{self.dp}-pp{self.pp}"
             f"-z{self.zero_stage}")
        return s + ("-sp" if self.tp_sp else "")

    def to_dict(self) -> dict:
        return asdict(self)


class RankLayout:
    """Mixed-radix rank placement, tp innermost then ulysses, ring, dp, pp.

    rank = (((pp * dp + dp_i) * ring + r_i) * ulysses + u_i) * tp + tp_i
    """

    def __init__(self, strategy: Strategy):
        self.strategy = strategy
        self.radices = strategy.degrees
        self.size = strategy.world

    def coords(self, rank: int) -> dict[str, int]:
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside 0..{self.size - 1}")
        out = {}
        for name, radix in zip(DIMS, self.radices):
            rank, out[name] = divmod(rank, radix)
        return out

    def rank(self, coords: dict[str, int]) -> int:
        r = 0
        for name, radix in reversed(list(zip(DIMS, self.radices))):
            c = coords.get(name, 0)
            if not 0 <= c < radix:
                raise ValueError(f"{name} coordinate {c} outside 0..{radix - 1}")
            r = r * radix + c
        return r

    def group(self, dims, anchor: int = 0) -> list[int]:
        """Ranks sharing every coordinate of ``anchor`` outside ``dims``."""
        base = self.coords(anchor)
        ranges = [range(self.radices[DIMS.index(d)]) for d in dims]
        ranks = []
        for combo in product(*ranges):
            c = dict(base)
            c.update(zip(dims, combo))
            ranks.append(self.rank(c))
        return sorted(ranks)

    def render(self) -> str:
        return " < ".join(f"{n}({r})" for n, r in zip(DIMS, self.radices))


@dataclass
class CommCost:
    param_comm_bytes: float
    act_comm_bytes: float
    p2p_comm_bytes: float
    param_collectives: str
    act_collectives: str
    overlap_note: str = ""


@dataclass
class MemoryCost:
    P_bytes: float
    G_bytes: float
    OS_bytes: float
    Act_bytes: float

    @property
    def total(self) -> float:
        return self.P_bytes + self.G_bytes + self.OS_bytes + self.Act_bytes


@dataclass
class CostReport:
    strategy: Strategy
    comm: CommCost
    memory: MemoryCost
    est_step_time: float | None = None
    time_breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "comm": asdict(self.comm),
            "memory": {**asdict(self.memory), "total": self.memory.total},
            "est_step_time": self.est_step_time,
            "time_breakdown": self.time_breakdown,
        }


def _param_sync(strategy: Strategy):
    n = strategy.dp * strategy.sp
    if n == 1:
        return n, [], "0"
    if strategy.zero_stage == 0:
        return n, ["all_reduce"], "allreduce"
    if strategy.zero_stage in (1, 2):
        return n, ["all_gather", "reduce_scatter"], "allgather+reducescatter"
    return n, ["all_gather", "all_gather", "reduce_scatter"], "2*allgather+reducescatter"


def comm_cost(strategy: Strategy, model: ModelConfig) -> CommCost:
    """Tabulated per-block communication volumes in bytes (fwd + bwd)."""
    b = model.dtype_bytes
    _, colls, param_label = _param_sync(strategy)
    param_bytes = Fraction(0)
    if colls:
        # allreduce and allgather+reducescatter -> 12 d^2; ZeRO-3's extra allgather -> 18 d^2
        scale = Fraction(3, 2) if strategy.zero_stage == 3 else 1
        param_bytes = scale * Fraction(model.block_params * b, strategy.tp)

    unit = model.hidden_state_elems * b
    G = model.gqa_group
    act = Fraction(0)
    labels = []
    if strategy.ulysses > 1:
        act += 4 * unit + Fraction(4 * unit, G)
        labels.append("8*all2all")
    if strategy.tp > 1:
        act += 8 * unit
        labels.append("4*allgather+4*reducescatter" if strategy.tp_sp else "4*allreduce")
    p2p = Fraction(0)
    note = ""
    if strategy.ring > 1:
        # K, V forward; K, V, dK, dV backward; R-1 hops each
        p2p = Fraction(6 * (strategy.ring - 1) * unit, G)
        labels.insert(0, "P2P")
        note = "ring P2P overlaps with attention compute"
    return CommCost(
        param_comm_bytes=float(param_bytes),
        act_comm_bytes=float(act),
        p2p_comm_bytes=float(p2p),
        param_collectives=param_label,
        act_collectives="+".join(labels) or "0",
        overlap_note=note,
    )


def memory_cost(strategy: Strategy, model: ModelConfig) -> MemoryCost:
    """Per-device memory for the layers this device holds."""
    b = model.dtype_bytes
    P = Fraction(model.block_params * model.layers * b)
    A = Fraction(model.act_multiplier).limit_denominator(10**6) * model.hidden_state_elems \
        * b * model.layers
    shard = strategy.tp * strategy.pp
    p, g, os_ = P / shard, P / shard, 6 * P / shard
    zn = strategy.dp * strategy.sp
    if strategy.zero_stage >= 1:
        os_ /= zn
    if strategy.zero_stage >= 2:
        g /= zn
    if strategy.zero_stage >= 3:
        p /= zn
    act = A / (strategy.dp * strategy.sp * strategy.pp)
    if strategy.tp > 1:
        if strategy.tp_sp:
            act /= strategy.tp
        else:
            act *= Fraction(model.tp_act_fraction).limit_denominator(10**6)
    return MemoryCost(float(p), float(g), float(os_), float(act))


def _link_bw(ranks, cluster: ClusterConfig) -> float:
    nodes = {r // cluster.devices_per_node for r in ranks}
    return cluster.intra_bw if len(nodes) == 1 else cluster.inter_bw


def estimate_step_time(strategy: Strategy, model: ModelConfig, cluster: ClusterConfig):
    """Seconds of communication per training step and a per-term breakdown.

    Groups are placed with ``RankLayout``; each term uses the bandwidth of
    the slowest link its group spans.
    """
    if strategy.world > cluster.devices:
        raise ValueError(f"strategy needs {strategy.world} devices, cluster has "
                         f"{cluster.devices}")
    lay = RankLayout(strategy)
    b = model.dtype_bytes
    tp, u, r = strategy.tp, strategy.ulysses, strategy.ring
    bs_local = Fraction(model.batch, strategy.dp)
    tokens = Fraction(model.seqlen, u * r)
    hs = model.head_size
    lat = cluster.latency
    terms = {"tp": 0.0, "ulysses": 0.0, "ring_p2p": 0.0, "param_sync": 0.0}

    if tp > 1:
        bw = _link_bw(lay.group(["tp"]), cluster)
        e = bs_local * tokens * model.hidden * b
        if strategy.tp_sp:
            vol = 4 * e * algobw_factor("all_gather", tp) + 4 * e * algobw_factor("reduce_scatter", tp)
            calls = 8
        else:
            vol = 4 * e * algobw_factor("all_reduce", tp)
            calls = 4
        terms["tp"] = float(vol) / bw + calls * lat
    if u > 1:
        bw = _link_bw(lay.group(["ulysses"]), cluster)
        q_part = bs_local * tokens * Fraction(model.heads, tp) * hs * b
        kv_part = bs_local * tokens * Fraction(model.kv_heads, tp) * hs * b
        vol = (4 * q_part + 4 * kv_part) * algobw_factor("all_to_all", u)
        terms["ulysses"] = float(vol) / bw + 8 * lat
    if r > 1:
        bw = _link_bw(lay.group(["ring"]), cluster)
        kv_block = bs_local * Fraction(model.seqlen, r) * Fraction(model.kv_heads, tp * u) * hs * b
        hops = 6 * (r - 1)
        p2p = float(hops * kv_block) / bw
        terms["ring_p2p"] = max(0.0, p2p - cluster.overlap_budget) + hops * lat
    n, colls, _ = _param_sync(strategy)
    if colls:
        bw = _link_bw(lay.group(["ulysses", "ring", "dp"]), cluster)
        e = Fraction(model.block_params * b, tp)
        vol = sum(e * algobw_factor(c, n) for c in colls)
        terms["param_sync"] = float(vol) / bw + len(colls) * lat
    layers_here = model.layers / strategy.pp
    terms = {k: v * layers_here for k, v in terms.items()}
    return sum(terms.values()), terms


def cost_report(strategy: Strategy, model: ModelConfig,
                cluster: ClusterConfig | None = None) -> CostReport:
    rep = CostReport(strategy, comm_cost(strategy, model), memory_cost(strategy, model))
    if cluster is not None:
        rep.est_step_time, rep.time_breakdown = estimate_step_time(strategy, model, cluster)
    return rep


def _unified_ulysses(n: int, kv_heads: int) -> int:
    return max(d for d in range(1, n + 1) if n % d == 0 and kv_heads % d == 0)


def table_rows(model: ModelConfig, n: int, ulysses: int | None = None) -> dict[str, Strategy]:
    """One strategy per comparison row, each using ``n`` devices."""
    u = ulysses or _unified_ulysses(n, model.kv_heads)
    if n % u:
        raise ValueError(f"ulysses degree {u} does not divide {n}")
    r = n // u
    return {
        "SP-Ulysses": Strategy(ulysses=n),
        "SP-Ring": Strategy(ring=n),
        "DP": Strategy(dp=n),
        "ZeRO1": Strategy(dp=n, zero_stage=1),
        "SP-Unified+ZeRO1": Strategy(ulysses=u, ring=r, zero_stage=1),
        "SP-Unified+ZeRO2": Strategy(ulysses=u, ring=r, zero_stage=2),
        "SP-Unified+ZeRO3": Strategy(ulysses=u, ring=r, zero_stage=3),
        "TP": Strategy(tp=n),
        "TP-sp": Strategy(tp=n, tp_sp=True),
    }


def cost_table(model: ModelConfig, n: int, ulysses: int | None = None) -> dict[str, CostReport]:
    return {name: cost_report(s, model) for name, s in table_rows(model, n, ulysses).items()}


def _fmt(nbytes: float) -> str:
    for unit, scale in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if nbytes >= scale:
            return f"{nbytes / scale:.2f} {unit}"
    return f"{nbytes:.0f} B"


def render_table(reports: dict[str, CostReport]) -> str:
    """Aligned text table: per-block comm volumes and per-device memory."""
    header = ["row", "degrees", "param comm", "param bytes", "act comm", "act bytes",
              "p2p bytes", "P", "G", "OS", "Act"]
    rows = [header]
    for name, rep in reports.items():
        c, m = rep.comm, rep.memory
        rows.append([
            name, rep.strategy.label(), c.param_collectives, _fmt(c.param_comm_bytes),
            c.act_collectives, _fmt(c.act_comm_bytes),
            _fmt(c.p2p_comm_bytes) + (" (overlap)" if c.p2p_comm_bytes else ""),
            _fmt(m.P_bytes), _fmt(m.G_bytes), _fmt(m.OS_bytes), _fmt(m.Act_bytes),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
