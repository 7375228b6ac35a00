"""Enumerate, check and rank hybrid (tp, ulysses, ring, dp, pp) strategies.

Every rejection names one governing rule through a tip id:

    head-limit  Ulysses (and tp * Ulysses) bounded by, and dividing, the KV heads
    tp-heads    tp must divide the query heads
    tip2        data parallelism needs batch divisible by dp
    tip3        sequence parallelism runs with ZeRO stage >= 1
    zigzag      sequence length must split into 2R chunks of U-divisible size
    pp-layers   pp must divide the layer count
    world       degrees must multiply to the device count
    memory      per-device memory must fit the device

Tips 5 and 6 are comparative guidance and appear only as notes.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import product

from .costmodel import (ClusterConfig, CostReport, ModelConfig, RankLayout, Strategy,
                        cost_report, memory_cost)


@dataclass
class Verdict:
    ok: bool
    reason: str | None = None
    tip: str | None = None
    notes: list[str] = field(default_factory=list)

    def __str__(self):
        if self.ok:
            return "ok" + "".join(f"; {n}" for n in self.notes)
        s = f"rejected [{self.tip}]: {self.reason}"
        return s + "".join(f"; {n}" for n in self.notes)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "reason": self.reason, "tip": self.tip, "notes": list(self.notes)}


@dataclass
class PlanCandidate:
    strategy: Strategy
    verdict: Verdict
    report: CostReport | None = None

    @property
    def rank_order(self) -> str:
        return group_order(self.strategy).render()

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "label": self.strategy.label(),
            "verdict": str(self.verdict),
            "feasibility": self.verdict.to_dict(),
            "rank_order": self.rank_order,
            "cost": None if self.report is None else self.report.to_dict(),
        }


@dataclass
class PlanOptions:
    """Degrees pinned to a value; ``None`` leaves them free."""

    tp: int | None = None
    ulysses: int | None = None
    ring: int | None = None
    dp: int | None = None
    pp: int | None = 1
    zero_stages: tuple[int, ...] = (0, 1, 2, 3)
    tp_sp: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> PlanOptions:
        d = dict(d)
        if "zero_stages" in d:
            d["zero_stages"] = tuple(d["zero_stages"])
        return cls(**d)


def group_order(strategy: Strategy) -> RankLayout:
    """Process-group layout: tp innermost, then ulysses, ring, dp, pp."""
    return RankLayout(strategy)


def _structural(strategy: Strategy, model: ModelConfig, n: int) -> tuple[str, str] | None:
    s, m = strategy, model
    if s.world != n:
        return f"degree product {s.world} != device count {n}", "world"
    if m.heads % s.tp:
        return f"tp degree {s.tp} does not divide {m.heads} query heads", "tp-heads"
    if s.ulysses > m.kv_heads:
        return (f"Ulysses degree {s.ulysses} exceeds KV head count {m.kv_heads}: the Ulysses "
                f"degree cannot exceed the number of attention heads", "head-limit")
    if m.kv_heads % s.ulysses:
        return f"Ulysses degree {s.ulysses} does not divide {m.kv_heads} KV heads", "head-limit"
    if s.tp * s.ulysses > m.kv_heads or m.kv_heads % (s.tp * s.ulysses):
        return (f"tp x Ulysses = {s.tp * s.ulysses} must divide the {m.kv_heads} KV heads",
                "head-limit")
    if m.batch % s.dp:
        return f"dp degree {s.dp} does not divide batch {m.batch}", "tip2"
    if m.seqlen % (2 * s.ring) or (m.seqlen // s.ring) % s.ulysses:
        return (f"seqlen {m.seqlen} does not split into {2 * s.ring} zigzag chunks "
                f"of Ulysses-divisible size", "zigzag")
    if s.tp_sp and s.tp > 1 and (m.seqlen // s.sp) % s.tp:
        return f"per-rank tokens {m.seqlen // s.sp} not divisible by tp {s.tp}", "zigzag"
    if s.sp > 1 and s.zero_stage < 1:
        return "sequence parallelism requires ZeRO stage 1 or higher", "tip3"
    if m.layers % s.pp:
        return f"pp degree {s.pp} does not divide {m.layers} layers", "pp-layers"
    return None


def check_feasibility(strategy: Strategy, model: ModelConfig, cluster: ClusterConfig) -> Verdict:
    failure = _structural(strategy, model, cluster.devices)
    if failure is not None:
        return Verdict(False, *failure)
    mem = memory_cost(strategy, model)
    notes = []
    if strategy.sp > 1 and strategy.ring > 1 and strategy.ulysses * strategy.tp == model.kv_heads:
        notes.append("tip6: ring degree extends SP past the head-count cap")
    if mem.total > cluster.device_memory:
        deficit = mem.total - cluster.device_memory
        v = Verdict(False, f"needs {mem.total:.0f} bytes per device, "
                           f"{deficit:.0f} bytes over capacity", "memory", notes)
        if strategy.sp > 1 and strategy.tp == 1:
            sib = Strategy(tp=strategy.sp, dp=strategy.dp, pp=strategy.pp,
                           zero_stage=strategy.zero_stage, tp_sp=True)
            if (_structural(sib, model, cluster.devices) is None
                    and memory_cost(sib, model).total <= cluster.device_memory):
                v.notes.append(f"tip5: TP-sp sibling {sib.label()} fits; SP does not extend "
                               f"sequence length over TP-sp here")
        return v
    return Verdict(True, notes=notes)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def factorizations(n: int):
    """All (tp, ulysses, ring, dp, pp) with product n."""
    for tp in _divisors(n):
        for u in _divisors(n // tp):
            for r in _divisors(n // (tp * u)):
                for dp in _divisors(n // (tp * u * r)):
                    yield tp, u, r, dp, n // (tp * u * r * dp)


def enumerate_strategies(model: ModelConfig, cluster: ClusterConfig,
                         options: PlanOptions | None = None) -> list[PlanCandidate]:
    """Every factorization of the device count (respecting pins) with its verdict.

    Accepted candidates carry a full CostReport including step-time estimate.
    """
    opts = options or PlanOptions()
    pins = {k: getattr(opts, k) for k in ("tp", "ulysses", "ring", "dp", "pp")}
    out = []
    for tp, u, r, dp, pp in factorizations(cluster.devices):
        degrees = dict(tp=tp, ulysses=u, ring=r, dp=dp, pp=pp)
        if any(v is not None and degrees[k] != v for k, v in pins.items()):
            continue
        for z, sp_flag in product(opts.zero_stages, (opts.tp_sp,) if tp > 1 else (False,)):
            s = Strategy(**degrees, zero_stage=z, tp_sp=sp_flag)
            v = check_feasibility(s, model, cluster)
            rep = cost_report(s, model, cluster) if v.ok else None
            out.append(PlanCandidate(s, v, rep))
    return out


def rejection_tally(candidates) -> Counter:
    return Counter(c.verdict.tip for c in candidates if not c.verdict.ok)


def _rank_key(c: PlanCandidate):
    s = c.strategy
    return (c.report.est_step_time, s.ring, s.tp,
            (s.tp, s.ulysses, s.ring, s.dp, s.pp, s.zero_stage, s.tp_sp))


def rank_plans(candidates) -> list[PlanCandidate]:
    """Feasible candidates by step time, then lower ring, lower tp, then degrees."""
    return sorted((c for c in candidates if c.verdict.ok), key=_rank_key)


def plan(model: ModelConfig, cluster: ClusterConfig, options: PlanOptions | None = None,
         top: int | None = None):
    cands = enumerate_strategies(model, cluster, options)
    ranked = rank_plans(cands)
    return (ranked if top is None else ranked[:top]), cands
