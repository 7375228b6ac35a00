"""Command-line entry point: ``uspsim {simulate,cost,plan,balance}``.

Exit codes: 0 success, 1 tolerance failure, 2 invalid input or configuration.
Random inputs come from ``numpy.random.default_rng(seed)`` (PCG64), drawn as
standard normals in the order Q, K, V, dO.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import costmodel, planner
from .numerics import PRECISIONS, random_qkv, reference_attention, reference_attention_grad
from .schemas import (CLUSTER_SCHEMA, MODEL_SCHEMA, REPORT_SCHEMA_VERSION, ConfigError,
                      validate)
from .usp import ConstraintError, causal_workload, even_partition, simulate_usp, zigzag_partition

DEFAULT_TOL = {"fp64": 1e-10, "fp32": 1e-3}


class InputError(Exception):
    pass


def _digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _load_json(path: str, schema: dict) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    validate(doc, schema, path)
    return doc


def _err(a: np.ndarray, b: np.ndarray) -> dict:
    diff = float(np.abs(a - b).max())
    scale = float(np.abs(b).max())
    return {"max_abs": diff, "max_rel": diff / scale if scale else diff}


def cmd_simulate(args) -> tuple[dict, int]:
    dtype = PRECISIONS[args.precision]
    rng = np.random.default_rng(args.seed)
    q, k, v, do = random_qkv(rng, args.bs, args.seqlen, args.heads, args.kv_heads,
                             args.head_size, dtype)
    run = simulate_usp(q, k, v, do, args.ulysses, args.ring, args.causal)
    if args.ledger_out:
        run.ledger.to_csv(args.ledger_out)
    a2a = run.ledger.filter("all_to_all")
    per_group = {}
    for e in a2a:
        per_group[e.group] = per_group.get(e.group, 0) + 1
    results = {
        "ledger": {
            "summary": run.ledger.summary(),
            "total_bytes": run.ledger.total_bytes(),
            "all_to_all_events_per_ulysses_group": per_group,
            "events": run.ledger.to_dict(),
        },
    }
    status = 0
    if args.check:
        tol = args.tol if args.tol is not None else DEFAULT_TOL[args.precision]
        ref = reference_attention(q, k, v, args.causal)
        gq, gk, gv = reference_attention_grad(q, k, v, do, args.causal)
        errors = {"out": _err(run.out, ref), "dq": _err(run.dq, gq),
                  "dk": _err(run.dk, gk), "dv": _err(run.dv, gv)}
        worst = max(e["max_abs"] for e in errors.values())
        passed = worst <= tol
        results["check"] = {"tolerance": tol, "errors": errors, "passed": passed}
        status = 0 if passed else 1
    return results, status


def _strategy(args) -> costmodel.Strategy:
    return costmodel.Strategy(tp=args.tp, ulysses=args.ulysses, ring=args.ring, dp=args.dp,
                              pp=args.pp, zero_stage=args.zero, tp_sp=args.tp_sp)


def _configs(args):
    model = costmodel.ModelConfig.from_dict(_load_json(args.model, MODEL_SCHEMA))
    cluster = None
    if getattr(args, "cluster", None):
        cluster = costmodel.ClusterConfig.from_dict(_load_json(args.cluster, CLUSTER_SCHEMA))
    return model, cluster


def cmd_cost(args) -> tuple[dict, int]:
    model, cluster = _configs(args)
    strategy = _strategy(args)
    if cluster is not None and strategy.world > cluster.devices:
        raise InputError(f"strategy uses {strategy.world} devices, cluster has {cluster.devices}")
    rep = costmodel.cost_report(strategy, model, cluster)
    results = {"report": rep.to_dict()}
    if args.table:
        n = args.table_devices or (cluster.devices if cluster else strategy.world)
        table = costmodel.cost_table(model, n)
        results["table"] = {name: r.to_dict() for name, r in table.items()}
        results["table_text"] = costmodel.render_table(table)
    results["text"] = costmodel.render_table({"strategy": rep})
    return results, 0


def cmd_plan(args) -> tuple[dict, int]:
    model, cluster = _configs(args)
    if cluster is None:
        raise InputError("plan needs --cluster")
    opts = planner.PlanOptions(tp=args.tp, ulysses=args.ulysses, ring=args.ring, dp=args.dp,
                               pp=args.pp)
    ranked, cands = planner.plan(model, cluster, opts, top=args.top)
    results = {
        "candidates": [c.to_dict() for c in ranked],
        "feasible": sum(c.verdict.ok for c in cands),
        "considered": len(cands),
        "rejections": dict(sorted(planner.rejection_tally(cands).items())),
    }
    if args.show_rejected:
        results["rejected"] = [c.to_dict() for c in cands if not c.verdict.ok]
    return results, 0


def cmd_balance(args) -> tuple[dict, int]:
    zig = zigzag_partition(args.seqlen, args.ring)
    even = even_partition(args.seqlen, args.ring)
    zc = causal_workload(zig, args.seqlen)
    ec = causal_workload(even, args.seqlen)
    return {
        "zigzag": {"assignment": zig, "pairs": zc},
        "even": {"assignment": even, "pairs": ec, "last_over_first": ec[-1] / ec[0]},
    }, 0


def _text(cmd: str, results: dict) -> str:
    if cmd == "simulate":
        lines = []
        for kind, s in results["ledger"]["summary"].items():
            lines.append(f"{kind:15s} events={s['events']:4d} bytes={s['bytes']:.0f}")
        lines.append(f"total bytes: {results['ledger']['total_bytes']:.0f}")
        if "check" in results:
            c = results["check"]
            for name, e in c["errors"].items():
                lines.append(f"{name:3s} max_abs={e['max_abs']:.3e} max_rel={e['max_rel']:.3e}")
            lines.append(("PASS" if c["passed"] else "FAIL") + f" (tol {c['tolerance']:g})")
        return "\n".join(lines)
    if cmd == "cost":
        out = results["text"]
        t = results["report"]["est_step_time"]
        if t is not None:
            out += f"\nestimated comm time per step: {t:.6g} s"
        if "table_text" in results:
            out += "\n\n" + results["table_text"]
        return out
    if cmd == "plan":
        lines = [f"{results['feasible']} feasible of {results['considered']} considered"]
        for i, c in enumerate(results["candidates"], 1):
            t = c["cost"]["est_step_time"]
            lines.append(f"{i:3d}. {c['label']:28s} {t:.6g} s  {c['rank_order']}  {c['verdict']}")
        if results["rejections"]:
            lines.append("rejections: " + ", ".join(f"{k}={v}"
                                                    for k, v in results["rejections"].items()))
        return "\n".join(lines)
    z, e = results["zigzag"], results["even"]
    lines = ["rank  zigzag tokens            pairs   even pairs"]
    for r, (toks, zc, ec) in enumerate(zip(z["assignment"], z["pairs"], e["pairs"])):
        lines.append(f"{r:4d}  {str(toks):24s} {zc:6d}   {ec:10d}")
    lines.append(f"even last/first = {e['last_over_first']:.4f}")
    return "\n".join(lines)


def _add_degrees(p, pp_default=1):
    p.add_argument("--tp", type=int, default=None)
    p.add_argument("--ulysses", type=int, default=None)
    p.add_argument("--ring", type=int, default=None)
    p.add_argument("--dp", type=int, default=None)
    p.add_argument("--pp", type=int, default=pp_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uspsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="run USP attention fwd+bwd on simulated ranks")
    s.add_argument("--bs", type=int, default=1)
    s.add_argument("--seqlen", type=int, default=64)
    s.add_argument("--heads", type=int, default=8)
    s.add_argument("--kv-heads", type=int, default=None)
    s.add_argument("--head-size", type=int, default=16)
    s.add_argument("--ulysses", type=int, default=1)
    s.add_argument("--ring", type=int, default=1)
    s.add_argument("--causal", action="store_true")
    s.add_argument("--precision", choices=sorted(PRECISIONS), default="fp64")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--check", action="store_true", help="compare against the oracle")
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--ledger-out", metavar="PATH")

    c = sub.add_parser("cost", help="communication/memory cost of one strategy")
    c.add_argument("--model", required=True)
    c.add_argument("--cluster")
    _add_degrees(c)
    c.add_argument("--zero", type=int, default=0, choices=[0, 1, 2, 3])
    c.add_argument("--tp-sp", action="store_true")
    c.add_argument("--table", action="store_true", help="also render every comparison row")
    c.add_argument("--table-devices", type=int, default=None)

    p = sub.add_parser("plan", help="rank parallel strategies for a cluster")
    p.add_argument("--model", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--show-rejected", action="store_true")
    _add_degrees(p)

    b = sub.add_parser("balance", help="zigzag vs even causal workload")
    b.add_argument("--seqlen", type=int, required=True)
    b.add_argument("--ring", type=int, required=True)

    for sp in (s, c, p, b):
        sp.add_argument("--json", action="store_true", help="emit the JSON report")
    return parser


COMMANDS = {"simulate": cmd_simulate, "cost": cmd_cost, "plan": cmd_plan,
            "balance": cmd_balance}


def _config_echo(args) -> dict:
    skip = {"json", "ledger_out"}
    cfg = {k: v for k, v in vars(args).items() if k not in skip}
    for key in ("model", "cluster"):
        path = cfg.get(key)
        if path:
            try:
                with open(path) as f:
                    cfg[key] = json.load(f)
            except (OSError, json.JSONDecodeError):
                pass
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.cmd == "cost":
        for name in ("tp", "ulysses", "ring", "dp"):
            if getattr(args, name) is None:
                setattr(args, name, 1)
    if args.cmd == "simulate" and args.kv_heads is None:
        args.kv_heads = args.heads
    try:
        results, status = COMMANDS[args.cmd](args)
    except (ConstraintError, ConfigError, InputError, ValueError) as exc:
        tip = getattr(exc, "tip", None)
        msg = f"error: {exc}" + (f" [{tip}]" if tip else "")
        results, status = {"error": str(exc), "tip": tip}, 2
        print(msg, file=sys.stderr)
    report = {
        "schema": REPORT_SCHEMA_VERSION,
        "command": ["uspsim", *argv],
        "config_digest": _digest(_config_echo(args)),
        "results": results,
        "exit_status": status,
    }
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    elif status != 2:
        print(_text(args.cmd, results))
    return status


if __name__ == "__main__":
    sys.exit(main())
