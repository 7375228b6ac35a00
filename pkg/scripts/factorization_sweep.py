"""Simulate every (ulysses, ring) split of N ranks and compare measured bytes with the model.

Measured bytes come from the simulated ledger; modeled bytes from comm_cost with
dtype_bytes=8 (fp64). Oracle error is reported for each split.
"""
import argparse

import numpy as np

from uspsim.costmodel import ModelConfig, Strategy, comm_cost
from uspsim.numerics import random_qkv, reference_attention
from uspsim.usp import simulate_usp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--devices", type=int, default=8)
    ap.add_argument("--seqlen", type=int, default=64)
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--kv-heads", type=int, default=2)
    ap.add_argument("--head-size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    n, hc, kv, hs, L = args.devices, args.heads, args.kv_heads, args.head_size, args.seqlen
    q, k, v, do = random_qkv(np.random.default_rng(args.seed), 1, L, hc, kv, hs)
    ref = reference_attention(q, k, v, causal=True)
    model = ModelConfig(seqlen=L, hidden=hc * hs, heads=hc, kv_heads=kv, dtype_bytes=8)
    print(f"{'U':>3} {'R':>3} {'a2a meas':>10} {'a2a model':>10} {'p2p meas':>10} "
          f"{'p2p model':>10} {'max err':>9}")
    for U in (d for d in range(1, n + 1) if n % d == 0):
        R = n // U
        if kv % U:
            print(f"{U:3d} {R:3d}  skipped: Ulysses degree must divide {kv} KV heads")
            continue
        run = simulate_usp(q, k, v, do, U, R, causal=True)
        c = comm_cost(Strategy(ulysses=U, ring=R, zero_stage=1), model)
        a2a_model = c.act_comm_bytes * (U - 1) / U
        print(f"{U:3d} {R:3d} {run.ledger.total_bytes('all_to_all'):10.0f} {a2a_model:10.0f} "
              f"{run.ledger.total_bytes('ring_shift'):10.0f} {c.p2p_comm_bytes:10.0f} "
              f"{np.abs(run.out - ref).max():9.1e}")


if __name__ == "__main__":
    main()
