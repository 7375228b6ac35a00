"""Causal workload per ring rank: zigzag vs contiguous split, over sequence lengths."""
import argparse

from uspsim.usp import causal_workload, even_partition, zigzag_partition


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ring", type=int, default=4)
    ap.add_argument("--lengths", type=int, nargs="+", default=[16, 64, 256, 1024, 4096, 16384])
    args = ap.parse_args()
    R = args.ring
    print(f"R={R}; even last/first tends to 2R-1 = {2 * R - 1}")
    print(f"{'L':>7} {'zigzag spread':>14} {'even last/first':>16}")
    for L in args.lengths:
        zig = causal_workload(zigzag_partition(L, R), L)
        even = causal_workload(even_partition(L, R), L)
        print(f"{L:7d} {max(zig) - min(zig):14d} {even[-1] / even[0]:16.4f}")


if __name__ == "__main__":
    main()
