"""Render the per-block comparison table for a model config over a range of device counts."""
import argparse
import json

from uspsim.costmodel import ModelConfig, cost_table, render_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="configs/llama3_8b.json")
    ap.add_argument("--devices", type=int, nargs="+", default=[8, 16])
    args = ap.parse_args()
    with open(args.model) as f:
        model = ModelConfig.from_dict(json.load(f))
    for n in args.devices:
        print(f"N = {n}")
        print(render_table(cost_table(model, n)))
        print()


if __name__ == "__main__":
    main()
