"""Causal-track sweep: alignment methods on one task, averaged over seeds.

    python scripts/causal_sweep.py mcqa --seeds 0 1 2 --variables X_Order
"""

import argparse
import json

import numpy as np

from mechbench.pipeline import recipe_config, run

METHODS = ["full_vector", "dbm_identity", "dbm_pca", "dbm_sae", "das"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("task", choices=["ioi", "arithmetic", "mcqa"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--methods", nargs="+", default=METHODS)
    p.add_argument("--variables", nargs="+")
    p.add_argument("--out", default="results/causal")
    args = p.parse_args()

    causal = {"variables": args.variables} if args.variables else {}
    summary: dict[str, dict[str, list[float]]] = {}
    for method in args.methods:
        for seed in args.seeds:
            record, _ = run(recipe_config(args.task, seed, track="causal", method=method, output_dir=args.out,
                                          causal=causal))
            for variable, table in record["variables"].items():
                summary.setdefault(variable, {}).setdefault(method, []).append(table["mean"])
            print(json.dumps({"seed": seed, "method": method, **record["metrics"]}), flush=True)
    kind = "mse" if args.task == "ioi" else "iia"
    for variable, by_method in summary.items():
        print(f"\n{variable} (mean {kind} over layers, averaged over seeds)")
        for method, values in by_method.items():
            print(f"  {method:14s} {np.mean(values):.3f}  (seeds: {', '.join(f'{v:.3f}' for v in values)})")


if __name__ == "__main__":
    main()
