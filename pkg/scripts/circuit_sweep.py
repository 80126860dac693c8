"""Circuit-track sweep: every method x ablation on one task, then a CMD leaderboard.

    python scripts/circuit_sweep.py ioi --seeds 0 1 2 --out results/circuit
"""

import argparse
import itertools
import json

from mechbench.pipeline import recipe_config, run
from mechbench.report import aggregate_report, load_records, write_report

METHODS = ["random", "eap", "eap_ig_inputs", "eap_ig_activations", "nap", "nap_ig", "ifr", "ugs"]
ABLATIONS = ["counterfactual", "mean", "optimal"]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("task", choices=["ioi", "arithmetic", "mcqa"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--methods", nargs="+", default=METHODS)
    p.add_argument("--ablations", nargs="+", default=ABLATIONS)
    p.add_argument("--out", default="results/circuit")
    args = p.parse_args()

    for seed, method, ablation in itertools.product(args.seeds, args.methods, args.ablations):
        cfg = recipe_config(args.task, seed, method=method, ablation=ablation, output_dir=args.out)
        record, timing = run(cfg)
        print(json.dumps({"seed": seed, "method": method, "ablation": ablation, **record["metrics"],
                          "seconds": round(sum(timing["stages"].values()), 1)}), flush=True)
    records = load_records([args.out])
    report = aggregate_report(records, "cmd", {})
    print(report.to_tsv())
    write_report(report, records, args.out)


if __name__ == "__main__":
    main()
