#!/usr/bin/env python3
"""Reproduce the quadratic benchmark end to end: generate the two seeded
instances (d=10/k=5 and d=50/k=10), run the doubly stochastic solver against
the fixed-step implicit-gradient baseline, and write per-run CSVs plus one
objective-vs-time SVG per instance size.

Usage: python scripts/run_quadratic_benchmark.py [--out DIR] [--seeds 1 2 3]
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from dsblo.experiment import config_from_dict, run_experiment
from dsblo.problem import generate_instance, save_instance
from dsblo.verify import BENCHMARKS


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="benchmark_out")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1])
    ap.add_argument("--iterations", type=int, default=None,
                    help="override the per-run iteration count")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for size, bench in BENCHMARKS.items():
        d_u, d_l, k = bench["dims"]
        inst = generate_instance(d_u, d_l, k, seed=1)
        inst_path = out / f"instance_d{size}.json"
        save_instance(inst, inst_path)
        mode = bench["dsblo"]
        T = args.iterations or bench["T"]
        cfg = config_from_dict({
            "instance": {"path": str(inst_path)},
            "algorithms": [
                {"name": "dsblo", "label": f"dsblo_d{size}", "T": T,
                 "beta": mode.beta, "gamma1": mode.gamma1, "gamma2": mode.gamma2,
                 "K": mode.K, "delta_y": mode.delta_y, "perturb_radius": 1e-3},
                {"name": "igd", "label": f"igd_d{size}", "T": T,
                 "step": bench["igd_step"], "perturb_radius": 1e-3},
            ],
            "seeds": args.seeds,
            "output_dir": str(out / f"d{size}"),
            "eval_every": bench["eval_every"],
        })
        summary = run_experiment(cfg)
        print(f"d={size}:")
        for run in summary["runs"]:
            print(f"  {run['label']} seed={run['seed']}: {run['status']}"
                  + (f"  final_F={run['final_F']:.4f}" if run.get("final_F") is not None else ""))
        if summary["failed"]:
            return 1
        (out / f"d{size}_summary.json").write_text(json.dumps(summary, indent=1))
    print(f"outputs in {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
