#!/usr/bin/env python
"""Run the style/content heterogeneity grid and print directional findings.

Desk-scale reproduction of the central comparison: on each (delta_style,
delta_content) cell, harmonization methods (fedavg + input transform) and
personalization methods (client-specific models) are trained under one
budget and compared by their locally-tested primary metric.

Example:
    python scripts/run_tradeoff_grid.py --task cls --seeds 0,1,2 --rounds 40
"""

import argparse
import json
import time

from fedtrade.engine import ModelSpec, TrainingConfig, run_tradeoff_suite


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--task", choices=("cls", "seg"), default="cls")
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ap.add_argument("--rounds", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--lr", type=float, default=None, help="default: 0.1 cls, 0.05 seg")
    ap.add_argument("--n-per-client", type=int, default=128)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", help="write records/summary/directions JSON here")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    if args.task == "cls":
        model = ModelSpec("mlp_bn", (32 * 32,), out_dim=2)
        lr = 0.1 if args.lr is None else args.lr
        cells = [(0.9, 0.0), (0.2, 0.2)]
        methods = ["fedavg_local", "local_centralized", "hist_sri", "adain",
                   "mixstyle_input", "fedper", "ditto", "finetune"]
        batch = 32
    else:
        model = ModelSpec("tiny_convseg", (1, 32, 32), out_dim=1)
        lr = 0.05 if args.lr is None else args.lr
        cells = [(0.0, 0.9), (0.2, 0.2)]
        methods = ["fedavg_local", "local_centralized", "hist_sri", "adain",
                   "fedper", "ditto", "finetune"]
        batch = 16
    train = TrainingConfig(rounds=args.rounds, epochs=args.epochs, lr=lr, batch_size=batch)

    t0 = time.time()
    records, summary, directions = run_tradeoff_suite(
        args.task, cells, methods, seeds, model, train,
        n_per_client=(args.n_per_client,) * 4, jobs=args.jobs,
        progress=lambda r: print(f"  ds={r['delta_style']:g} dc={r['delta_content']:g} "
                                 f"seed={r['seed']} {r['method']:<18} "
                                 f"{r['metric']}={r['mean']:.4f}"))
    print(f"\n{len(records)} runs in {time.time() - t0:.1f}s\n")
    for rec in directions:
        print(f"cell ds={rec['delta_style']:g} dc={rec['delta_content']:g}:")
        bh, bp = rec["best_harmonization"], rec["best_personalization"]
        if bh:
            print(f"  best harmonization   {bh['method']:<16} {rec['metric']}={bh['mean']:.4f}")
        if bp:
            print(f"  best personalization {bp['method']:<16} {rec['metric']}={bp['mean']:.4f}")
        if rec.get("fedavg_local_mean") is not None:
            print(f"  fedavg_local         {'':<16} {rec['metric']}={rec['fedavg_local_mean']:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"records": records, "summary": summary, "directions": directions},
                      f, indent=2, sort_keys=True)
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
