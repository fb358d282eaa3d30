"""Memory-mechanism ablation: train N seeds, evaluate the bank-mode grid
(no-memory / fifo / confidence-first) on shared held-out unordered flows,
and report per-seed plus mean Dice and confidence calibration.

python scripts/run_ablation.py [--seeds 0 1 2 3 4] [--lambda-cal 0.5]
"""
import argparse
import json
import time
from dataclasses import replace

import numpy as np

from flowseg import trainer
from flowseg.flowdata import FlowMode

REDUCED = trainer.TrainConfig(steps=1600, n_volumetric=120, n_unordered=120,
                              prompt_warmup_steps=400)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--lambda-cal", type=float, default=0.5)
    ap.add_argument("--steps", type=int, default=REDUCED.steps)
    ap.add_argument("--eval-flows", type=int, default=24)
    args = ap.parse_args()

    eval_flows = trainer.held_out_flows(FlowMode.UNORDERED, args.eval_flows, n_frames=16)
    table = {"confidence_first": [], "fifo": [], "none": []}
    spearman = []
    for seed in args.seeds:
        config = replace(REDUCED, seed=seed, lambda_cal=args.lambda_cal, steps=args.steps)
        t0 = time.time()
        params, _ = trainer.train(config)
        row = {}
        for mode in table:
            summary = trainer.evaluate(params, eval_flows, mode, prompt_kind="mask")
            table[mode].append(summary["mean_dice"])
            row[mode] = round(summary["mean_dice"], 4)
            if mode == "confidence_first":
                spearman.append(summary["spearman_conf_dice"])
        print(f"seed {seed} ({time.time() - t0:.0f}s): {row} "
              f"spearman {spearman[-1]:.3f}", flush=True)
    print(json.dumps({
        "mean_dice": {k: float(np.mean(v)) for k, v in table.items()},
        "per_seed": table,
        "spearman_confidence_first": [float(s) for s in spearman],
        "ordering_ok": bool(np.mean(table["confidence_first"]) >= np.mean(table["fifo"]) + 0.01
                            and np.mean(table["fifo"]) >= np.mean(table["none"]) + 0.01),
    }, indent=2))


if __name__ == "__main__":
    main()
