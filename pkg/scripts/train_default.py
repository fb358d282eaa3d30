"""Train the default configuration and report held-out metrics.

python scripts/train_default.py --out runs/default.ckpt [--seed 0]
"""
import argparse
import json
import time

from flowseg import netcore, trainer
from flowseg.flowdata import FlowMode


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--log", default=None)
    args = ap.parse_args()

    kwargs = {"seed": args.seed, "checkpoint_path": args.out}
    if args.steps is not None:
        kwargs["steps"] = args.steps
    config = trainer.TrainConfig(**kwargs)
    t0 = time.time()

    def progress(rec, _params):
        if rec["step"] % 100 == 0:
            print(f"step {rec['step']}: loss {rec['loss']:.4f} "
                  f"train_dice {rec['train_dice']:.3f} ({time.time() - t0:.0f}s)",
                  flush=True)

    params, log = trainer.train(config, progress=progress)
    if args.log:
        log.to_jsonl(args.log)
    print(f"trained {config.steps} steps in {(time.time() - t0) / 60:.1f} min")

    flows = trainer.held_out_flows(FlowMode.VOLUMETRIC, 40)
    summary = trainer.evaluate(params, flows, "fifo", prompt_kind="mask")
    print(json.dumps({k: v for k, v in summary.items()
                      if k not in ("per_flow", "confidences", "frame_dices")}, indent=2))


if __name__ == "__main__":
    main()
