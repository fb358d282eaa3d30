"""Command line interface.

Subcommands: gen (synthesize a dataset), train, eval (one-prompt protocol
with --bank-mode none|fifo|confidence), propagate (batch, file in/out),
serve (HTTP service). Exit codes: 0 success, 2 usage error, 1 runtime
error. FLOWSEG_CHECKPOINT provides the --checkpoint default.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import FlowsegError

_BANK_MODE_ALIASES = {"none": "none", "fifo": "fifo", "confidence": "confidence_first",
                      "confidence_first": "confidence_first"}


def _add_checkpoint_arg(sub: argparse.ArgumentParser) -> None:
    env = os.environ.get("FLOWSEG_CHECKPOINT")
    sub.add_argument("--checkpoint", default=env, required=env is None,
                     help="model checkpoint path (default: $FLOWSEG_CHECKPOINT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowseg",
                                     description="memory-conditioned flow segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesize .flow files")
    gen.add_argument("--mode", choices=["volumetric", "unordered"], required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--frames", type=int, default=8)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--task-class", default="mixed",
                     choices=["mixed", "ellipse", "ring", "polygon_blob"])

    tr = sub.add_parser("train", help="train a model on synthetic flows")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--log", help="training log path (line-delimited JSON)")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--steps", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--n-volumetric", type=int, default=None)
    tr.add_argument("--n-unordered", type=int, default=None)
    tr.add_argument("--frames", type=int, default=None)
    tr.add_argument("--size", type=int, default=None)
    tr.add_argument("--lambda-cal", type=float, default=None)
    tr.add_argument("--flows-per-step", type=int, default=None)
    tr.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="one-prompt evaluation over a dataset dir")
    _add_checkpoint_arg(ev)
    ev.add_argument("--data", required=True, help="directory of .flow files")
    ev.add_argument("--bank-mode", choices=sorted(_BANK_MODE_ALIASES), default="confidence")
    ev.add_argument("--prompt-kind", choices=["point", "box", "mask"], default="mask")
    ev.add_argument("--report", help="write per-flow report JSONL here")

    pr = sub.add_parser("propagate", help="batch propagation for one flow file")
    _add_checkpoint_arg(pr)
    pr.add_argument("--flow", required=True)
    pr.add_argument("--prompt", required=True,
                    help='JSON, e.g. {"frame":0,"kind":"point","row":32,"col":32}')
    pr.add_argument("--out", required=True, help="prediction file (JSON)")
    pr.add_argument("--report", help="metrics report path (JSONL)")

    sv = sub.add_parser("serve", help="run the HTTP service")
    _add_checkpoint_arg(sv)
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--ui-dir", default=None,
                    help="static UI directory (default: bundled frontend/dist if present)")
    return parser


def _cmd_gen(args) -> int:
    from .flowdata import TaskClass, generate_unordered_flow, generate_volume_flow, save_flow

    os.makedirs(args.out, exist_ok=True)
    classes = ([TaskClass.ELLIPSE, TaskClass.RING, TaskClass.POLYGON_BLOB]
               if args.task_class == "mixed" else [TaskClass(args.task_class)])
    gen = generate_volume_flow if args.mode == "volumetric" else generate_unordered_flow
    for i in range(args.n):
        flow = gen(args.seed + i, args.frames, classes[i % len(classes)], args.size)
        save_flow(flow, os.path.join(args.out, f"flow_{i:05d}.flow"))
    print(f"wrote {args.n} flows to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import trainer

    overrides = {}
    for field_name, arg_name in [("steps", "steps"), ("learning_rate", "lr"),
                                 ("n_volumetric", "n_volumetric"),
                                 ("n_unordered", "n_unordered"),
                                 ("frames_per_flow", "frames"), ("image_size", "size"),
                                 ("lambda_cal", "lambda_cal"),
                                 ("flows_per_step", "flows_per_step")]:
        value = getattr(args, arg_name)
        if value is not None:
            overrides[field_name] = value
    config = trainer.TrainConfig(seed=args.seed, checkpoint_path=args.out, **overrides)

    def progress(rec, _params):
        if not args.quiet and rec["step"] % 25 == 0:
            print(f"step {rec['step']}: loss {rec['loss']:.4f} "
                  f"train_dice {rec['train_dice']:.3f}", flush=True)

    _params, log = trainer.train(config, progress=progress)
    if args.log:
        log.to_jsonl(args.log)
    print(f"checkpoint written to {args.out}")
    return 0


def _load_flows(data_dir: str):
    from .flowdata import load_flow

    paths = sorted(p for p in os.listdir(data_dir) if p.endswith(".flow"))
    return [load_flow(os.path.join(data_dir, p)) for p in paths]


def _cmd_eval(args) -> int:
    from . import trainer
    from .netcore import load_params

    params = load_params(args.checkpoint)
    flows = _load_flows(args.data)
    summary = trainer.evaluate(params, flows, _BANK_MODE_ALIASES[args.bank_mode],
                               prompt_kind=args.prompt_kind)
    if args.report:
        with open(args.report, "w") as fh:
            for rec in summary["per_flow"]:
                fh.write(json.dumps(rec) + "\n")
    printable = {k: v for k, v in summary.items()
                 if k not in ("per_flow", "confidences", "frame_dices")}
    print(json.dumps(printable, indent=2))
    return 0


def _cmd_propagate(args) -> int:
    from . import engine, metrics, wire
    from .flowdata import load_flow
    from .netcore import load_params
    from .server import PromptSpec, _to_prompt
    from .trainer import TrainConfig

    params = load_params(args.checkpoint)
    flow = load_flow(args.flow)
    spec = json.loads(args.prompt)
    frame = int(spec.pop("frame"))
    prompt = _to_prompt(PromptSpec(**spec), frame)
    session = engine.start_session(flow, params, TrainConfig().bank_config(flow.mode))
    engine.add_prompt(session, frame, prompt)
    result = engine.propagate(session)
    payload = {
        "flow": os.path.abspath(args.flow),
        "order": list(result.order),
        "confidences": [m.confidence for m in result.masks],
        "masks": [wire.rle_encode(m.mask) for m in result.masks],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
    records = metrics.batch_report([m.mask for m in result.masks],
                                   [flow.mask(i).cells for i in range(flow.n_frames)])
    if args.report:
        metrics.write_report_jsonl(records, args.report)
    print(json.dumps(records[-1]))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .netcore import load_params
    from .server import create_app

    params = load_params(args.checkpoint)
    ui_dir = args.ui_dir
    if ui_dir is None:
        bundled = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(
            os.path.abspath(__file__)))), "frontend", "dist")
        ui_dir = bundled if os.path.isdir(bundled) else None
    app = create_app(params, checkpoint_path=args.checkpoint, ui_dir=ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
                "propagate": _cmd_propagate, "serve": _cmd_serve}
    try:
        return handlers[args.command](args)
    except (FlowsegError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
