"""Training and evaluation: BCE + soft-Dice segmentation loss, squared-error
confidence calibration against the realized Dice, a Bernoulli prompt
schedule (0.25 volumetric / 0.3 unordered), an Adam loop over mixed
synthetic flows, finite-difference gradient verification, and the
one-prompt evaluation harness with the no-memory / fifo / confidence-first
ablation grid.

Gradients never cross the memory bank: each frame's loss sees the stored
memory features and pointers as constants, so per-frame backward passes
are independent and the bank keeps pure buffer semantics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import engine, membank, metrics, netcore
from .autodiff import Tensor
from .errors import ArgumentError, NumericError
from .flowdata import (Flow, FlowMode, Image, Mask, Prompt, PromptKind, TaskClass,
                       auto_prompt, generate_unordered_flow, generate_volume_flow)
from .membank import BankConfig, BankMode, MemoryBank, MemoryEntry
from .netcore import ModelParams, NetConfig, ObjectPointer

_CLASSES = (TaskClass.ELLIPSE, TaskClass.RING, TaskClass.POLYGON_BLOB)
_PROMPT_KINDS = (PromptKind.POINT, PromptKind.BOX, PromptKind.MASK)
_EVAL_SEED_BASE = 2 ** 31  # held-out flows are shared across training seeds


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 4000
    learning_rate: float = 1e-3
    flows_per_step: int = 2
    n_volumetric: int = 300
    n_unordered: int = 300
    frames_per_flow: int = 8
    image_size: int = 64
    prompt_prob_volumetric: float = 0.25
    prompt_prob_unordered: float = 0.3
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_cal: float = 0.5
    bank_capacity: int = 8
    diversity_threshold: float = 0.995
    pickup_temperature: float = 0.1
    net: NetConfig = field(default_factory=NetConfig)
    checkpoint_path: str | None = None
    checkpoint_every: int = 0  # 0 = final checkpoint only
    # Curriculum: prompt probability anneals from 1.0 down to the
    # configured rate across this many steps. Selection-by-memory only
    # starts to train once the prompted path produces decent masks, so
    # front-loading prompts shortens the flat phase considerably.
    prompt_warmup_steps: int = 500
    eval_every: int = 0  # 0 = no mid-training eval records
    eval_flows: int = 8  # held-out flows per mode for mid-training eval

    def __post_init__(self):
        if not (0.0 <= self.prompt_prob_volumetric <= 1.0
                and 0.0 <= self.prompt_prob_unordered <= 1.0):
            raise ArgumentError("prompt probabilities must lie in [0, 1]")
        if self.learning_rate <= 0.0:
            raise ArgumentError("learning_rate must be positive")

    def bank_config(self, mode: FlowMode) -> BankConfig:
        bank_mode = BankMode.FIFO if mode == FlowMode.VOLUMETRIC else BankMode.CONFIDENCE_FIRST
        return BankConfig(capacity=self.bank_capacity, mode=bank_mode,
                          diversity_threshold=self.diversity_threshold,
                          pickup_temperature=self.pickup_temperature)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.append(json.loads(line))
        return log


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def seg_loss_parts(logits, gt_mask) -> tuple[Tensor, Tensor]:
    """(BCE, 1 - softDice) with softDice = (2 Σpg + ε) / (Σp + Σg + ε), ε=1."""
    z = ad.as_tensor(logits)
    g = gt_mask.cells if isinstance(gt_mask, Mask) else np.asarray(gt_mask)
    if not np.isin(g, (0, 1)).all():
        raise ArgumentError("ground truth must be strictly binary")
    g = g.astype(np.float64)
    if z.shape != g.shape:
        raise ArgumentError(f"logits {z.shape} vs ground truth {g.shape}")
    gt = Tensor(g)
    bce = ad.meant(ad.softplus(z) - z * gt)
    probs = ad.sigmoid(z)
    eps = 1.0
    soft_dice = (2.0 * ad.sumt(probs * gt) + eps) / (ad.sumt(probs) + float(g.sum()) + eps)
    return bce, 1.0 - soft_dice


def seg_loss(logits, gt_mask, lambda_bce: float = 1.0, lambda_dice: float = 1.0) -> Tensor:
    bce, dice_term = seg_loss_parts(logits, gt_mask)
    return lambda_bce * bce + lambda_dice * dice_term


def calib_loss(confidence, actual_dice: float) -> Tensor:
    """(confidence - realized Dice)^2; both arguments must lie in [0, 1]."""
    conf = ad.as_tensor(confidence)
    if conf.data.min() < 0.0 or conf.data.max() > 1.0:
        raise ArgumentError("confidence outside [0, 1]")
    if not (0.0 <= actual_dice <= 1.0):
        raise ArgumentError("actual_dice outside [0, 1]")
    return (conf - actual_dice) ** 2


def sample_prompts(flow: Flow, rng: np.random.Generator, config: TrainConfig,
                   prob_override: float | None = None) -> set[int]:
    """Independent Bernoulli per frame; frame 0 is force-prompted when the
    draw selects nothing (a sequence needs at least one prompt)."""
    if prob_override is not None:
        p = prob_override
    else:
        p = (config.prompt_prob_volumetric if flow.mode == FlowMode.VOLUMETRIC
             else config.prompt_prob_unordered)
    draws = rng.random(flow.n_frames) < p
    prompted = {int(i) for i in np.nonzero(draws)[0]}
    if not prompted:
        prompted = {0}
    return prompted


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def _train_flow_seed(seed: int, mode: FlowMode, index: int) -> int:
    return (seed + 1) * 1_000_003 + (0 if mode == FlowMode.VOLUMETRIC else 500_000) + index


def training_flow(config: TrainConfig, mode: FlowMode, index: int) -> Flow:
    gen = generate_volume_flow if mode == FlowMode.VOLUMETRIC else generate_unordered_flow
    return gen(_train_flow_seed(config.seed, mode, index),
               config.frames_per_flow, _CLASSES[index % 3], config.image_size)


def held_out_flows(mode: FlowMode, n: int, n_frames: int = 8, size: int = 64) -> list[Flow]:
    """Evaluation flows; seeds are disjoint from every training stream and
    shared across training seeds so ablations compare on identical data."""
    gen = generate_volume_flow if mode == FlowMode.VOLUMETRIC else generate_unordered_flow
    offset = 0 if mode == FlowMode.VOLUMETRIC else 500_000
    return [gen(_EVAL_SEED_BASE + offset + i, n_frames, _CLASSES[i % 3], size)
            for i in range(n)]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _warmup_prob(config: TrainConfig, mode: FlowMode, step: int) -> float | None:
    if config.prompt_warmup_steps <= 0 or step > config.prompt_warmup_steps:
        return None
    base = (config.prompt_prob_volumetric if mode == FlowMode.VOLUMETRIC
            else config.prompt_prob_unordered)
    frac = step / config.prompt_warmup_steps
    return 1.0 + (base - 1.0) * frac


def _train_one_flow(flow: Flow, params: ModelParams, config: TrainConfig,
                    rng: np.random.Generator, scale: float,
                    prob_override: float | None = None) -> dict:
    """Forward/backward over one flow in propagation order; gradients
    accumulate into the parameter tensors."""
    prompted = sample_prompts(flow, rng, config, prob_override=prob_override)
    order = engine.propagation_order(flow.n_frames, prompted, flow.mode)
    bank = MemoryBank(config=config.bank_config(flow.mode))
    sums = {"bce": 0.0, "dice": 0.0, "cal": 0.0, "train_dice": 0.0, "frames": 0}
    for frame in order:
        gt = flow.mask(frame)
        prompt = None
        if frame in prompted:
            kind = _PROMPT_KINDS[int(rng.integers(0, 3))]
            prompt = auto_prompt(gt, kind, seed=int(rng.integers(2 ** 31)), frame_index=frame)
        emb = netcore.image_encode(flow.image(frame), params)
        entries = bank.entries
        if entries:
            summary_q = emb.tokens.data.mean(axis=0)
            if bank.config.mode == BankMode.CONFIDENCE_FIRST:
                weights = membank.pickup_weights(bank, summary_q)
            else:
                weights = membank.uniform_weights(bank)
        else:
            weights = np.zeros(0)
        dec, summary, feature = netcore.forward_core(
            flow.image(frame), prompt, entries, weights, params, embedding=emb)
        probs = 1.0 / (1.0 + np.exp(-dec.logits.data))
        realized = metrics.dice(probs >= 0.5, gt.cells)
        bce, dice_term = seg_loss_parts(dec.logits, gt)
        cal = calib_loss(dec.confidence, realized)
        loss = (config.lambda_bce * bce + config.lambda_dice * dice_term
                + config.lambda_cal * cal) * scale
        loss.backward()
        sums["bce"] += float(bce.data)
        sums["dice"] += float(dice_term.data)
        sums["cal"] += float(cal.data)
        sums["train_dice"] += realized
        sums["frames"] += 1
        entry = MemoryEntry(frame_index=frame, embedding_summary=summary,
                            feature=feature,
                            pointer=ObjectPointer(dec.object_pointer.data.copy()),
                            confidence=float(dec.confidence.data),
                            is_template=prompt is not None)
        bank = membank.insert(bank, entry)
    return sums


def train(config: TrainConfig,
          progress: Callable[[dict, ModelParams], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Adam over mixed volumetric/unordered flows; deterministic in the seed."""
    params = netcore.init_params(config.net, config.seed)
    log = TrainLog()
    if config.steps == 0:
        if config.checkpoint_path:
            netcore.save_params(params, config.checkpoint_path)
        return params, log
    rng_shuffle = np.random.default_rng(np.random.SeedSequence((config.seed, 301)))
    rng_prompts = np.random.default_rng(np.random.SeedSequence((config.seed, 302)))
    pool = ([(FlowMode.VOLUMETRIC, i) for i in range(config.n_volumetric)]
            + [(FlowMode.UNORDERED, i) for i in range(config.n_unordered)])
    cache: dict[tuple[FlowMode, int], Flow] = {}
    queue: list[tuple[FlowMode, int]] = []

    def next_flows(k: int) -> list[Flow]:
        nonlocal queue
        out = []
        for _ in range(k):
            if not queue:
                queue = list(pool)
                rng_shuffle.shuffle(queue)
            mode, idx = queue.pop()
            if (mode, idx) not in cache:
                cache[(mode, idx)] = training_flow(config, mode, idx)
            out.append(cache[(mode, idx)])
        return out

    m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for step in range(1, config.steps + 1):
        for t in params.tensors.values():
            t.grad = None
        flows = next_flows(config.flows_per_step)
        total_frames = sum(f.n_frames for f in flows)
        comps = {"bce": 0.0, "dice": 0.0, "cal": 0.0, "train_dice": 0.0, "frames": 0}
        for flow in flows:
            sums = _train_one_flow(flow, params, config, rng_prompts, 1.0 / total_frames,
                                   prob_override=_warmup_prob(config, flow.mode, step))
            for k in comps:
                comps[k] += sums[k]
        record = {
            "step": step,
            "loss": (config.lambda_bce * comps["bce"] + config.lambda_dice * comps["dice"]
                     + config.lambda_cal * comps["cal"]) / comps["frames"],
            "bce": comps["bce"] / comps["frames"],
            "dice_loss": comps["dice"] / comps["frames"],
            "cal": comps["cal"] / comps["frames"],
            "train_dice": comps["train_dice"] / comps["frames"],
        }
        if not np.isfinite(record["loss"]):
            raise NumericError(f"non-finite loss at step {step}: "
                               f"bce={record['bce']:.4g} dice={record['dice_loss']:.4g} "
                               f"cal={record['cal']:.4g}")
        lr_t = config.learning_rate * (np.sqrt(1 - beta2 ** step) / (1 - beta1 ** step))
        for name, t in params.tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m[name] = beta1 * m[name] + (1 - beta1) * g
            v[name] = beta2 * v[name] + (1 - beta2) * (g * g)
            t.data = t.data - lr_t * m[name] / (np.sqrt(v[name]) + eps)
        params.steps = step
        log.append(record)
        if config.eval_every and step % config.eval_every == 0:
            for mode, bank_mode in ((FlowMode.VOLUMETRIC, "fifo"),
                                    (FlowMode.UNORDERED, "confidence_first")):
                summary = evaluate(params, held_out_flows(mode, config.eval_flows,
                                                          config.frames_per_flow,
                                                          config.image_size),
                                   bank_mode, prompt_kind=PromptKind.MASK)
                log.append({"step": step, "eval": mode.value,
                            "mean_dice": summary["mean_dice"],
                            "mean_iou": summary["mean_iou"],
                            "mean_hd95": summary["mean_hd95"],
                            "spearman_conf_dice": summary["spearman_conf_dice"]})
        if config.checkpoint_path and config.checkpoint_every and step % config.checkpoint_every == 0:
            netcore.save_params(params, config.checkpoint_path)
        if progress is not None:
            progress(record, params)
    if config.checkpoint_path:
        netcore.save_params(params, config.checkpoint_path)
    return params, log


def train_to_checkpoint(config: TrainConfig, path: str) -> str:
    """Train and persist; importable entry point for worker processes."""
    params, _ = train(config)
    netcore.save_params(params, path)
    return path


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def _grad_check_losses(params: ModelParams, flow: Flow):
    """A small loss touching every differentiated path: three prompt kinds
    on frame 0 plus a memory-conditioned pass on frame 1. Memory entries
    and realized-Dice targets are frozen constants, mirroring training."""
    prompts = [auto_prompt(flow.mask(0), kind, seed=5, frame_index=0)
               for kind in _PROMPT_KINDS]
    with ad.no_grad():
        _, base_entry = netcore.forward_frame(flow.image(0), prompts[2], [], [], params)
    cases = [(0, p, [], np.zeros(0)) for p in prompts]
    cases.append((1, None, [base_entry], np.ones(1)))
    targets = []
    with ad.no_grad():
        for frame, prompt, entries, weights in cases:
            dec, _, _ = netcore.forward_core(flow.image(frame), prompt, entries, weights, params)
            probs = 1.0 / (1.0 + np.exp(-dec.logits.data))
            targets.append(metrics.dice(probs >= 0.5, flow.mask(frame).cells))

    def loss_fn(p: ModelParams) -> Tensor:
        total = None
        for (frame, prompt, entries, weights), target in zip(cases, targets):
            dec, _, _ = netcore.forward_core(flow.image(frame), prompt, entries, weights, p)
            bce, dice_term = seg_loss_parts(dec.logits, flow.mask(frame))
            term = bce + dice_term + 0.5 * calib_loss(dec.confidence, target)
            total = term if total is None else total + term
        return total

    return loss_fn


def grad_check(config: NetConfig | None = None, seed: int = 0, n_weights: int = 200,
               h: float = 1e-5, rel_floor: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central finite
    differences over ``n_weights`` randomly sampled weights."""
    cfg = config or NetConfig.tiny()
    params = netcore.init_params(cfg, seed)
    flow = generate_volume_flow(seed, 2, TaskClass.ELLIPSE, 4 * cfg.patch)
    loss_fn = _grad_check_losses(params, flow)
    analytic = netcore.grad(params, loss_fn)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 701)))
    names = sorted(params.tensors)
    worst = 0.0
    for _ in range(n_weights):
        name = names[int(rng.integers(len(names)))]
        t = params.tensors[name]
        idx = int(rng.integers(t.data.size))
        old = t.data.flat[idx]
        with ad.no_grad():
            t.data.flat[idx] = old + h
            up = float(loss_fn(params).data)
            t.data.flat[idx] = old - h
            down = float(loss_fn(params).data)
        t.data.flat[idx] = old
        fd = (up - down) / (2.0 * h)
        a = float(analytic[name].flat[idx])
        err = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class ModelAdapter:
    """Forward interface used by ``evaluate``; swap it for a test double."""

    def __init__(self, params: ModelParams):
        self.params = params

    def embed_summary(self, image: Image):
        with ad.no_grad():
            emb = netcore.image_encode(image, self.params)
        return emb, emb.tokens.data.mean(axis=0)

    def forward(self, image: Image, prompt: Prompt | None, entries, weights,
                frame_index: int, embedding=None, allow_unconditioned: bool = False):
        return netcore.forward_frame(image, prompt, entries, weights, self.params,
                                     frame_index=frame_index, embedding=embedding,
                                     allow_unconditioned=allow_unconditioned)


def _spearman(conf: Sequence[float], dice_vals: Sequence[float]) -> float:
    if len(conf) < 2:
        return 0.0
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # constant input -> NaN, mapped to 0
        rho = stats.spearmanr(conf, dice_vals).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def evaluate(params: ModelParams | None, flows: Sequence[Flow], bank_mode: str,
             prompt_kind: PromptKind | str = PromptKind.MASK,
             bank_config: BankConfig | None = None,
             adapter: ModelAdapter | None = None) -> dict:
    """One-prompt protocol: frame 0 of each flow gets an auto-generated
    prompt, every other frame is predicted via the selected memory policy
    (``none`` ablates memory entirely). Reports mean Dice/IoU/HD95 and the
    Spearman correlation between confidence and per-frame Dice over the
    propagated (unprompted) frames."""
    bank_mode = str(bank_mode)
    if bank_mode not in ("none", "fifo", "confidence_first"):
        raise ArgumentError(f"unknown bank mode {bank_mode!r}")
    prompt_kind = PromptKind(prompt_kind)
    adapter = adapter or ModelAdapter(params)
    per_flow = []
    all_dice: list[float] = []
    all_iou: list[float] = []
    all_hd: list[float] = []
    conf_pool: list[float] = []
    dice_pool: list[float] = []
    for fi, flow in enumerate(flows):
        if bank_mode != "none":
            cfg = bank_config or BankConfig(mode=BankMode(bank_mode))
            if cfg.mode != BankMode(bank_mode):
                cfg = replace(cfg, mode=BankMode(bank_mode))
            bank = MemoryBank(config=cfg)
        else:
            bank = None
        prompt = auto_prompt(flow.mask(0), prompt_kind, seed=1000 + fi, frame_index=0)
        order = engine.propagation_order(flow.n_frames, {0}, flow.mode)
        flow_dice = []
        for frame in order:
            image = flow.image(frame)
            if frame == 0:
                pred, entry = adapter.forward(image, prompt, [], np.zeros(0), frame)
                if bank is not None:
                    bank = membank.insert(bank, entry)
            elif bank is None:
                pred, _ = adapter.forward(image, None, [], np.zeros(0), frame,
                                          allow_unconditioned=True)
            else:
                emb, summary = adapter.embed_summary(image)
                if bank.config.mode == BankMode.CONFIDENCE_FIRST:
                    weights = membank.pickup_weights(bank, summary)
                else:
                    weights = membank.uniform_weights(bank)
                pred, entry = adapter.forward(image, None, bank.entries, weights, frame,
                                              embedding=emb)
                bank = membank.insert(bank, entry)
            gt = flow.mask(frame)
            d = metrics.dice(pred.mask, gt.cells)
            all_dice.append(d)
            flow_dice.append(d)
            all_iou.append(metrics.iou(pred.mask, gt.cells))
            rec = metrics.frame_report(frame, pred.mask, gt.cells)
            if rec["hd95"] is not None:
                all_hd.append(rec["hd95"])
            if frame != 0:
                conf_pool.append(pred.confidence)
                dice_pool.append(d)
        per_flow.append({"flow": fi, "mode": flow.mode.value,
                         "task_class": flow.task_class.value,
                         "mean_dice": float(np.mean(flow_dice))})
    if not per_flow:
        return {"bank_mode": bank_mode, "n_flows": 0, "n_frames": 0,
                "mean_dice": None, "mean_iou": None, "mean_hd95": None,
                "mean_dice_unprompted": None, "spearman_conf_dice": None,
                "per_flow": []}
    return {
        "bank_mode": bank_mode,
        "n_flows": len(per_flow),
        "n_frames": len(all_dice),
        "mean_dice": float(np.mean(all_dice)),
        "mean_iou": float(np.mean(all_iou)),
        "mean_hd95": float(np.mean(all_hd)) if all_hd else None,
        "mean_dice_unprompted": float(np.mean(dice_pool)) if dice_pool else None,
        "spearman_conf_dice": _spearman(conf_pool, dice_pool),
        "confidences": conf_pool,
        "frame_dices": dice_pool,
        "per_flow": per_flow,
    }
