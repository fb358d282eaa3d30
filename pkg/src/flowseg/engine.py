"""Sessions and propagation: one prompt drives masks for a whole flow.

Volumetric sessions use a FIFO bank and sweep bidirectionally from the
earliest prompted slice; unordered sessions use the confidence-first bank
with similarity-weighted pick-up and visit frames in index order with
wrap-around. ``propagate`` replays from the session's templates, so
repeated propagation without new prompts is idempotent; ``refine_from``
recomputes only the frames visited after the refined frame in the last
visitation order.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import membank, netcore
from .errors import ArgumentError, ConfigError, UsageError
from .flowdata import Flow, FlowMode, Prompt
from .membank import BankConfig, BankMode, MemoryBank
from .netcore import MaskPrediction, ModelParams

_session_counter = itertools.count(1)
_counter_lock = threading.Lock()

_MODE_TO_BANK = {FlowMode.VOLUMETRIC: BankMode.FIFO,
                 FlowMode.UNORDERED: BankMode.CONFIDENCE_FIRST}


@dataclass
class PropagationResult:
    masks: tuple[MaskPrediction, ...]  # every frame, in frame order
    order: tuple[int, ...]  # visitation order
    bank_snapshots: tuple[tuple[dict, ...], ...]  # per visited step
    recomputed: tuple[int, ...]  # frames recomputed by this call


@dataclass
class Session:
    id: str
    flow: Flow
    params: ModelParams
    bank: MemoryBank
    predictions: list[MaskPrediction | None]
    prompt_log: list[tuple[int, Prompt]] = field(default_factory=list)
    last_result: PropagationResult | None = None
    pre_step_banks: list[MemoryBank] = field(default_factory=list)
    bidirectional: bool = True

    @property
    def prompted_frames(self) -> set[int]:
        return {f for f, _ in self.prompt_log}


def propagation_order(n_frames: int, prompted: set[int], mode: FlowMode,
                      bidirectional: bool = True) -> list[int]:
    """Visitation order from the earliest prompted frame.

    Volumetric: ascending to the end, then descending below the start
    (ascending only when bidirectional is off). Unordered: index order
    with wrap-around.
    """
    if not prompted:
        raise UsageError("propagation needs at least one prompted frame")
    start = min(prompted)
    if mode == FlowMode.VOLUMETRIC:
        order = list(range(start, n_frames))
        if bidirectional:
            order += list(range(start - 1, -1, -1))
        return order
    return [(start + i) % n_frames for i in range(n_frames)]


def start_session(flow: Flow, params: ModelParams, bank_config: BankConfig,
                  session_id: str | None = None, bidirectional: bool = True) -> Session:
    """New session with an empty bank; bank mode must match the flow mode."""
    expected = _MODE_TO_BANK[flow.mode]
    if bank_config.mode != expected:
        raise ConfigError(
            f"{flow.mode.value} flows require bank mode {expected.value}, "
            f"got {bank_config.mode.value}")
    if session_id is None:
        with _counter_lock:
            session_id = f"s-{next(_session_counter):06d}"
    return Session(id=session_id, flow=flow, params=params,
                   bank=MemoryBank(config=bank_config),
                   predictions=[None] * flow.n_frames,
                   bidirectional=bidirectional)


def _bank_weights(bank: MemoryBank, query_summary: np.ndarray) -> np.ndarray:
    if bank.config.mode == BankMode.CONFIDENCE_FIRST:
        return membank.pickup_weights(bank, query_summary)
    return membank.uniform_weights(bank)


def _forward(session: Session, frame: int, prompt: Prompt | None,
             bank: MemoryBank) -> tuple[MaskPrediction, membank.MemoryEntry, np.ndarray]:
    image = session.flow.image(frame)
    entries = bank.entries
    with ad.no_grad():
        emb = netcore.image_encode(image, session.params)
    if entries:
        weights = _bank_weights(bank, emb.tokens.data.mean(axis=0))
    else:
        weights = np.zeros(0)
    pred, entry = netcore.forward_frame(image, prompt, entries, weights,
                                        session.params, frame_index=frame,
                                        embedding=emb)
    return pred, entry, weights


def add_prompt(session: Session, frame_index: int, prompt: Prompt) -> MaskPrediction:
    """Run the prompted frame against the current bank and store its entry
    as a permanent template."""
    if not (0 <= frame_index < session.flow.n_frames):
        raise ArgumentError(f"frame {frame_index} outside flow of {session.flow.n_frames}")
    prompt.validate_bounds(session.flow.height, session.flow.width, session.flow.n_frames)
    if prompt.frame_index != frame_index:
        raise ArgumentError("prompt.frame_index does not match the prompted frame")
    pred, entry, _ = _forward(session, frame_index, prompt, session.bank)
    session.bank = membank.insert(session.bank, entry)
    session.predictions[frame_index] = pred
    session.prompt_log.append((frame_index, prompt))
    return pred


def _replay(session: Session, work: MemoryBank, order: list[int],
            start_pos: int) -> tuple[MemoryBank, list[tuple[dict, ...]], list[MemoryBank], list[int]]:
    """Run propagation steps ``order[start_pos:]``; returns the final bank,
    per-step snapshots, per-step pre-banks, and recomputed frames."""
    prompted = session.prompted_frames
    snapshots: list[tuple[dict, ...]] = []
    pre_banks: list[MemoryBank] = []
    recomputed: list[int] = []
    for frame in order[start_pos:]:
        pre_banks.append(work)
        if frame in prompted:
            snapshots.append(tuple(membank.snapshot(work)))
            continue
        pred, entry, weights = _forward(session, frame, None, work)
        work = membank.insert(work, entry)
        work = membank.with_last_weights(work, list(weights)) if len(weights) else work
        session.predictions[frame] = pred
        recomputed.append(frame)
        snapshots.append(tuple(membank.snapshot(work)))
    return work, snapshots, pre_banks, recomputed


def propagate(session: Session) -> PropagationResult:
    """Predict every frame, replaying from the session's templates."""
    if not session.prompt_log:
        raise UsageError("propagate requires at least one prompt")
    order = propagation_order(session.flow.n_frames, session.prompted_frames,
                              session.flow.mode, session.bidirectional)
    work = membank.carry_templates(session.bank)
    work, snapshots, pre_banks, recomputed = _replay(session, work, order, 0)
    session.bank = work
    session.pre_step_banks = pre_banks
    result = PropagationResult(masks=tuple(session.predictions),
                               order=tuple(order),
                               bank_snapshots=tuple(snapshots),
                               recomputed=tuple(recomputed))
    session.last_result = result
    return result


def refine_from(session: Session, frame_index: int, prompt: Prompt) -> PropagationResult:
    """Re-prompt one frame and recompute it plus everything visited after
    it in the last propagation order."""
    if session.last_result is None:
        raise UsageError("refine_from requires a completed propagation")
    if not (0 <= frame_index < session.flow.n_frames):
        raise ArgumentError(f"frame {frame_index} outside flow of {session.flow.n_frames}")
    prompt.validate_bounds(session.flow.height, session.flow.width, session.flow.n_frames)
    order = list(session.last_result.order)
    pos = order.index(frame_index)
    work = session.pre_step_banks[pos]
    # Templates created after this snapshot (earlier refinements) must
    # stay visible: templates are permanent regardless of replay point.
    known = {id(t) for t in work.templates}
    missing = tuple(t for t in session.bank.templates if id(t) not in known)
    work = membank.merge_templates(work, missing)
    pred, entry, weights = _forward(session, frame_index, prompt, work)
    work = membank.insert(work, entry)  # template: prompt provenance
    if len(weights):
        work = membank.with_last_weights(work, list(weights))
    session.predictions[frame_index] = pred
    session.prompt_log.append((frame_index, prompt))
    refined_snapshot = tuple(membank.snapshot(work))
    work, tail_snapshots, tail_pre_banks, tail_recomputed = _replay(session, work, order, pos + 1)
    session.bank = work
    old = session.last_result
    snapshots = old.bank_snapshots[:pos] + (refined_snapshot,) + tuple(tail_snapshots)
    session.pre_step_banks = session.pre_step_banks[:pos] + [session.pre_step_banks[pos]] + tail_pre_banks
    result = PropagationResult(masks=tuple(session.predictions),
                               order=tuple(order),
                               bank_snapshots=snapshots,
                               recomputed=(frame_index,) + tuple(tail_recomputed))
    session.last_result = result
    return result
