"""Memory bank: FIFO temporal mode and confidence-first mode.

Template entries (from user-prompted frames) are never evicted. Candidate
entries obey the capacity bound; in confidence-first mode a new candidate
must also clear a cosine-diversity gate against everything already stored,
and once the bank is full it displaces the lowest-confidence candidate
only if it is strictly more confident (confidence ties evict the older
entry). Inserts are functional: they return a new bank and record
admission/rejection in its event log.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ArgumentError, NumericError, UsageError

if TYPE_CHECKING:  # pragma: no cover
    from .netcore import MemoryFeature, ObjectPointer


class BankMode(str, Enum):
    FIFO = "fifo"
    CONFIDENCE_FIRST = "confidence_first"


@dataclass(frozen=True)
class MemoryEntry:
    """One stored frame: pooled embedding, memory feature, pointer, confidence."""

    frame_index: int
    embedding_summary: np.ndarray  # (d,) mean-pooled frame embedding
    feature: "MemoryFeature"
    pointer: "ObjectPointer"
    confidence: float
    is_template: bool = False

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ArgumentError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class BankConfig:
    # diversity_threshold is calibrated to the observed cosine spread of
    # pooled frame embeddings on the synthetic corpus (median ~0.92,
    # p99 ~0.99): 0.995 rejects only true near-duplicates, so the bank
    # actually fills within one 16-frame flow.
    capacity: int = 8
    mode: BankMode = BankMode.CONFIDENCE_FIRST
    diversity_threshold: float = 0.995  # max allowed cosine similarity
    pickup_temperature: float = 0.1
    gate_templates: bool = True  # diversity-gate against templates too

    def __post_init__(self):
        if self.capacity < 1:
            raise ArgumentError("capacity must be >= 1")
        if not (0.0 < self.diversity_threshold <= 1.0):
            raise ArgumentError("diversity_threshold must be in (0, 1]")
        if self.pickup_temperature <= 0.0:
            raise ArgumentError("pickup_temperature must be positive")


@dataclass(frozen=True)
class MemoryBank:
    config: BankConfig
    templates: tuple[MemoryEntry, ...] = ()
    candidates: tuple[MemoryEntry, ...] = ()
    insert_seq: int = 0  # arrival counter, breaks confidence ties FIFO
    arrival: tuple[int, ...] = ()  # arrival index per candidate
    template_arrival: tuple[int, ...] = ()  # arrival index per template
    last_weights: tuple[float, ...] | None = None
    events: tuple[str, ...] = ()

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return self.templates + self.candidates

    def __len__(self) -> int:
        return len(self.templates) + len(self.candidates)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("zero-norm embedding summary in cosine similarity")
    return float(np.dot(a, b) / (na * nb))


def insert(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """Admit or reject an entry per the bank's policy; returns the new bank."""
    if entry.is_template:
        return replace(bank, templates=bank.templates + (entry,),
                       template_arrival=bank.template_arrival + (bank.insert_seq,),
                       insert_seq=bank.insert_seq + 1,
                       events=bank.events + (f"template frame={entry.frame_index}",))
    cfg = bank.config
    if cfg.mode == BankMode.FIFO:
        cands = bank.candidates + (entry,)
        arrival = bank.arrival + (bank.insert_seq,)
        evicted = 0
        while len(cands) > cfg.capacity:
            cands = cands[1:]
            arrival = arrival[1:]
            evicted += 1
        msg = f"fifo admit frame={entry.frame_index}" + (f" evicted={evicted}" if evicted else "")
        return replace(bank, candidates=cands, arrival=arrival,
                       insert_seq=bank.insert_seq + 1, events=bank.events + (msg,))

    gated = bank.candidates + (bank.templates if cfg.gate_templates else ())
    for other in gated:
        if _cosine(entry.embedding_summary, other.embedding_summary) > cfg.diversity_threshold:
            return replace(bank, events=bank.events + (
                f"reject frame={entry.frame_index}: too similar to frame={other.frame_index}",))
    if len(bank.candidates) < cfg.capacity:
        return replace(bank, candidates=bank.candidates + (entry,),
                       arrival=bank.arrival + (bank.insert_seq,),
                       insert_seq=bank.insert_seq + 1,
                       events=bank.events + (f"admit frame={entry.frame_index}",))
    confs = [c.confidence for c in bank.candidates]
    min_conf = min(confs)
    if entry.confidence <= min_conf:
        return replace(bank, events=bank.events + (
            f"reject frame={entry.frame_index}: confidence {entry.confidence:.3f} <= min {min_conf:.3f}",))
    victims = [i for i, c in enumerate(confs) if c == min_conf]
    victim = min(victims, key=lambda i: bank.arrival[i])  # oldest of the ties
    cands = list(bank.candidates)
    arrival = list(bank.arrival)
    evicted_frame = cands[victim].frame_index
    del cands[victim]
    del arrival[victim]
    cands.append(entry)
    arrival.append(bank.insert_seq)
    return replace(bank, candidates=tuple(cands), arrival=tuple(arrival),
                   insert_seq=bank.insert_seq + 1,
                   events=bank.events + (
                       f"admit frame={entry.frame_index} evicting frame={evicted_frame}",))


def pickup_weights(bank: MemoryBank, query_summary: np.ndarray,
                   temperature: float | None = None) -> np.ndarray:
    """Similarity-softmax weights over templates + candidates.

    w_i = softmax(cos(query, summary_i) / temperature); sums to 1.
    """
    entries = bank.entries
    if not entries:
        raise UsageError("pickup_weights on an empty bank")
    tau = bank.config.pickup_temperature if temperature is None else temperature
    if tau <= 0.0:
        raise ArgumentError("pickup temperature must be positive")
    sims = np.array([_cosine(query_summary, e.embedding_summary) for e in entries])
    logits = sims / tau
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def uniform_weights(bank: MemoryBank) -> np.ndarray:
    """The FIFO merge rule: uniform over the last min(K, available) entries
    by arrival order, zero elsewhere.

    This is a rolling temporal window: once K newer entries exist, older
    ones (including templates) drop out of the merge even though templates
    are never evicted from the bank. Contrast with pickup_weights, which
    always spans templates plus candidates.
    """
    n = len(bank)
    if n == 0:
        raise UsageError("uniform_weights on an empty bank")
    arrivals = np.array(bank.template_arrival + bank.arrival)
    window = min(bank.config.capacity, n)
    cutoff = np.sort(arrivals)[-window]
    weights = np.where(arrivals >= cutoff, 1.0 / window, 0.0)
    return weights


def with_last_weights(bank: MemoryBank, weights: Sequence[float]) -> MemoryBank:
    return replace(bank, last_weights=tuple(float(w) for w in weights))


def carry_templates(source: MemoryBank) -> MemoryBank:
    """Fresh bank holding only the source's templates (replay starting point)."""
    return MemoryBank(config=source.config, templates=source.templates,
                      template_arrival=source.template_arrival,
                      insert_seq=source.insert_seq)


def merge_templates(bank: MemoryBank, extra: Sequence[MemoryEntry]) -> MemoryBank:
    """Append templates that the bank does not hold yet (fresh arrivals)."""
    if not extra:
        return bank
    seq = bank.insert_seq
    arrivals = tuple(range(seq, seq + len(extra)))
    return replace(bank, templates=bank.templates + tuple(extra),
                   template_arrival=bank.template_arrival + arrivals,
                   insert_seq=seq + len(extra))


def snapshot(bank: MemoryBank) -> list[dict]:
    """Read-only inspection record, one dict per stored entry."""
    weights = bank.last_weights
    if weights is not None and len(weights) != len(bank):
        weights = None  # stale after later inserts
    out = []
    for i, e in enumerate(bank.entries):
        out.append({
            "frame_index": e.frame_index,
            "confidence": float(e.confidence),
            "is_template": e.is_template,
            "last_weight": float(weights[i]) if weights is not None else None,
        })
    return out
