"""HTTP service exposing interactive segmentation sessions.

POST /sessions                    create a session from a .flow path or inline flow
POST /sessions/{id}/prompts       prompt one frame, get its mask
POST /sessions/{id}/propagate     predict every frame
POST /sessions/{id}/refine        re-prompt a frame, recompute downstream
GET  /sessions/{id}/masks/{frame} fetch one predicted mask
GET  /sessions/{id}/bank          memory bank snapshot
GET  /healthz

All bodies are JSON; errors are {"code", "message"}. Requests to one
session are serialized through a per-session lock; sessions are
independent and run concurrently.
"""
from __future__ import annotations

import os
import threading
import time
from typing import Any, Literal

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from . import engine, membank, wire
from .errors import ArgumentError, ConfigError, FlowFormatError, FlowsegError, ShapeError, UsageError
from .flowdata import Flow, FlowMode, Image, Mask, Prompt, PromptKind, TaskClass, load_flow
from .membank import BankConfig, BankMode
from .netcore import MaskPrediction, ModelParams


class BankSpec(BaseModel):
    mode: Literal["fifo", "confidence_first"] | None = None
    capacity: int = 8
    diversity_threshold: float = 0.95
    pickup_temperature: float = 0.1


class InlineFrame(BaseModel):
    image: dict
    mask: dict


class InlineFlow(BaseModel):
    mode: Literal["volumetric", "unordered"]
    task_class: Literal["ellipse", "ring", "polygon_blob"]
    frames: list[InlineFrame]


class CreateSessionBody(BaseModel):
    flow_path: str | None = None
    flow: InlineFlow | None = None
    bank: BankSpec = Field(default_factory=BankSpec)


class PromptSpec(BaseModel):
    kind: Literal["point", "box", "mask"]
    row: int | None = None
    col: int | None = None
    positive: bool = True
    r0: int | None = None
    c0: int | None = None
    r1: int | None = None
    c1: int | None = None
    mask: dict | None = None


class PromptBody(BaseModel):
    frame: int
    prompt: PromptSpec


class _SessionBox:
    def __init__(self, session: engine.Session):
        self.session = session
        self.lock = threading.Lock()
        self.created_at = time.time()


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def _to_prompt(spec: PromptSpec, frame: int) -> Prompt:
    kind = PromptKind(spec.kind)
    if kind == PromptKind.MASK:
        if spec.mask is None:
            raise ArgumentError("mask prompt needs a mask payload")
        return Prompt(frame_index=frame, kind=kind, mask=Mask(wire.rle_decode(spec.mask)))
    if kind == PromptKind.POINT:
        if spec.row is None or spec.col is None:
            raise ArgumentError("point prompt needs row and col")
        return Prompt(frame_index=frame, kind=kind, row=spec.row, col=spec.col,
                      positive=spec.positive)
    if None in (spec.r0, spec.c0, spec.r1, spec.c1):
        raise ArgumentError("box prompt needs r0, c0, r1, c1")
    return Prompt(frame_index=frame, kind=kind, r0=spec.r0, c0=spec.c0,
                  r1=spec.r1, c1=spec.c1)


def _mask_payload(pred: MaskPrediction) -> dict:
    return {
        "mask": wire.rle_encode(pred.mask),
        "confidence": pred.confidence,
        "prob_stats": {"min": float(pred.probs.min()),
                       "max": float(pred.probs.max()),
                       "mean": float(pred.probs.mean())},
    }


def _result_payload(result: engine.PropagationResult) -> dict:
    return {
        "order": list(result.order),
        "masks": [wire.rle_encode(m.mask) for m in result.masks],
        "confidences": [m.confidence for m in result.masks],
        "recomputed": list(result.recomputed),
        "bank_snapshots": [list(s) for s in result.bank_snapshots],
    }


def _inline_to_flow(inline: InlineFlow) -> Flow:
    frames = [(Image(wire.image_decode(f.image)), Mask(wire.rle_decode(f.mask)))
              for f in inline.frames]
    return Flow(tuple(frames), FlowMode(inline.mode), TaskClass(inline.task_class))


def create_app(params: ModelParams, checkpoint_path: str | None = None,
               ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="flowseg service")
    sessions: dict[str, _SessionBox] = {}

    @app.exception_handler(RequestValidationError)
    async def on_validation(_req: Request, exc: RequestValidationError):
        return _error(422, "invalid_request", str(exc.errors()[:2]))

    @app.exception_handler(FlowsegError)
    async def on_flowseg(_req: Request, exc: FlowsegError):
        if isinstance(exc, (ConfigError, ArgumentError, ShapeError, FlowFormatError)):
            return _error(422, "invalid_request", str(exc))
        if isinstance(exc, UsageError):
            return _error(409, "conflict", str(exc))
        return _error(500, "internal", str(exc))

    def box_or_404(session_id: str) -> _SessionBox | None:
        return sessions.get(session_id)

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        if body.flow_path is not None:
            if not os.path.exists(body.flow_path):
                return _error(404, "not_found", f"no flow at {body.flow_path}")
            flow = load_flow(body.flow_path)
        elif body.flow is not None:
            flow = _inline_to_flow(body.flow)
        else:
            return _error(404, "not_found", "request needs flow_path or an inline flow")
        mode = BankMode(body.bank.mode) if body.bank.mode else (
            BankMode.FIFO if flow.mode == FlowMode.VOLUMETRIC else BankMode.CONFIDENCE_FIRST)
        bank_config = BankConfig(capacity=body.bank.capacity, mode=mode,
                                 diversity_threshold=body.bank.diversity_threshold,
                                 pickup_temperature=body.bank.pickup_temperature)
        session = engine.start_session(flow, params, bank_config)
        sessions[session.id] = _SessionBox(session)
        return {
            "id": session.id,
            "created_at": sessions[session.id].created_at,
            "mode": flow.mode.value,
            "task_class": flow.task_class.value,
            "n_frames": flow.n_frames,
            "height": flow.height,
            "width": flow.width,
        }

    @app.post("/sessions/{session_id}/prompts")
    def add_prompt(session_id: str, body: PromptBody):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        prompt = _to_prompt(body.prompt, body.frame)
        with box.lock:
            pred = engine.add_prompt(box.session, body.frame, prompt)
        return {"frame": body.frame, **_mask_payload(pred)}

    @app.post("/sessions/{session_id}/propagate")
    def propagate(session_id: str):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        with box.lock:
            result = engine.propagate(box.session)
        return _result_payload(result)

    @app.post("/sessions/{session_id}/refine")
    def refine(session_id: str, body: PromptBody):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        prompt = _to_prompt(body.prompt, body.frame)
        with box.lock:
            result = engine.refine_from(box.session, body.frame, prompt)
        return _result_payload(result)

    @app.get("/sessions/{session_id}/masks/{frame}")
    def get_mask(session_id: str, frame: int):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        with box.lock:
            if not (0 <= frame < box.session.flow.n_frames):
                return _error(422, "invalid_request", f"frame {frame} out of range")
            pred = box.session.predictions[frame]
            if pred is None:
                return _error(404, "not_found", f"frame {frame} has no prediction yet")
            return {"frame": frame, **_mask_payload(pred)}

    @app.get("/sessions/{session_id}/bank")
    def get_bank(session_id: str):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        with box.lock:
            return {"entries": membank.snapshot(box.session.bank)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        with box.lock:
            s = box.session
            return {
                "id": s.id,
                "created_at": box.created_at,
                "mode": s.flow.mode.value,
                "task_class": s.flow.task_class.value,
                "n_frames": s.flow.n_frames,
                "height": s.flow.height,
                "width": s.flow.width,
                "prompted_frames": sorted(s.prompted_frames),
                "predicted_frames": [i for i, p in enumerate(s.predictions) if p is not None],
            }

    @app.get("/sessions/{session_id}/frames/{frame}")
    def get_frame(session_id: str, frame: int):
        box = box_or_404(session_id)
        if box is None:
            return _error(404, "not_found", f"unknown session {session_id}")
        with box.lock:
            if not (0 <= frame < box.session.flow.n_frames):
                return _error(422, "invalid_request", f"frame {frame} out of range")
            img = box.session.flow.image(frame)
            return {"frame": frame, "image": wire.image_encode(img.pixels)}

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "checkpoint": checkpoint_path,
                "n_sessions": len(sessions)}

    if ui_dir and os.path.isdir(ui_dir):
        from fastapi.staticfiles import StaticFiles

        index = os.path.join(ui_dir, "index.html")
        if os.path.exists(index):
            @app.get("/")
            def root():
                return FileResponse(index)

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
