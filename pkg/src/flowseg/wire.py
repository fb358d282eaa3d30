"""Wire encodings for the HTTP service: run-length masks and raw images.

Masks travel as run lengths over the row-major flattening, alternating
values starting with 0, each run a little-endian uint32, base64-wrapped.
Images travel as base64 float32 little-endian pixels.
"""
from __future__ import annotations

import base64

import numpy as np

from .errors import FlowFormatError


def rle_encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask).astype(np.uint8).ravel()
    if m.size == 0:
        raise FlowFormatError("cannot encode an empty mask")
    changes = np.nonzero(np.diff(m))[0] + 1
    bounds = np.concatenate([[0], changes, [m.size]])
    runs = np.diff(bounds)
    if m[0] == 1:  # encoding starts with a (possibly zero-length) run of 0s
        runs = np.concatenate([[0], runs])
    return {
        "rle": base64.b64encode(runs.astype("<u4").tobytes()).decode("ascii"),
        "height": int(mask.shape[0]),
        "width": int(mask.shape[1]),
    }


def rle_decode(payload: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(payload["rle"], validate=True)
        height, width = int(payload["height"]), int(payload["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FlowFormatError(f"malformed rle payload: {exc}")
    if len(raw) % 4:
        raise FlowFormatError(f"rle byte length {len(raw)} not a multiple of 4")
    runs = np.frombuffer(raw, dtype="<u4")
    total = int(runs.sum())
    if total != height * width:
        raise FlowFormatError(f"rle covers {total} cells, expected {height * width}")
    values = np.arange(len(runs)) % 2
    flat = np.repeat(values.astype(np.uint8), runs)
    return flat.reshape(height, width)


def image_encode(pixels: np.ndarray) -> dict:
    return {
        "pixels": base64.b64encode(np.asarray(pixels, dtype="<f4").tobytes()).decode("ascii"),
        "height": int(pixels.shape[0]),
        "width": int(pixels.shape[1]),
    }


def image_decode(payload: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(payload["pixels"], validate=True)
        height, width = int(payload["height"]), int(payload["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FlowFormatError(f"malformed image payload: {exc}")
    if len(raw) != height * width * 4:
        raise FlowFormatError(f"image payload {len(raw)} bytes, expected {height * width * 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width).copy()
