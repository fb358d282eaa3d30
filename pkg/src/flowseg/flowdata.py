"""Flows: images, masks, prompts, synthetic generators, and .flow file I/O.

A flow is an ordered list of grayscale frames with per-frame ground-truth
masks. Volumetric flows mimic a 3D scan (the target drifts smoothly from
slice to slice); unordered flows re-draw placement, scale, and texture
phase independently per frame. Each task class carries its own shape
family and texture so "same structure across frames" is a learnable cue.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ArgumentError, EmptyForegroundError, FlowFormatError, ShapeError

FLOW_MAGIC = b"FLOW"
FLOW_VERSION = 1
_HEADER = struct.Struct("<4sBBBBIII")  # magic, version, mode, class, pad, n, H, W
_HEADER_SIZE = 32  # header struct padded with zeros up to this size


class FlowMode(str, Enum):
    VOLUMETRIC = "volumetric"
    UNORDERED = "unordered"


class TaskClass(str, Enum):
    ELLIPSE = "ellipse"
    RING = "ring"
    POLYGON_BLOB = "polygon_blob"


_CLASS_IDS = {TaskClass.ELLIPSE: 0, TaskClass.RING: 1, TaskClass.POLYGON_BLOB: 2}
_MODE_IDS = {FlowMode.VOLUMETRIC: 0, FlowMode.UNORDERED: 1}


@dataclass(frozen=True)
class Image:
    """Grayscale frame; float32 intensities in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 2 or px.shape[0] < 8 or px.shape[1] < 8:
            raise ArgumentError(f"image must be 2D with sides >= 8, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ArgumentError("image intensities must be finite and within [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary mask; uint8 cells in {0, 1}."""

    cells: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cells)
        if c.ndim != 2:
            raise ArgumentError(f"mask must be 2D, got shape {c.shape}")
        if not np.isin(c, (0, 1)).all():
            raise ArgumentError("mask values must be strictly binary")
        object.__setattr__(self, "cells", c.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def is_empty(self) -> bool:
        return not self.cells.any()


class PromptKind(str, Enum):
    POINT = "point"
    BOX = "box"
    MASK = "mask"


@dataclass(frozen=True)
class Prompt:
    """A point, box, or mask anchored to one frame of a flow.

    point: (row, col, positive); box: (r0, c0, r1, c1) with r0 < r1 and
    c0 < c1, corners inclusive; mask: a full Mask.
    """

    frame_index: int
    kind: PromptKind
    row: int | None = None
    col: int | None = None
    positive: bool = True
    r0: int | None = None
    c0: int | None = None
    r1: int | None = None
    c1: int | None = None
    mask: Mask | None = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ArgumentError("frame_index must be non-negative")
        if self.kind == PromptKind.POINT:
            if self.row is None or self.col is None:
                raise ArgumentError("point prompt needs row and col")
        elif self.kind == PromptKind.BOX:
            if None in (self.r0, self.c0, self.r1, self.c1):
                raise ArgumentError("box prompt needs r0, c0, r1, c1")
            if not (self.r0 < self.r1 and self.c0 < self.c1):
                raise ArgumentError("box must satisfy r0 < r1 and c0 < c1")
        elif self.kind == PromptKind.MASK:
            if self.mask is None:
                raise ArgumentError("mask prompt needs a mask")

    def validate_bounds(self, height: int, width: int, n_frames: int) -> None:
        if not (0 <= self.frame_index < n_frames):
            raise ArgumentError(f"frame_index {self.frame_index} outside flow of {n_frames} frames")
        if self.kind == PromptKind.POINT:
            if not (0 <= self.row < height and 0 <= self.col < width):
                raise ArgumentError(f"point ({self.row}, {self.col}) outside {height}x{width} image")
        elif self.kind == PromptKind.BOX:
            if not (0 <= self.r0 and self.r1 < height and 0 <= self.c0 and self.c1 < width):
                raise ArgumentError("box corners outside image bounds")
        elif self.kind == PromptKind.MASK:
            if self.mask.cells.shape != (height, width):
                raise ShapeError("mask prompt shape differs from image shape")


@dataclass(frozen=True)
class Flow:
    """Ordered (Image, Mask) frames sharing one target shape class."""

    frames: tuple[tuple[Image, Mask], ...]
    mode: FlowMode
    task_class: TaskClass

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ArgumentError("flow must contain at least one frame")
        h, w = self.frames[0][0].pixels.shape
        for img, mask in self.frames:
            if img.pixels.shape != (h, w) or mask.cells.shape != (h, w):
                raise ShapeError("all frames and masks must share one shape")
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0][0].height

    @property
    def width(self) -> int:
        return self.frames[0][0].width

    def image(self, i: int) -> Image:
        return self.frames[i][0]

    def mask(self, i: int) -> Mask:
        return self.frames[i][1]


# ---------------------------------------------------------------------------
# Shape rasterization and textures
# ---------------------------------------------------------------------------

# Drift caps for volumetric flows, relative to a 64px frame. Rings get a
# tighter center step: their thin band makes slice-to-slice IoU far more
# sensitive to translation than filled shapes.
_MAX_CENTER_STEP = {TaskClass.ELLIPSE: 1.5, TaskClass.RING: 0.9, TaskClass.POLYGON_BLOB: 1.5}
_MAX_AXIS_STEP = {TaskClass.ELLIPSE: 0.08, TaskClass.RING: 0.05, TaskClass.POLYGON_BLOB: 0.08}
_MAX_ANGLE_STEP = 0.12


@dataclass
class _ObjectState:
    task_class: TaskClass
    center: np.ndarray  # (row, col) floats
    axes: np.ndarray  # (a, b) floats, pixels
    angle: float
    phase: float
    inner_frac: float  # ring hole radius fraction
    harmonics: np.ndarray  # (4,) blob boundary amplitudes
    harmonic_phases: np.ndarray  # (4,)
    contrast: float  # texture amplitude scale in (0, 1]


def _raster_object(state: _ObjectState, size: int) -> np.ndarray:
    """Rasterize one object as a boolean mask on a size x size grid."""
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dr = rr - state.center[0]
    dc = cc - state.center[1]
    ca, sa = np.cos(state.angle), np.sin(state.angle)
    u = (ca * dr + sa * dc) / state.axes[0]
    v = (-sa * dr + ca * dc) / state.axes[1]
    q = np.sqrt(u * u + v * v)
    if state.task_class == TaskClass.ELLIPSE:
        return q <= 1.0
    if state.task_class == TaskClass.RING:
        return (q <= 1.0) & (q >= state.inner_frac)
    theta = np.arctan2(v, u)
    boundary = 1.0
    for k, (amp, ph) in enumerate(zip(state.harmonics, state.harmonic_phases), start=2):
        boundary = boundary + amp * np.cos(k * theta + ph)
    return q <= boundary


# Per-class intensity bands: the texture family and the band both identify
# the class, but nothing in a single frame identifies which class is the
# target; that information only arrives through the prompt or memory.
_CLASS_BASE = {TaskClass.ELLIPSE: 0.52, TaskClass.RING: 0.68, TaskClass.POLYGON_BLOB: 0.84}


def _texture(state: _ObjectState, size: int) -> np.ndarray:
    """Class-specific texture field evaluated on the whole grid."""
    rr, cc = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    amp = 0.10 * state.contrast
    base = _CLASS_BASE[state.task_class]
    freq = 2.0 * np.pi * 7.0 / size
    if state.task_class == TaskClass.ELLIPSE:
        wave = np.sin(freq * rr + state.phase)
    elif state.task_class == TaskClass.RING:
        wave = np.sin(freq * cc + state.phase)
    else:
        wave = np.sin(freq * (rr + cc) * 0.75 + state.phase) * np.sin(freq * (rr - cc) * 0.75 - state.phase)
    return np.clip(base + amp * wave, 0.0, 1.0)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-intensity field: bilinear-upsampled coarse noise."""
    coarse = rng.uniform(0.04, 0.30, size=(5, 5))
    xs = np.linspace(0, 4, size)
    i0 = np.clip(xs.astype(int), 0, 3)
    t = xs - i0
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    cols = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
    return cols


def _spawn_object(rng: np.random.Generator, task_class: TaskClass, size: int,
                  avoid: Sequence[_ObjectState] = ()) -> _ObjectState:
    """Draw a placed object, rejection-sampling positions to stay clear of
    ``avoid``. All classes share one size distribution so object size never
    identifies the target. If no clear position exists the best candidate
    (largest minimum gap) is used; the target is rasterized last, so its
    mask stays exact even when objects touch."""
    a = rng.uniform(0.14, 0.21) * size
    b = a * rng.uniform(0.7, 1.0)
    state = _ObjectState(
        task_class=task_class,
        center=np.zeros(2),
        axes=np.array([a, b]),
        angle=rng.uniform(0.0, np.pi),
        phase=rng.uniform(0.0, 2.0 * np.pi),
        inner_frac=rng.uniform(0.35, 0.5),
        harmonics=rng.uniform(0.02, 0.08, size=4),
        harmonic_phases=rng.uniform(0.0, 2.0 * np.pi, size=4),
        contrast=rng.uniform(0.55, 1.0),
    )
    margin = a + 2.0
    best_center, best_gap = None, -np.inf
    for _ in range(60):
        center = rng.uniform(margin, size - margin, size=2)
        gap = min((np.linalg.norm(center - o.center) - a - o.axes[0] for o in avoid),
                  default=np.inf)
        if gap > 1.0:
            best_center = center
            break
        if gap > best_gap:
            best_center, best_gap = center, gap
    state.center = best_center
    return state


def _drift_object(rng: np.random.Generator, state: _ObjectState, size: int) -> _ObjectState:
    """One smooth random-walk step, bounded per the volumetric drift caps."""
    scale = size / 64.0
    step = _MAX_CENTER_STEP[state.task_class]
    center = state.center + rng.uniform(-step, step, size=2) * scale
    margin = state.axes[0] + 2.0
    center = np.clip(center, margin, size - margin)
    astep = _MAX_AXIS_STEP[state.task_class]
    axes = state.axes * rng.uniform(1.0 - astep, 1.0 + astep, size=2)
    axes = np.clip(axes, 0.12 * size, 0.23 * size)
    axes[1] = min(axes[1], axes[0])
    return _ObjectState(
        task_class=state.task_class,
        center=center,
        axes=axes,
        angle=state.angle + rng.uniform(-_MAX_ANGLE_STEP, _MAX_ANGLE_STEP),
        phase=state.phase + rng.uniform(-0.25, 0.25),
        inner_frac=state.inner_frac,
        harmonics=state.harmonics,
        harmonic_phases=state.harmonic_phases,
        contrast=float(np.clip(state.contrast + rng.uniform(-0.08, 0.08), 0.5, 1.0)),
    )


def _other_classes(task_class: TaskClass) -> list[TaskClass]:
    return [c for c in TaskClass if c != task_class]


def _spawn_scene(rng: np.random.Generator, task_class: TaskClass,
                 size: int) -> tuple[_ObjectState, list[_ObjectState]]:
    """One target plus one distractor of each other class. Every frame shows
    all three shape classes at the same size distribution, so only class
    identity (from the prompt or memory) picks out the target."""
    others = _other_classes(task_class)
    if rng.random() < 0.5:
        others = others[::-1]
    placed: list[_ObjectState] = []
    target = _spawn_object(rng, task_class, size)
    placed.append(target)
    distractors = []
    for cls in others:
        d = _spawn_object(rng, cls, size, avoid=placed)
        placed.append(d)
        distractors.append(d)
    return target, distractors


# Frame degradation follows a 2-state Markov chain, so hard frames arrive
# in bursts (like real acquisition artifacts) rather than i.i.d. Stationary
# rate ~0.26, mean burst length ~2.9 frames.
_DEGRADE_ENTER = 0.12
_DEGRADE_STAY = 0.65


def _step_degraded(rng: np.random.Generator, degraded: bool) -> bool:
    p = _DEGRADE_STAY if degraded else _DEGRADE_ENTER
    return bool(rng.random() < p)


def _render_frame(rng: np.random.Generator, target: _ObjectState,
                  distractors: list[_ObjectState], size: int,
                  degraded: bool) -> tuple[Image, Mask]:
    """Composite distractors then the target (its mask stays exact under
    overlap). Degraded frames fade toward the background and pick up
    heavier noise, so per-frame difficulty actually varies: that spread is
    what the confidence head predicts and the confidence-first bank
    filters on."""
    img = _background(rng, size)
    for obj in distractors:
        m = _raster_object(obj, size)
        img = np.where(m, _texture(obj, size), img)
    target_mask = _raster_object(target, size)
    img = np.where(target_mask, _texture(target, size), img)
    if degraded:
        fade = rng.uniform(0.45, 0.7)
        img = img * fade + 0.15 * (1.0 - fade)
        sigma = 0.045
    else:
        sigma = 0.015
    img = img + rng.normal(0.0, sigma, size=(size, size))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Image(img), Mask(target_mask.astype(np.uint8))


def _check_gen_args(n_frames: int, size: int) -> None:
    if n_frames < 1:
        raise ArgumentError("n_frames must be >= 1")
    if size < 16:
        raise ArgumentError("size must be >= 16")


def generate_volume_flow(seed: int, n_frames: int, task_class: TaskClass | str,
                         size: int = 64) -> Flow:
    """Synthesize a volumetric flow: the target drifts smoothly slice to slice."""
    _check_gen_args(n_frames, size)
    task_class = TaskClass(task_class)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11, _CLASS_IDS[task_class])))
    target, distractors = _spawn_scene(rng, task_class, size)
    frames = []
    degraded = False
    for t in range(n_frames):
        if t > 0:
            target = _drift_object(rng, target, size)
            distractors = [_drift_object(rng, d, size) for d in distractors]
        degraded = _step_degraded(rng, degraded)
        frames.append(_render_frame(rng, target, distractors, size, degraded))
    return Flow(tuple(frames), FlowMode.VOLUMETRIC, task_class)


def generate_unordered_flow(seed: int, n_frames: int, task_class: TaskClass | str,
                            size: int = 64) -> Flow:
    """Synthesize an unordered flow: placement, scale, and phase are
    re-drawn independently per frame (no temporal coherence)."""
    _check_gen_args(n_frames, size)
    task_class = TaskClass(task_class)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23, _CLASS_IDS[task_class])))
    frames = []
    degraded = False
    for _ in range(n_frames):
        target, distractors = _spawn_scene(rng, task_class, size)
        degraded = _step_degraded(rng, degraded)
        frames.append(_render_frame(rng, target, distractors, size, degraded))
    return Flow(tuple(frames), FlowMode.UNORDERED, task_class)


def auto_prompt(mask: Mask, kind: PromptKind | str, seed: int, frame_index: int = 0) -> Prompt:
    """Derive a prompt from a ground-truth mask.

    point: a uniformly sampled foreground pixel (positive); box: the tight
    bounding box of the foreground (inclusive corners); mask: the mask
    verbatim. Degenerate one-pixel-wide boxes are widened by one pixel to
    keep corners strictly ordered.
    """
    kind = PromptKind(kind)
    if kind == PromptKind.MASK:
        return Prompt(frame_index=frame_index, kind=kind, mask=mask)
    rows, cols = np.nonzero(mask.cells)
    if rows.size == 0:
        raise EmptyForegroundError(f"cannot derive a {kind.value} prompt from an empty mask")
    if kind == PromptKind.POINT:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 37)))
        i = int(rng.integers(0, rows.size))
        return Prompt(frame_index=frame_index, kind=kind,
                      row=int(rows[i]), col=int(cols[i]), positive=True)
    r0, r1 = int(rows.min()), int(rows.max())
    c0, c1 = int(cols.min()), int(cols.max())
    if r0 == r1:
        r1 = r1 + 1 if r1 + 1 < mask.height else r1
        r0 = r0 - 1 if r0 == r1 else r0
    if c0 == c1:
        c1 = c1 + 1 if c1 + 1 < mask.width else c1
        c0 = c0 - 1 if c0 == c1 else c0
    return Prompt(frame_index=frame_index, kind=kind, r0=r0, c0=c0, r1=r1, c1=c1)


# ---------------------------------------------------------------------------
# .flow binary format
# ---------------------------------------------------------------------------


def save_flow(flow: Flow, path) -> None:
    """Write a flow: 32-byte header, float32 frames, uint8 masks (LE)."""
    header = _HEADER.pack(FLOW_MAGIC, FLOW_VERSION, _MODE_IDS[flow.mode],
                          _CLASS_IDS[flow.task_class], 0,
                          flow.n_frames, flow.height, flow.width)
    header = header.ljust(_HEADER_SIZE, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        for img, _ in flow.frames:
            fh.write(img.pixels.astype("<f4").tobytes())
        for _, mask in flow.frames:
            fh.write(mask.cells.astype(np.uint8).tobytes())


def load_flow(path) -> Flow:
    """Read a .flow file; raises FlowFormatError with a byte offset on damage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_SIZE:
        raise FlowFormatError(f"truncated header: {len(raw)} bytes", offset=len(raw))
    magic, version, mode_id, class_id, _, n_frames, height, width = _HEADER.unpack_from(raw, 0)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"bad magic {magic!r}, expected {FLOW_MAGIC!r}", offset=0)
    if version != FLOW_VERSION:
        raise FlowFormatError(f"unsupported version {version}", offset=4)
    modes = {v: k for k, v in _MODE_IDS.items()}
    classes = {v: k for k, v in _CLASS_IDS.items()}
    if mode_id not in modes:
        raise FlowFormatError(f"unknown mode id {mode_id}", offset=5)
    if class_id not in classes:
        raise FlowFormatError(f"unknown task class id {class_id}", offset=6)
    if n_frames < 1 or height < 8 or width < 8:
        raise FlowFormatError(f"implausible dimensions n={n_frames} {height}x{width}", offset=8)
    frame_bytes = height * width * 4
    mask_bytes = height * width
    expected = _HEADER_SIZE + n_frames * (frame_bytes + mask_bytes)
    if len(raw) != expected:
        raise FlowFormatError(f"payload size {len(raw)} != expected {expected}",
                              offset=min(len(raw), expected))
    frames = []
    offset = _HEADER_SIZE
    mask_base = _HEADER_SIZE + n_frames * frame_bytes
    for i in range(n_frames):
        px = np.frombuffer(raw, dtype="<f4", count=height * width,
                           offset=offset + i * frame_bytes).reshape(height, width)
        mk = np.frombuffer(raw, dtype=np.uint8, count=height * width,
                           offset=mask_base + i * mask_bytes).reshape(height, width)
        if not np.isin(mk, (0, 1)).all():
            raise FlowFormatError("non-binary mask payload", offset=mask_base + i * mask_bytes)
        try:
            frames.append((Image(px.copy()), Mask(mk.copy())))
        except ArgumentError as exc:
            raise FlowFormatError(f"invalid frame {i}: {exc}", offset=offset + i * frame_bytes)
    return Flow(tuple(frames), modes[mode_id], classes[class_id])
