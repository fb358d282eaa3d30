"""Per-frame network: patch-transformer image encoder, prompt encoder,
memory encoder, memory attention (conditioning), two-way mask decoder, and
a calibration head that predicts the Dice of the model's own mask.

All forward math runs on float64 autodiff tensors; memory features and
object pointers are stored detached (plain arrays) because gradients do
not cross the memory bank between frames.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ArgumentError, FlowFormatError, NumericError, ShapeError,
                     UsageError)
from .flowdata import Image, Mask, Prompt, PromptKind
from .membank import MemoryEntry

CKPT_MAGIC = b"FSCP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 64
    patch: int = 8
    enc_blocks: int = 2
    mem_blocks: int = 2
    dec_blocks: int = 2
    heads: int = 4
    mlp_hidden: int = 128
    pixel_hidden: int = 16
    calib_hidden: int = 32
    pe_freqs: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ArgumentError("embed_dim must be divisible by heads")

    @classmethod
    def tiny(cls) -> "NetConfig":
        """Small configuration for gradient checking (16x16 images)."""
        return cls(embed_dim=8, patch=4, heads=2, mlp_hidden=16,
                   pixel_hidden=4, calib_hidden=8)


@dataclass
class EmbeddingMap:
    tokens: Tensor  # (n_tokens, d)
    grid: tuple[int, int]
    image: np.ndarray | None = None  # source pixels, kept for the pixel head


@dataclass
class PromptTokens:
    sparse: Tensor  # (k, d), k >= 1
    dense: Tensor | None = None  # (n_tokens, d) for mask prompts


@dataclass(frozen=True)
class MemoryFeature:
    tokens: np.ndarray  # (n_tokens, d), detached
    grid: tuple[int, int]


@dataclass(frozen=True)
class ObjectPointer:
    vector: np.ndarray  # (d,), detached


@dataclass
class DecoderOutput:
    logits: Tensor  # (H, W)
    object_pointer: Tensor  # (d,)
    confidence: Tensor  # scalar in (0, 1)


@dataclass(frozen=True)
class MaskPrediction:
    probs: np.ndarray  # (H, W) float64 in (0, 1)
    mask: np.ndarray  # (H, W) uint8, probs >= 0.5
    confidence: float


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _attn_names(prefix: str, d: int, kv_dim: int | None = None):
    kd = d if kv_dim is None else kv_dim
    return [(f"{prefix}.wq", (d, d)), (f"{prefix}.bq", (d,)),
            (f"{prefix}.wk", (kd, d)), (f"{prefix}.bk", (d,)),
            (f"{prefix}.wv", (kd, d)), (f"{prefix}.bv", (d,)),
            (f"{prefix}.wo", (d, d)), (f"{prefix}.bo", (d,))]


def _ln_names(prefix: str, d: int):
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _mlp_names(prefix: str, d: int, hidden: int):
    return [(f"{prefix}.w1", (d, hidden)), (f"{prefix}.b1", (hidden,)),
            (f"{prefix}.w2", (hidden, d)), (f"{prefix}.b2", (d,))]


def param_spec(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; checkpoint blob order follows it."""
    d, p, f = cfg.embed_dim, cfg.patch, 4 * cfg.pe_freqs
    spec: list[tuple[str, tuple[int, ...]]] = []
    spec += [("enc.patch.w", (p * p, d)), ("enc.patch.b", (d,)),
             ("enc.pos.w", (f, d)), ("enc.pos.b", (d,))]
    for i in range(cfg.enc_blocks):
        spec += _ln_names(f"enc{i}.ln1", d) + _attn_names(f"enc{i}.attn", d)
        spec += _ln_names(f"enc{i}.ln2", d) + _mlp_names(f"enc{i}.mlp", d, cfg.mlp_hidden)
    spec += _ln_names("enc.lnf", d)
    spec += [("prompt.pos.w", (f, d)), ("prompt.pos.b", (d,)), ("prompt.type", (5, d)),
             ("prompt.mask.w1", (p * p, d)), ("prompt.mask.b1", (d,)),
             ("prompt.mask.w2", (d, d)), ("prompt.mask.b2", (d,))]
    spec += [("mem.emb.w", (d, d)), ("mem.emb.b", (d,)),
             ("mem.probs.w", (p * p, d)), ("mem.probs.b", (d,)),
             ("mem.out.w", (d, d)), ("mem.out.b", (d,))]
    for i in range(cfg.mem_blocks):
        spec += _ln_names(f"ma{i}.ln1", d) + _attn_names(f"ma{i}.self", d)
        spec += _ln_names(f"ma{i}.ln2", d) + _attn_names(f"ma{i}.cross", d)
        spec += _ln_names(f"ma{i}.ln3", d) + _mlp_names(f"ma{i}.mlp", d, cfg.mlp_hidden)
    spec += _ln_names("ma.lnf", d)
    spec += [("dec.obj", (1, d))]
    for i in range(cfg.dec_blocks):
        spec += _ln_names(f"dec{i}.ln1", d) + _attn_names(f"dec{i}.self", d)
        spec += _ln_names(f"dec{i}.ln2", d) + _attn_names(f"dec{i}.t2i", d)
        spec += _ln_names(f"dec{i}.ln3", d) + _mlp_names(f"dec{i}.mlp", d, cfg.mlp_hidden)
        spec += _ln_names(f"dec{i}.ln4", d) + _attn_names(f"dec{i}.i2t", d)
    spec += _ln_names("dec.lnt", d) + _ln_names("dec.lnx", d)
    spec += [("dec.ptr.w", (d, d)), ("dec.ptr.b", (d,)),
             ("dec.pix.w1", (d + 2, cfg.pixel_hidden)), ("dec.pix.b1", (cfg.pixel_hidden,)),
             ("dec.pix.w2", (cfg.pixel_hidden, 1)), ("dec.pix.b2", (1,)),
             ("cal.w1", (2 * d, cfg.calib_hidden)), ("cal.b1", (cfg.calib_hidden,)),
             ("cal.w2", (cfg.calib_hidden, 1)), ("cal.b2", (1,))]
    return spec


@dataclass
class ModelParams:
    """All learnable weights plus the dims that shape them."""

    config: NetConfig
    tensors: dict[str, Tensor]
    seed: int = 0
    steps: int = 0

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config,
                           {k: Tensor(t.data.copy(), requires_grad=True)
                            for k, t in self.tensors.items()},
                           self.seed, self.steps)


def init_params(cfg: NetConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    tensors: dict[str, Tensor] = {}
    for name, shape in param_spec(cfg):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            data = np.zeros(shape)
        elif name in ("prompt.type", "dec.obj"):
            data = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            std = math.sqrt(2.0 / (fan_in + fan_out))
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors, seed=seed)


def save_params(params: ModelParams, path) -> None:
    """Checkpoint: fixed header (dims, seed, step count) + float64 blobs
    in param_spec order, little-endian."""
    cfg = params.config
    header = struct.pack("<4sI10IQQ", CKPT_MAGIC, CKPT_VERSION,
                         cfg.embed_dim, cfg.patch, cfg.enc_blocks, cfg.mem_blocks,
                         cfg.dec_blocks, cfg.heads, cfg.mlp_hidden, cfg.pixel_hidden,
                         cfg.calib_hidden, cfg.pe_freqs,
                         params.seed, params.steps)
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in param_spec(cfg):
            fh.write(params.tensors[name].data.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sI10IQQ")
    if len(raw) < head:
        raise FlowFormatError("truncated checkpoint header", offset=len(raw))
    magic, version, *dims, seed, steps = struct.unpack_from("<4sI10IQQ", raw, 0)
    if magic != CKPT_MAGIC:
        raise FlowFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise FlowFormatError(f"unsupported checkpoint version {version}", offset=4)
    cfg = NetConfig(*dims)
    offset = head
    tensors: dict[str, Tensor] = {}
    for name, shape in param_spec(cfg):
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(raw):
            raise FlowFormatError(f"truncated blob for {name}", offset=offset)
        data = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                             offset=offset).reshape(shape)
        tensors[name] = Tensor(data.copy(), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise FlowFormatError(f"{len(raw) - offset} trailing bytes", offset=offset)
    return ModelParams(cfg, tensors, seed=int(seed), steps=int(steps))


# ---------------------------------------------------------------------------
# Constant caches (positional features, interpolation matrices)
# ---------------------------------------------------------------------------

_FOURIER_CACHE: dict[tuple[int, int, int], np.ndarray] = {}
_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _fourier(coords: np.ndarray, n_freqs: int) -> np.ndarray:
    """(m, 2) normalized coords -> (m, 4 * n_freqs) sin/cos features."""
    freqs = 2.0 ** np.arange(n_freqs) * math.pi
    ang = coords[:, :, None] * freqs[None, None, :]  # (m, 2, F)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(coords.shape[0], -1)


def _grid_fourier(rows: int, cols: int, n_freqs: int) -> np.ndarray:
    key = (rows, cols, n_freqs)
    if key not in _FOURIER_CACHE:
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        coords = np.stack([(rr.ravel() + 0.5) / rows, (cc.ravel() + 0.5) / cols], axis=1)
        _FOURIER_CACHE[key] = _fourier(coords, n_freqs)
    return _FOURIER_CACHE[key]


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear resample weights, align_corners=False convention."""
    key = (n_out, n_in)
    if key not in _INTERP_CACHE:
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        w1 = np.clip(src - i0, 0.0, 1.0)
        mat = np.zeros((n_out, n_in))
        mat[np.arange(n_out), i0] += 1.0 - w1
        mat[np.arange(n_out), i1] += w1
        _INTERP_CACHE[key] = mat
    return _INTERP_CACHE[key]


def _patches(arr: np.ndarray, patch: int) -> np.ndarray:
    """(H, W) -> (n_tokens, patch*patch), row-major token order."""
    h, w = arr.shape
    gr, gc = h // patch, w // patch
    return (arr.reshape(gr, patch, gc, patch)
            .transpose(0, 2, 1, 3)
            .reshape(gr * gc, patch * patch))


def _check_finite(t: Tensor, stage: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values produced by {stage}")


def _pixel_features(image: np.ndarray | None, h: int, w: int) -> np.ndarray:
    """Per-pixel intensity plus a 3x3 local mean: the raw channel sharpens
    boundaries, the smoothed one separates texture troughs from background."""
    if image is None:
        return np.zeros((h * w, 2))
    blur = ndimage.uniform_filter(image, size=3, mode="nearest")
    return np.stack([image.ravel(), blur.ravel()], axis=1)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def attention(q, k, v, logit_bias: Sequence[float] | np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v.

    Shapes (m, d), (n, d), (n, d) with optional leading batch axes; the
    optional per-key bias has length n (-inf entries mask keys outright).
    Rows of the softmax sum to 1.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q dim {q.shape[-1]} != k dim {k.shape[-1]}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"k rows {k.shape[:-1]} != v rows {v.shape[:-1]}")
    d = q.shape[-1]
    scores = q @ ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)) \
        if k.ndim > 2 else q @ ad.transpose(k, (1, 0))
    scores = scores * (1.0 / math.sqrt(d))
    if logit_bias is not None:
        bias = np.asarray(logit_bias, dtype=np.float64)
        if bias.shape != (k.shape[-2],):
            raise ShapeError(f"bias length {bias.shape} != n keys {k.shape[-2]}")
        scores = scores + Tensor(bias)
    return ad.softmax(scores, axis=-1) @ v


def _linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _mlp(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _ln(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _mha(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int,
         kv: Tensor | None = None, bias: np.ndarray | None = None) -> Tensor:
    """Multi-head attention; ``bias`` is an additive per-key logit vector."""
    src = x if kv is None else kv
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = src @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = src @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    qh = ad.transpose(ad.reshape(q, (n, heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (m, heads, dh)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(v, (m, heads, dh)), (1, 0, 2))
    scores = (qh @ kh) * (1.0 / math.sqrt(dh))
    if bias is not None:
        scores = scores + Tensor(bias)
    out = ad.softmax(scores, axis=-1) @ vh
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, d))
    return out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


# ---------------------------------------------------------------------------
# Network stages
# ---------------------------------------------------------------------------


def image_encode(image: Image | np.ndarray, params: ModelParams) -> EmbeddingMap:
    """Patch transformer over the frame; output grid is (H/patch, W/patch)."""
    cfg = params.config
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    h, w = px.shape
    if h % cfg.patch or w % cfg.patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {cfg.patch}")
    gr, gc = h // cfg.patch, w // cfg.patch
    p = params.tensors
    patches = Tensor(_patches(px.astype(np.float64), cfg.patch))
    x = patches @ p["enc.patch.w"] + p["enc.patch.b"]
    pos = Tensor(_grid_fourier(gr, gc, cfg.pe_freqs)) @ p["enc.pos.w"] + p["enc.pos.b"]
    x = x + pos
    for i in range(cfg.enc_blocks):
        x = x + _mha(_ln(x, p, f"enc{i}.ln1"), p, f"enc{i}.attn", cfg.heads)
        x = x + _mlp(_ln(x, p, f"enc{i}.ln2"), p, f"enc{i}.mlp")
    x = _ln(x, p, "enc.lnf")
    _check_finite(x, "image encoder")
    return EmbeddingMap(tokens=x, grid=(gr, gc), image=np.asarray(px, dtype=np.float64))


def prompt_encode(prompt: Prompt, grid: tuple[int, int], params: ModelParams) -> PromptTokens:
    """Point -> 1 positional token; box -> 2 corner tokens; mask -> dense
    per-token map plus 1 pooled summary token."""
    cfg = params.config
    p = params.tensors
    gr, gc = grid
    h, w = gr * cfg.patch, gc * cfg.patch

    def pos_token(row: float, col: float) -> np.ndarray:
        coords = np.array([[(row + 0.5) / h, (col + 0.5) / w]])
        return _fourier(coords, cfg.pe_freqs)

    if prompt.kind == PromptKind.POINT:
        if not (0 <= prompt.row < h and 0 <= prompt.col < w):
            raise ArgumentError(f"point ({prompt.row}, {prompt.col}) outside {h}x{w}")
        feats = Tensor(pos_token(prompt.row, prompt.col))
        tok = feats @ p["prompt.pos.w"] + p["prompt.pos.b"]
        type_idx = 0 if prompt.positive else 1
        return PromptTokens(sparse=tok + p["prompt.type"][type_idx:type_idx + 1])
    if prompt.kind == PromptKind.BOX:
        if not (0 <= prompt.r0 and prompt.r1 < h and 0 <= prompt.c0 and prompt.c1 < w):
            raise ArgumentError("box corners outside image bounds")
        feats = Tensor(np.concatenate([pos_token(prompt.r0, prompt.c0),
                                       pos_token(prompt.r1, prompt.c1)]))
        toks = feats @ p["prompt.pos.w"] + p["prompt.pos.b"]
        return PromptTokens(sparse=toks + p["prompt.type"][2:4])
    if prompt.mask.cells.shape != (h, w):
        raise ShapeError(f"mask prompt {prompt.mask.cells.shape} != image {h}x{w}")
    patches = Tensor(_patches(prompt.mask.cells.astype(np.float64), cfg.patch))
    hdn = ad.gelu(patches @ p["prompt.mask.w1"] + p["prompt.mask.b1"])
    dense = hdn @ p["prompt.mask.w2"] + p["prompt.mask.b2"]
    summary = ad.meant(dense, axis=0, keepdims=True) + p["prompt.type"][4:5]
    return PromptTokens(sparse=summary, dense=dense)


def memory_encode(embedding: EmbeddingMap, probs: np.ndarray,
                  params: ModelParams) -> MemoryFeature:
    """Fuse the frame embedding with its predicted probability map.

    Residual form: the embedding passes through unchanged and a small
    projection of (embedding, probs) is added on top. Memory features are
    consumed detached, so this keeps their content in the same trained
    space the conditioning projections already read, with the foreground
    marker as a fixed additive direction.
    """
    cfg = params.config
    probs = np.asarray(probs, dtype=np.float64)
    gr, gc = embedding.grid
    if probs.shape != (gr * cfg.patch, gc * cfg.patch):
        raise ShapeError(f"probs {probs.shape} does not match grid {embedding.grid}")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ArgumentError("probs must lie in [0, 1]")
    p = params.tensors
    with ad.no_grad():
        base = Tensor(embedding.tokens.data)
        e = base @ p["mem.emb.w"] + p["mem.emb.b"]
        q = Tensor(_patches(probs, cfg.patch)) @ p["mem.probs.w"] + p["mem.probs.b"]
        fused = base + ad.gelu(e + q) @ p["mem.out.w"] + p["mem.out.b"]
    _check_finite(fused, "memory encoder")
    return MemoryFeature(tokens=fused.data, grid=embedding.grid)


def _memory_bias(weights: np.ndarray, tokens_per_entry: int) -> np.ndarray:
    """Per-key additive logit bias log(w_i); zero weight masks the keys."""
    with np.errstate(divide="ignore"):
        logs = np.where(weights > 0.0, np.log(np.maximum(weights, 1e-300)), -np.inf)
    return np.repeat(logs, tokens_per_entry)


def condition(embedding: EmbeddingMap,
              entries: Sequence[tuple[MemoryFeature, ObjectPointer]],
              weights: Sequence[float],
              params: ModelParams) -> EmbeddingMap:
    """Memory attention: per block, self-attention over frame tokens then
    cross-attention into all memory tokens and object pointers, with
    per-key logit bias log(w_i) realizing the weighted pick-up."""
    cfg = params.config
    p = params.tensors
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(entries):
        raise ArgumentError(f"{len(weights)} weights for {len(entries)} entries")
    mem_kv = None
    bias = None
    if entries:
        if np.any(weights < 0.0):
            raise ArgumentError("memory weights must be non-negative")
        if abs(weights.sum() - 1.0) > 1e-6:
            raise ArgumentError("memory weights must sum to 1")
        blocks = []
        for feat, ptr in entries:
            blocks.append(feat.tokens)
            blocks.append(ptr.vector.reshape(1, -1))
        mem_kv = Tensor(np.concatenate(blocks, axis=0))
        bias = _memory_bias(weights, entries[0][0].tokens.shape[0] + 1)
    x = embedding.tokens
    for i in range(cfg.mem_blocks):
        x = x + _mha(_ln(x, p, f"ma{i}.ln1"), p, f"ma{i}.self", cfg.heads)
        if mem_kv is not None:
            x = x + _mha(_ln(x, p, f"ma{i}.ln2"), p, f"ma{i}.cross", cfg.heads,
                         kv=mem_kv, bias=bias)
        x = x + _mlp(_ln(x, p, f"ma{i}.ln3"), p, f"ma{i}.mlp")
    x = _ln(x, p, "ma.lnf")
    _check_finite(x, "memory attention")
    return EmbeddingMap(tokens=x, grid=embedding.grid, image=embedding.image)


def mask_decode(conditioned: EmbeddingMap, prompts: PromptTokens | None,
                params: ModelParams) -> DecoderOutput:
    """Two-way transformer over [object token | prompt tokens] and image
    tokens; logits are bilinearly upsampled token features refined by a
    per-pixel head that also sees the raw pixel intensity."""
    cfg = params.config
    p = params.tensors
    gr, gc = conditioned.grid
    h, w = gr * cfg.patch, gc * cfg.patch
    x = conditioned.tokens
    if prompts is not None and prompts.dense is not None:
        x = x + prompts.dense
    toks = p["dec.obj"]
    if prompts is not None:
        toks = ad.concat([toks, prompts.sparse], axis=0)
    for i in range(cfg.dec_blocks):
        toks = toks + _mha(_ln(toks, p, f"dec{i}.ln1"), p, f"dec{i}.self", cfg.heads)
        toks = toks + _mha(_ln(toks, p, f"dec{i}.ln2"), p, f"dec{i}.t2i", cfg.heads, kv=x)
        toks = toks + _mlp(_ln(toks, p, f"dec{i}.ln3"), p, f"dec{i}.mlp")
        x = x + _mha(_ln(x, p, f"dec{i}.ln4"), p, f"dec{i}.i2t", cfg.heads, kv=toks)
    toks = _ln(toks, p, "dec.lnt")
    x = _ln(x, p, "dec.lnx")

    pointer = ad.reshape(toks[0:1] @ p["dec.ptr.w"] + p["dec.ptr.b"], (cfg.embed_dim,))
    up = ad.interp2d(ad.reshape(x, (gr, gc, cfg.embed_dim)),
                     _interp_matrix(h, gr), _interp_matrix(w, gc))
    flat = ad.reshape(up, (h * w, cfg.embed_dim))
    flat = ad.concat([flat, Tensor(_pixel_features(conditioned.image, h, w))], axis=1)
    hidden = ad.gelu(flat @ p["dec.pix.w1"] + p["dec.pix.b1"])
    logits = ad.reshape(hidden @ p["dec.pix.w2"] + p["dec.pix.b2"], (h, w))

    pooled = ad.meant(x, axis=0, keepdims=True)
    cal_in = ad.concat([ad.reshape(pointer, (1, cfg.embed_dim)), pooled], axis=1)
    cal = ad.gelu(cal_in @ p["cal.w1"] + p["cal.b1"]) @ p["cal.w2"] + p["cal.b2"]
    confidence = ad.reshape(ad.sigmoid(cal), ())
    _check_finite(logits, "mask decoder")
    return DecoderOutput(logits=logits, object_pointer=pointer, confidence=confidence)


def forward_core(image: Image | np.ndarray, prompt: Prompt | None,
                 entries: Sequence[MemoryEntry], weights: Sequence[float],
                 params: ModelParams,
                 allow_unconditioned: bool = False,
                 embedding: EmbeddingMap | None = None):
    """encode -> condition -> decode -> memory-encode, graph included.

    Returns (DecoderOutput, embedding_summary, MemoryFeature). Used by both
    inference (under no_grad) and training (graph mode). Pass ``embedding``
    to reuse an encoder output (e.g. one already pooled for pick-up weights).
    """
    if prompt is None and not entries and not allow_unconditioned:
        raise UsageError("a frame without a prompt needs a non-empty memory")
    emb = image_encode(image, params) if embedding is None else embedding
    summary = emb.tokens.data.mean(axis=0)
    cond = condition(emb, [(e.feature, e.pointer) for e in entries], weights, params)
    ptoks = prompt_encode(prompt, emb.grid, params) if prompt is not None else None
    dec = mask_decode(cond, ptoks, params)
    with ad.no_grad():
        probs = ad.sigmoid(Tensor(dec.logits.data)).data
    feature = memory_encode(emb, probs, params)
    return dec, summary, feature


def forward_frame(image: Image | np.ndarray, prompt: Prompt | None,
                  entries: Sequence[MemoryEntry], weights: Sequence[float],
                  params: ModelParams, frame_index: int = 0,
                  allow_unconditioned: bool = False,
                  embedding: EmbeddingMap | None = None) -> tuple[MaskPrediction, MemoryEntry]:
    """Pure inference pass for one frame; the returned entry carries the
    calibrated confidence and is flagged as a template iff prompted."""
    with ad.no_grad():
        dec, summary, feature = forward_core(image, prompt, entries, weights, params,
                                             allow_unconditioned=allow_unconditioned,
                                             embedding=embedding)
        probs = ad.sigmoid(dec.logits).data
    pred = MaskPrediction(probs=probs, mask=(probs >= 0.5).astype(np.uint8),
                          confidence=float(dec.confidence.data))
    entry = MemoryEntry(frame_index=frame_index, embedding_summary=summary,
                        feature=feature, pointer=ObjectPointer(dec.object_pointer.data.copy()),
                        confidence=float(dec.confidence.data),
                        is_template=prompt is not None)
    return pred, entry


def grad(params: ModelParams, loss_fn) -> dict[str, np.ndarray]:
    """Gradients of ``loss_fn(params) -> Tensor`` w.r.t. every weight.

    Weights that do not participate in the loss get zero gradients.
    """
    for t in params.tensors.values():
        t.grad = None
    loss = loss_fn(params)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    loss.backward()
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.tensors.items()}
