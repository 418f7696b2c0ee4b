"""Window partitioning, cyclic shifts, relative position bias and attention kernels.

Token grids are carried as batched spatial tensors of shape ``[B, H, W, C]``
inside :class:`TokenGrid`. Window tensors have shape ``[B * nW, M * M, C]``
with windows in row-major order within each sample.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import functional as F
from .core.nn import LayerNorm, Linear, MLP, Module, Parameter, TRUNC_NORMAL
from .core.tensor import ShapeError, Tensor
from .core.gradcheck import ContractError

BRANCHES = ("cli->der", "der->cli", "meta")


class WindowError(ShapeError):
    """Raised when a grid cannot be tiled by the requested window."""


@dataclass
class TokenGrid:
    """Batched token grid; ``tokens`` has shape ``[B, height, width, C]``."""

    tokens: Tensor

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ShapeError(f"TokenGrid expects [B, H, W, C] tokens, got {self.tokens.shape}")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def height(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]

    def flat(self) -> Tensor:
        """Tokens as ``[B, H*W, C]`` in row-major order."""
        return self.tokens.reshape(self.batch, self.height * self.width, self.channels)

    @classmethod
    def from_flat(cls, tokens: Tensor, height: int, width: int) -> "TokenGrid":
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape)
        b, n, c = tokens.shape
        if n != height * width:
            raise ShapeError(f"{n} tokens cannot form a {height}x{width} grid")
        return cls(tokens.reshape(b, height, width, c))


@dataclass
class AttentionRecord:
    """Attention weights of one kernel call for the first sample of a batch.

    ``weights`` has shape ``[windows, heads, queries, keys]``; ``dense()``
    expands it to the block-diagonal ``[heads, windows*queries, windows*keys]``.
    """

    stage: int
    block: int
    branch: str
    weights: np.ndarray

    def dense(self) -> np.ndarray:
        nw, h, nq, nk = self.weights.shape
        out = np.zeros((h, nw * nq, nw * nk), dtype=self.weights.dtype)
        for w in range(nw):
            out[:, w * nq:(w + 1) * nq, w * nk:(w + 1) * nk] = self.weights[w]
        return out


@dataclass
class _RecordState:
    records: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)
    active: bool = False


_recorder = _RecordState()


@contextlib.contextmanager
def recording() -> Iterator[list[AttentionRecord]]:
    """Capture an :class:`AttentionRecord` for every tagged kernel call inside."""
    prev = (_recorder.records, _recorder.active)
    _recorder.records, _recorder.active = [], True
    try:
        yield _recorder.records
    finally:
        _recorder.records, _recorder.active = prev


@contextlib.contextmanager
def record_scope(**tags) -> Iterator[None]:
    prev = dict(_recorder.tags)
    _recorder.tags.update(tags)
    try:
        yield
    finally:
        _recorder.tags = prev


def _maybe_record(attn: np.ndarray) -> None:
    if not _recorder.active or "branch" not in _recorder.tags:
        return
    t = _recorder.tags
    groups_per_sample = int(t.get("windows", 1))
    _recorder.records.append(AttentionRecord(
        stage=int(t.get("stage", 0)), block=int(t.get("block", 0)), branch=t["branch"],
        weights=np.array(attn[:groups_per_sample]),
    ))


# -- windows ----------------------------------------------------------------

def effective_window(height: int, width: int, window: int) -> tuple[int, bool]:
    """Window size actually used on a grid, and whether shifting stays enabled.

    Grids no larger than the window are covered by a single window without
    shifting.
    """
    if min(height, width) <= window:
        return min(height, width), False
    return window, True


def _partition(x: Tensor, m: int) -> Tensor:
    b, h, w, c = x.shape
    if h % m or w % m:
        raise WindowError(f"grid {h}x{w} is not divisible by window size {m}")
    x = x.reshape(b, h // m, m, w // m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // m) * (w // m), m * m, c)


def _reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = windows.reshape(b, h // m, w // m, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def window_partition(grid: TokenGrid, m: int) -> Tensor:
    """Split a grid into non-overlapping ``m x m`` windows: ``[B*nW, m*m, C]``."""
    return _partition(grid.tokens, m)


def window_reverse(windows: Tensor, m: int, height: int, width: int) -> TokenGrid:
    """Inverse of :func:`window_partition`."""
    if height % m or width % m:
        raise WindowError(f"grid {height}x{width} is not divisible by window size {m}")
    return TokenGrid(_reverse(windows, m, height, width))


def shift_mask(height: int, width: int, m: int, offset: tuple[int, int]) -> np.ndarray:
    """Boolean ``[nW, m*m, m*m]`` mask of pairs to exclude after a cyclic shift.

    A pair is masked when, before the roll, its two tokens belonged to
    different windows of the partition offset by ``offset`` from the origin,
    i.e. they are only adjacent through the wrap-around.
    """
    dy, dx = offset
    if height % m or width % m:
        raise WindowError(f"grid {height}x{width} is not divisible by window size {m}")
    rows = np.floor_divide((np.arange(height) + dy) % height - dy, m)
    cols = np.floor_divide((np.arange(width) + dx) % width - dx, m)
    label = (rows[:, None] - rows.min()) * (cols.max() - cols.min() + 1) + (cols[None, :] - cols.min())
    win = label.reshape(height // m, m, width // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    return win[:, :, None] != win[:, None, :]


def cyclic_shift(grid: TokenGrid, offset: tuple[int, int], window: int) -> tuple[TokenGrid, np.ndarray]:
    """Roll the grid by ``-offset`` and return it with its cross-window mask."""
    dy, dx = offset
    if abs(dy) >= window or abs(dx) >= window:
        raise WindowError(f"shift {offset} must be smaller than the window {window}")
    mask = shift_mask(grid.height, grid.width, window, offset)
    if dy == 0 and dx == 0:
        return grid, mask
    return TokenGrid(F.roll(grid.tokens, (-dy, -dx), (1, 2))), mask


def cyclic_unshift(grid: TokenGrid, offset: tuple[int, int]) -> TokenGrid:
    dy, dx = offset
    if dy == 0 and dx == 0:
        return grid
    return TokenGrid(F.roll(grid.tokens, (dy, dx), (1, 2)))


def relative_position_index(m: int) -> np.ndarray:
    """``[m*m, m*m]`` table index of the 2-D displacement between window tokens."""
    if m < 1:
        raise ValueError(f"window size must be positive, got {m}")
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


# -- parameters -------------------------------------------------------------

class AttentionParams(Module):
    """Projections ``W^Q, W^K, W^V, W^out`` (with biases) and bias tables.

    ``bias_tables`` is 0 (vector-token attention), 1 (self-attention, key set
    is one window) or 2 (cross-attention, keys are two windows stacked).
    """

    def __init__(self, dim: int, heads: int, window: int | None = None, bias_tables: int = 0):
        if dim % heads:
            raise ContractError(f"channels {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)
        self.window = window
        if bias_tables:
            if window is None:
                raise ContractError("bias tables need a window size")
            size = (2 * window - 1) ** 2
            self.bias_self = Parameter((size, heads), TRUNC_NORMAL)
            if bias_tables == 2:
                self.bias_other = Parameter((size, heads), TRUNC_NORMAL)
            self._index = relative_position_index(window)

    def position_bias(self) -> Tensor | None:
        """``[heads, M², M²]`` for self-attention or ``[heads, M², 2M²]`` for cross."""
        if not hasattr(self, "bias_self"):
            return None
        tables = [self.bias_self] + ([self.bias_other] if hasattr(self, "bias_other") else [])
        parts = [F.take(t, self._index).transpose(2, 0, 1) for t in tables]
        return parts[0] if len(parts) == 1 else F.concat(parts, axis=2)


def _attend(q_in: Tensor, k_in: Tensor, v_in: Tensor, params: AttentionParams,
            bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
    g, nq, c = q_in.shape
    nk = k_in.shape[1]
    if k_in.shape[1] != v_in.shape[1]:
        raise ContractError(f"key rows {k_in.shape[1]} != value rows {v_in.shape[1]}")
    if c != params.dim or k_in.shape[-1] != params.dim or v_in.shape[-1] != params.dim:
        raise ContractError(f"token width {c} does not match attention dim {params.dim}")
    h = params.heads
    d = c // h
    q = params.q(q_in).reshape(g, nq, h, d).transpose(0, 2, 1, 3)
    k = params.k(k_in).reshape(g, nk, h, d).transpose(0, 2, 3, 1)
    v = params.v(v_in).reshape(g, nk, h, d).transpose(0, 2, 1, 3)
    logits = F.matmul(q, k) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if mask is not None and mask.any():
        nw = mask.shape[0]
        neg = np.where(mask, -np.inf, 0.0).astype(logits.dtype)
        neg = np.broadcast_to(neg[:, None], (nw, h, nq, nk))
        logits = (logits.reshape(g // nw, nw, h, nq, nk) + neg).reshape(g, h, nq, nk)
    attn = F.softmax(logits, axis=-1)
    _maybe_record(attn.data)
    out = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(g, nq, c)
    return params.proj(out)


def wsa(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, mask: np.ndarray | None = None) -> Tensor:
    """Window self-attention ``softmax(QKᵀ/√d + B)V`` per window and head.

    ``q``, ``k``, ``v`` are token sets of shape ``[windows, rows, C]`` before
    projection; the output is projected by ``W^out``.
    """
    return _attend(q, k, v, params, params.position_bias(), mask)


class CrossAttentionParams(AttentionParams):
    """WMCA parameters: attention params plus a layer norm per modality."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__(dim, heads, window, bias_tables=2)
        self.norm_own = LayerNorm(dim)
        self.norm_other = LayerNorm(dim)


def wmca(own: Tensor, other: Tensor, params: CrossAttentionParams, mask: np.ndarray | None = None) -> Tensor:
    """Window multi-head cross-attention from ``other`` into ``own``.

    ``own`` and ``other`` are spatially corresponding windows ``[G, M², C]``.
    Queries come from the normalised ``own`` tokens; keys and values from the
    row-stack ``[LN(own); LN(other)]`` of ``2M²`` tokens.
    """
    if own.shape != other.shape:
        raise ContractError(f"modality windows differ: {own.shape} vs {other.shape}")
    a = params.norm_own(own)
    kv = F.concat([a, params.norm_other(other)], axis=1)
    if mask is not None:
        mask = np.concatenate([mask, mask], axis=2)
    return _attend(a, kv, kv, params, params.position_bias(), mask)


def mca(query_vec: Tensor, kv_seq: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head cross-attention of vector tokens, no positional bias.

    ``query_vec`` is ``[B, 1, D]`` (or ``[1, D]``), ``kv_seq`` is ``[B, n, D]``.
    """
    squeeze = query_vec.ndim == 2
    if squeeze:
        query_vec = query_vec.reshape(1, *query_vec.shape)
        kv_seq = kv_seq.reshape(1, *kv_seq.shape)
    if query_vec.shape[-1] != kv_seq.shape[-1]:
        raise ContractError(f"query width {query_vec.shape[-1]} != key width {kv_seq.shape[-1]}")
    if kv_seq.shape[1] < 1:
        raise ContractError("mca needs at least one key")
    out = _attend(query_vec, kv_seq, kv_seq, params, None, None)
    return out.reshape(out.shape[1:]) if squeeze else out


# -- blocks -----------------------------------------------------------------

class SwinBlock(Module):
    """Pre-norm window attention block with optional cyclic shift.

    The effective window is clamped to the grid (see :func:`effective_window`).
    """

    def __init__(self, dim: int, heads: int, resolution: tuple[int, int], window: int,
                 shifted: bool = False, mlp_ratio: float = 4.0):
        self.resolution = tuple(resolution)
        self.window, can_shift = effective_window(*self.resolution, window)
        self.shift = self.window // 2 if (shifted and can_shift) else 0
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, self.window, bias_tables=1)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)
        self._mask = shift_mask(*self.resolution, self.window, (self.shift, self.shift)) if self.shift else None

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x = grid.tokens
        if (grid.height, grid.width) != self.resolution:
            raise WindowError(f"block built for {self.resolution}, got grid {grid.height}x{grid.width}")
        m, s = self.window, self.shift
        y = TokenGrid(self.norm1(x))
        if s:
            y, _ = cyclic_shift(y, (s, s), m)
        win = window_partition(y, m)
        with record_scope(windows=(grid.height // m) * (grid.width // m)):
            win = wsa(win, win, win, self.attn, self._mask)
        y = window_reverse(win, m, grid.height, grid.width)
        if s:
            y = cyclic_unshift(y, (s, s))
        x = x + y.tokens
        x = x + self.mlp(self.norm2(x))
        return TokenGrid(x)


def wmsa_block(grid: TokenGrid, block: SwinBlock) -> TokenGrid:
    """Functional entry point for a (shifted) window self-attention block."""
    return block(grid)


def wmsa_flops(h_tokens: int, w_tokens: int, channels: int, window: int) -> int:
    """Multiply count of window self-attention: ``4hwC² + 2M²hwC``."""
    for name, v in (("h", h_tokens), ("w", w_tokens), ("C", channels), ("M", window)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    hw = h_tokens * w_tokens
    return 4 * hw * channels * channels + 2 * window * window * hw * channels
