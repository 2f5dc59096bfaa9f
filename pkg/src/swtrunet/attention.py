"""Token projection and (shifted-)window multi-head self-attention.

Tokens live on a 2D grid. Attention is computed inside non-overlapping
``w x w`` windows; every second sub-block rolls the grid by ``s`` first so that
windows straddle the previous window borders, with an additive mask keeping
tokens from different pre-roll regions apart. Grids that are not a multiple of
``w`` are zero-padded; padded tokens are masked out as keys and cropped again
after attention.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor

MASK_VALUE = -1e9


@dataclass
class TokenGrid:
    tokens: Tensor  # [b, H*W, d]
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim != 3 or self.tokens.shape[1] != h * w:
            raise DimensionError(f"token tensor {self.tokens.shape} does not match grid {self.grid}")

    @property
    def d_model(self) -> int:
        return self.tokens.shape[2]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]


class AttentionCounter:
    """Counts attention score entries computed per head (windows x tokens^2)."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


score_counter = AttentionCounter()


class PatchProjection(Module):
    """Maps each cell of a ``[b, c, H, W]`` feature map to a ``d_model`` token."""

    def __init__(self, c_in: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(c_in, d_model, rng, dtype)

    def forward(self, feat: Tensor) -> TokenGrid:
        return linear_projection(feat, self.proj)


def linear_projection(feat: Tensor, proj: Linear) -> TokenGrid:
    b, c, h, w = feat.shape
    tokens = feat.transpose(0, 2, 3, 1).reshape(b, h * w, c)
    return TokenGrid(proj(tokens), (h, w))


def grid_to_map(g: TokenGrid) -> Tensor:
    """Inverse layout of ``linear_projection``: tokens back to ``[b, d, H, W]``."""
    h, w = g.grid
    return g.tokens.reshape(g.batch, h, w, g.d_model).transpose(0, 3, 1, 2)


def _padded(n: int, w: int) -> int:
    return -(-n // w) * w


def _check_window(w: int) -> None:
    if w <= 0:
        raise ConfigError(f"window size must be positive, got {w}")


def _partition4(x: Tensor, w: int) -> Tensor:
    b, hp, wp, d = x.shape
    x = x.reshape(b, hp // w, w, wp // w, w, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (hp // w) * (wp // w), w * w, d)


def _reverse4(windows: Tensor, w: int, b: int, hp: int, wp: int) -> Tensor:
    d = windows.shape[-1]
    x = windows.reshape(b, hp // w, wp // w, w, w, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp, wp, d)


def window_partition(g: TokenGrid, w: int) -> tuple[Tensor, tuple[int, int]]:
    """Split a grid into ``[b * num_windows, w*w, d]``; returns windows and padded extents."""
    _check_window(w)
    h, wd = g.grid
    hp, wp = _padded(h, w), _padded(wd, w)
    x = g.tokens.reshape(g.batch, h, wd, g.d_model)
    x = T.pad(x, [(0, 0), (0, hp - h), (0, wp - wd), (0, 0)])
    return _partition4(x, w), (hp, wp)


def window_reverse(windows: Tensor, w: int, padded: tuple[int, int], grid: tuple[int, int],
                   batch: int) -> TokenGrid:
    _check_window(w)
    hp, wp = padded
    h, wd = grid
    x = _reverse4(windows, w, batch, hp, wp)
    if (hp, wp) != (h, wd):
        x = x[:, :h, :wd, :]
    return TokenGrid(x.reshape(batch, h * wd, windows.shape[-1]), grid)


def cyclic_shift(g: TokenGrid, s: int) -> TokenGrid:
    """Roll the token grid by ``(-s, -s)`` on the torus."""
    if not s:
        return g
    h, w = g.grid
    x = g.tokens.reshape(g.batch, h, w, g.d_model)
    x = T.roll(x, (-s, -s), (1, 2))
    return TokenGrid(x.reshape(g.batch, h * w, g.d_model), g.grid)


def cyclic_unshift(g: TokenGrid, s: int) -> TokenGrid:
    return cyclic_shift(g, -s)


@functools.lru_cache(maxsize=64)
def attention_mask(h: int, w_grid: int, w: int, s: int) -> np.ndarray | None:
    """Additive mask ``[num_windows, w*w, w*w]`` for a (rolled) padded grid.

    Entries are 0 or ``MASK_VALUE``. A key is masked when it came from a different
    pre-roll region than the query, or when it is padding (for real queries).
    Returns None when nothing needs masking.
    """
    hp, wp = _padded(h, w), _padded(w_grid, w)
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w_grid] = True
    region = np.zeros((hp, wp), dtype=np.int64)
    if s:
        label = 0
        bands = (slice(0, -w), slice(-w, -s), slice(-s, None))
        for rs in bands:
            for cs in bands:
                region[rs, cs] = label
                label += 1
        valid = np.roll(valid, (-s, -s), (0, 1))

    def part(a):
        return a.reshape(hp // w, w, wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)

    rw, vw = part(region), part(valid)
    blocked = (rw[:, :, None] != rw[:, None, :]) | (vw[:, :, None] & ~vw[:, None, :])
    if not blocked.any():
        return None
    mask = np.where(blocked, MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


@functools.lru_cache(maxsize=16)
def relative_position_index(w: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.setflags(write=False)
    return idx


class WindowAttention(Module):
    """Multi-head self-attention inside each window with optional relative position bias."""

    def __init__(self, d_model: int, heads: int, window: int, rng: np.random.Generator,
                 rel_pos_bias: bool = True, dtype=np.float32):
        if d_model % heads:
            raise ConfigError(f"d_model {d_model} is not divisible by heads {heads}")
        _check_window(window)
        self.heads = heads
        self.window = window
        self.qkv = Linear(d_model, 3 * d_model, rng, dtype)
        self.proj = Linear(d_model, d_model, rng, dtype)
        self.bias_table = None
        if rel_pos_bias:
            self.bias_table = Tensor(rng.normal(0.0, 0.02, ((2 * window - 1) ** 2, heads)).astype(dtype),
                                     requires_grad=True)

    def position_bias(self) -> Tensor | None:
        if self.bias_table is None:
            return None
        idx = relative_position_index(self.window)
        return T.take(self.bias_table, idx).transpose(2, 0, 1)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None, batch: int = 1) -> Tensor:
        return window_msa(windows, self.heads, self.qkv, self.proj, self.position_bias(), mask, batch)


def window_msa(windows: Tensor, heads: int, qkv: Linear, proj: Linear, bias: Tensor | None = None,
               mask: np.ndarray | None = None, batch: int = 1, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_head) + bias + mask) V per window and head, then output projection."""
    nw_total, n, d = windows.shape
    if d % heads:
        raise ConfigError(f"d_model {d} is not divisible by heads {heads}")
    dh = d // heads
    q, k, v = _split_qkv(qkv(windows), nw_total, n, heads, dh)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    score_counter.count += nw_total * n * n
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        nw = mask.shape[0]
        full = np.broadcast_to(mask[:, None].astype(scores.dtype), (nw, heads, n, n))
        scores = (scores.reshape(batch, nw, heads, n, n) + Tensor(full)).reshape(nw_total, heads, n, n)
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(nw_total, n, d)
    out = proj(out)
    return (out, weights) if return_weights else out


def _split_qkv(x: Tensor, nw: int, n: int, heads: int, dh: int):
    x = x.reshape(nw, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    return x[0], x[1], x[2]


class Mlp(Module):
    def __init__(self, d_model: int, ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_model, ratio * d_model, rng, dtype)
        self.fc2 = Linear(ratio * d_model, d_model, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    """One sub-block: x + (S)W-MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d_model: int, heads: int, window: int, shift: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, rel_pos_bias: bool = True, use_mask: bool = True,
                 dtype=np.float32):
        if not 0 <= shift < window:
            raise ConfigError(f"shift {shift} must lie in [0, {window})")
        self.window = window
        self.shift = shift
        self.use_mask = use_mask
        self.norm1 = LayerNorm(d_model, dtype)
        self.attn = WindowAttention(d_model, heads, window, rng, rel_pos_bias, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.mlp = Mlp(d_model, mlp_ratio, rng, dtype)

    def forward(self, g: TokenGrid) -> TokenGrid:
        b, (h, wd), d = g.batch, g.grid, g.d_model
        w, s = self.window, self.shift
        hp, wp = _padded(h, w), _padded(wd, w)
        x = self.norm1(g.tokens).reshape(b, h, wd, d)
        x = T.pad(x, [(0, 0), (0, hp - h), (0, wp - wd), (0, 0)])
        x = T.roll(x, (-s, -s), (1, 2))
        mask = attention_mask(h, wd, w, s) if self.use_mask else None
        win = self.attn(_partition4(x, w), mask, b)
        x = T.roll(_reverse4(win, w, b, hp, wp), (s, s), (1, 2))
        if (hp, wp) != (h, wd):
            x = x[:, :h, :wd, :]
        tokens = g.tokens + x.reshape(b, h * wd, d)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return TokenGrid(tokens, g.grid)


class SwinBlockPair(Module):
    """W-MSA sub-block followed by an SW-MSA sub-block shifted by ``shift``."""

    def __init__(self, d_model: int, heads: int, window: int, rng: np.random.Generator,
                 shift: int | None = None, mlp_ratio: int = 4, rel_pos_bias: bool = True,
                 use_mask: bool = True, dtype=np.float32):
        shift = window // 2 if shift is None else shift
        self.regular = SwinBlock(d_model, heads, window, 0, rng, mlp_ratio, rel_pos_bias, use_mask, dtype)
        self.shifted = SwinBlock(d_model, heads, window, shift, rng, mlp_ratio, rel_pos_bias, use_mask, dtype)

    def forward(self, g: TokenGrid) -> TokenGrid:
        return self.shifted(self.regular(g))


def swin_block_pair(g: TokenGrid, pair: SwinBlockPair) -> TokenGrid:
    return pair(g)
