"""Multi-head self-attention, neighborhood (distortion-aware) attention and
efficient self-attention with spatial sequence reduction.

Feature maps are channels-last ``(B, H, W, C)``.  The neighborhood variant
gives every pixel a fixed ``window_h x window_w`` set of keys: near a
non-wrapped border the window slides inward instead of shrinking, so the key
count and the positional-encoding slots stay the same everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numkit import ops
from .numkit.nn import LayerNorm, Linear, Module, parameter
from .numkit.rng import Rng
from .numkit.tensor import Tensor

PE_MODES = ("rpe", "ape", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DaConfig:
    window_h: int = 11
    window_w: int = 11
    heads: int = 1
    d_head: int = 32
    pe_mode: str = "rpe"
    wrap_horizontal: bool = False

    def __post_init__(self):
        for name in ("window_h", "window_w"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and >= 1, got {k}")
        if self.heads < 1 or self.d_head < 1:
            raise ConfigError("heads and d_head must be positive")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")

    @property
    def channels(self) -> int:
        return self.heads * self.d_head

    @property
    def slots(self) -> int:
        return self.window_h * self.window_w


# -- neighborhoods ---------------------------------------------------------

def _axis_window(i: int, length: int, k: int, wrap: bool) -> np.ndarray:
    keff = min(k, length)
    if wrap:
        return (i - keff // 2 + np.arange(keff)) % length
    start = min(max(i - k // 2, 0), length - keff)
    return start + np.arange(keff)


def neighborhood_indices(i: int, j: int, H: int, W: int, cfg: DaConfig) -> list[tuple[int, int]]:
    """Positions attended by pixel ``(i, j)``, row-major within the window."""
    if not (0 <= i < H and 0 <= j < W):
        raise IndexError(f"pixel ({i}, {j}) outside {H}x{W}")
    rows = _axis_window(i, H, cfg.window_h, False)
    cols = _axis_window(j, W, cfg.window_w, cfg.wrap_horizontal)
    return [(int(r), int(c)) for r in rows for c in cols]


@lru_cache(maxsize=64)
def neighborhood_table(H: int, W: int, window_h: int, window_w: int, wrap: bool):
    """Flat key indices ``(H*W, s)`` and positional slots ``(s,)`` for every pixel.

    ``s = min(window_h, H) * min(window_w, W)``; slot ``r * window_w + c`` is
    the position of a key inside its (shifted) window.
    """
    kh, kw = min(window_h, H), min(window_w, W)
    rows = np.stack([_axis_window(i, H, window_h, False) for i in range(H)])     # (H, kh)
    cols = np.stack([_axis_window(j, W, window_w, wrap) for j in range(W)])      # (W, kw)
    idx = rows[:, None, :, None] * W + cols[None, :, None, :]                    # (H, W, kh, kw)
    idx = idx.reshape(H * W, kh * kw)
    slots = (np.arange(kh)[:, None] * window_w + np.arange(kw)[None, :]).reshape(-1)
    idx.setflags(write=False)
    slots.setflags(write=False)
    return idx, slots


# -- positional encodings --------------------------------------------------

def rpe_init(cfg: DaConfig, rng: Rng, dtype=np.float32) -> Tensor:
    """Trainable relative encoding, one ``(slots, d_head)`` table per head, U(-0.02, 0.02)."""
    values = rng.uniform((cfg.heads, cfg.slots, cfg.d_head), -0.02, 0.02, dtype)
    return parameter(values)


@lru_cache(maxsize=32)
def sinusoidal_2d(H: int, W: int, C: int) -> np.ndarray:
    """Fixed absolute encoding: first half of the channels encodes the row, the rest the column."""
    def encode(n, dim):
        pos = np.arange(n, dtype=np.float64)[:, None]
        i = np.arange(dim)[None, :]
        freq = 1.0 / (10000.0 ** ((i // 2) * 2.0 / max(dim, 1)))
        ang = pos * freq
        return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))

    cr = C // 2
    out = np.zeros((H, W, C))
    out[:, :, :cr] = encode(H, cr)[:, None, :]
    out[:, :, cr:] = encode(W, C - cr)[None, :, :]
    out.setflags(write=False)
    return out


# -- projections -----------------------------------------------------------

class QKVO(Module):
    """Query/key/value/output projections shared by all attention flavours."""

    def __init__(self, dim: int, rng: Rng, dtype=np.float32):
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """``(B, N, C)`` -> ``(B, heads, N, d)``."""
    b, n, c = t.shape
    return ops.transpose(ops.reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, d = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (b, n, h * d))


def _full_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over ``(B, N, C)`` sequences."""
    d = q.shape[-1] // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = ops.scale(ops.matmul(qh, ops.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(d))
    return _merge_heads(ops.matmul(ops.softmax(logits, -1), vh))


def _check_heads(c: int, heads: int) -> None:
    if heads < 1 or c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")


def mhsa_reference(x: Tensor, heads: int, p: QKVO) -> Tensor:
    """Global multi-head self-attention over a ``(N, C)`` or ``(B, N, C)`` sequence."""
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    _check_heads(x.shape[-1], heads)
    out = p.o(_full_attention(p.q(x), p.k(x), p.v(x), heads))
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def da_forward(x: Tensor, cfg: DaConfig, p: QKVO, rpe: Tensor | None = None) -> Tensor:
    """Neighborhood attention over a ``(B, H, W, C)`` map.

    Each pixel's query attends to the keys of its window; the relative
    encoding of each window slot is added to the gathered values before the
    weighted sum.  Cost is ``O(H W s C)`` with ``s`` keys per pixel.
    """
    b, H, W, C = x.shape
    if C != cfg.channels:
        raise ConfigError(f"input has {C} channels, config expects {cfg.channels}")
    heads, d = cfg.heads, cfg.d_head
    n = H * W
    if cfg.pe_mode == "ape":
        x = ops.add(x, Tensor(sinusoidal_2d(H, W, C).astype(x.dtype)))
    idx, slots = neighborhood_table(H, W, cfg.window_h, cfg.window_w, cfg.wrap_horizontal)

    q = ops.reshape(p.q(x), (b, n, heads, 1, d))
    k = ops.reshape(p.k(x), (b, n, heads, d))
    v = ops.reshape(p.v(x), (b, n, heads, d))
    kg = ops.transpose(ops.take(k, idx, axis=1), (0, 1, 3, 4, 2))      # (b, n, heads, d, s)
    vg = ops.transpose(ops.take(v, idx, axis=1), (0, 1, 3, 2, 4))      # (b, n, heads, s, d)
    if cfg.pe_mode == "rpe":
        if rpe is None:
            raise ConfigError("pe_mode 'rpe' needs an encoding table")
        if rpe.shape != (heads, cfg.slots, d):
            raise ConfigError(f"encoding table shape {rpe.shape} != {(heads, cfg.slots, d)}")
        vg = ops.add(vg, ops.take(rpe, slots, axis=1))                  # (heads, s, d) broadcast
    logits = ops.scale(ops.matmul(q, kg), 1.0 / math.sqrt(d))          # (b, n, heads, 1, s)
    out = ops.matmul(ops.softmax(logits, -1), vg)                       # (b, n, heads, 1, d)
    out = ops.reshape(out, (b, H, W, C))
    return p.o(out)


class Reduction(Module):
    """Spatial sequence reduction: flatten each ``r x r`` patch, project to ``C``, normalise.

    Equivalent to a stride-``r`` convolution with an ``r x r`` kernel; the map
    is zero-padded bottom/right to a multiple of ``r`` first.
    """

    def __init__(self, dim: int, r: int, rng: Rng, dtype=np.float32):
        self.r = r
        self.linear = Linear(r * r * dim, dim, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        r = self.r
        h, w = x.shape[1:3]
        x = ops.pad_hw(x, (-h) % r, (-w) % r)
        return self.norm(self.linear(ops.unfold(x, r, r, 0)))


def esa_forward(x: Tensor, heads: int, r: int, p: QKVO, reduce: Reduction | None = None) -> Tensor:
    """Full attention whose keys/values come from the ``r``-reduced map."""
    b, H, W, C = x.shape
    _check_heads(C, heads)
    q = ops.reshape(p.q(x), (b, H * W, C))
    src = x if r == 1 else reduce(x)
    src = ops.reshape(src, (b, src.shape[1] * src.shape[2], C))
    out = _full_attention(q, p.k(src), p.v(src), heads)
    return ops.reshape(p.o(out), (b, H, W, C))


class DistortionAwareAttention(Module):
    def __init__(self, cfg: DaConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.proj = QKVO(cfg.channels, rng, dtype)
        self.rpe = rpe_init(cfg, rng, dtype) if cfg.pe_mode == "rpe" else None

    def forward(self, x: Tensor) -> Tensor:
        return da_forward(x, self.cfg, self.proj, self.rpe)


class EfficientSelfAttention(Module):
    def __init__(self, dim: int, heads: int, r: int, rng: Rng, dtype=np.float32):
        _check_heads(dim, heads)
        self.heads = heads
        self.r = r
        self.proj = QKVO(dim, rng, dtype)
        self.reduce = Reduction(dim, r, rng, dtype) if r > 1 else None

    def forward(self, x: Tensor) -> Tensor:
        return esa_forward(x, self.heads, self.r, self.proj, self.reduce)
