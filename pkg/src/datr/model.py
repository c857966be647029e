"""DATR: hierarchical encoder with ESA / DA blocks and an all-MLP decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    ConfigError,
    DaConfig,
    DistortionAwareAttention,
    EfficientSelfAttention,
)
from .numkit import ops
from .numkit.nn import LayerNorm, Linear, Module, param_count
from .numkit.rng import Rng
from .numkit.tensor import DimensionError, Tensor, no_grad

ATTN_KINDS = ("esa", "da")
STRUCTURE_CHARS = {"o": "esa", "s": "da"}
TABLE5_STRUCTURES = ("oooo", "sooo", "osoo", "ooso", "ooos", "soso", "osos")

_PRESETS = {
    "M": dict(channels=(32, 64, 160, 256), depths=(2, 2, 2, 2), decoder_dim=512),
    "T": dict(channels=(64, 128, 320, 512), depths=(2, 2, 2, 2), decoder_dim=256),
    "S": dict(channels=(64, 128, 320, 512), depths=(3, 4, 6, 3), decoder_dim=768),
}
_HEADS = (1, 2, 5, 8)
_REDUCTIONS = (8, 4, 2, 1)
_PATCH = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))


@dataclass(frozen=True)
class StageConfig:
    patch_k: int
    patch_s: int
    patch_p: int
    depth: int
    channels: int
    heads: int
    attn_kind: str = "esa"
    esa_reduction: int = 1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.attn_kind not in ATTN_KINDS:
            raise ConfigError(f"attn_kind must be one of {ATTN_KINDS}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    stages: tuple
    decoder_dim: int
    num_classes: int
    da: DaConfig = field(default_factory=DaConfig)

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError("DATR has exactly four stages")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def structure_mask(self) -> tuple:
        return tuple(s.attn_kind for s in self.stages)

    @property
    def structure(self) -> str:
        inv = {v: k for k, v in STRUCTURE_CHARS.items()}
        return "".join(inv[k] for k in self.structure_mask)

    def stage_da(self, i: int) -> DaConfig:
        st = self.stages[i]
        return dataclasses.replace(self.da, heads=st.heads, d_head=st.channels // st.heads)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        stages = tuple(StageConfig(**s) for s in d["stages"])
        return cls(d["variant"], stages, d["decoder_dim"], d["num_classes"], DaConfig(**d["da"]))


def parse_structure(structure: str) -> tuple:
    """``'ooos'`` -> ``('esa', 'esa', 'esa', 'da')``; ``s`` marks a DA stage."""
    if len(structure) != 4 or any(c not in STRUCTURE_CHARS for c in structure):
        raise ConfigError(f"structure must be 4 chars of 'o'/'s', got {structure!r}")
    return tuple(STRUCTURE_CHARS[c] for c in structure)


def variant_config(variant: str = "M", num_classes: int = 5, window: int = 11,
                   pe_mode: str = "rpe", wrap_horizontal: bool = False,
                   structure: str = "ooos", mlp_ratio: int = 4) -> ModelConfig:
    if variant not in _PRESETS:
        raise ConfigError(f"variant must be one of {sorted(_PRESETS)}, got {variant!r}")
    preset = _PRESETS[variant]
    kinds = parse_structure(structure)
    stages = tuple(
        StageConfig(*_PATCH[i], depth=preset["depths"][i], channels=preset["channels"][i],
                    heads=_HEADS[i], attn_kind=kinds[i], esa_reduction=_REDUCTIONS[i],
                    mlp_ratio=mlp_ratio)
        for i in range(4)
    )
    da = DaConfig(window, window, 1, 1, pe_mode, wrap_horizontal)
    return ModelConfig(variant, stages, preset["decoder_dim"], num_classes, da)


# -- building blocks -------------------------------------------------------

class PatchMerge(Module):
    """Overlapping patch embedding: unfold then a linear map (a strided convolution)."""

    def __init__(self, k: int, s: int, p: int, c_in: int, c_out: int, rng: Rng, dtype=np.float32):
        self.k, self.s, self.p = k, s, p
        self.proj = Linear(k * k * c_in, c_out, rng, dtype=dtype)
        self.norm = LayerNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(ops.unfold(x, self.k, self.s, self.p)))


class Mlp(Module):
    def __init__(self, dim: int, ratio: int, rng: Rng, dtype=np.float32):
        self.fc1 = Linear(dim, dim * ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm residual block: ``x + attn(LN(x))`` then ``+ mlp(LN(.))``."""

    def __init__(self, st: StageConfig, da: DaConfig, rng: Rng, dtype=np.float32):
        self.kind = st.attn_kind
        self.norm1 = LayerNorm(st.channels, dtype=dtype)
        if st.attn_kind == "da":
            self.attn = DistortionAwareAttention(da, rng, dtype)
        else:
            self.attn = EfficientSelfAttention(st.channels, st.heads, st.esa_reduction, rng, dtype)
        self.norm2 = LayerNorm(st.channels, dtype=dtype)
        self.mlp = Mlp(st.channels, st.mlp_ratio, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.mlp(self.norm2(x)))


def block_forward(x: Tensor, block: Block) -> Tensor:
    return block(x)


class Stage(Module):
    def __init__(self, st: StageConfig, c_in: int, da: DaConfig, rng: Rng, dtype=np.float32):
        self.merge = PatchMerge(st.patch_k, st.patch_s, st.patch_p, c_in, st.channels, rng, dtype)
        self.blocks = [Block(st, da, rng, dtype) for _ in range(st.depth)]
        self.norm = LayerNorm(st.channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(Module):
    """Per-level linear alignment, resize to the finest level, concat, fuse, classify."""

    def __init__(self, channels, dim: int, num_classes: int, rng: Rng, dtype=np.float32):
        self.dim = dim
        self.align = [Linear(c, dim, rng, dtype=dtype) for c in channels]
        self.fuse = Linear(len(channels) * dim, dim, rng, dtype=dtype)
        self.classifier = Linear(dim, num_classes, rng, dtype=dtype)

    def fused_concat(self, feats) -> Tensor:
        """Literal form: align, upsample, concatenate, fuse."""
        h, w = feats[0].shape[1:3]
        ups = [ops.bilinear_resize(lin(f), h, w) for lin, f in zip(self.align, feats)]
        return self.fuse(ops.concat(ups, axis=-1))

    def fused(self, feats) -> Tensor:
        """Same result as :meth:`fused_concat`, cheaper.

        The fuse weight is split into per-level blocks and folded into each
        alignment layer, so the fusion matmul runs at every level's own
        resolution.  Valid because bilinear resizing is linear per channel
        and its weights sum to one (biases commute with it).
        """
        h, w = feats[0].shape[1:3]
        d = self.dim
        total = None
        for i, (lin, f) in enumerate(zip(self.align, feats)):
            block = ops.getitem(self.fuse.weight, (slice(i * d, (i + 1) * d), slice(None)))
            weight = ops.matmul(lin.weight, block)
            bias = ops.reshape(ops.matmul(ops.reshape(lin.bias, (1, d)), block), (d,))
            y = ops.bilinear_resize(ops.linear(f, weight, bias), h, w)
            total = y if total is None else ops.add(total, y)
        return ops.add(total, self.fuse.bias)

    def forward(self, feats):
        """Returns ``(logits, features)`` at the finest level's resolution."""
        feat = ops.relu(self.fused(feats))
        return self.classifier(feat), feat


class DATR(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        c_in = 3
        self.stages = []
        for i, st in enumerate(cfg.stages):
            self.stages.append(Stage(st, c_in, cfg.stage_da(i), rng, dtype))
            c_in = st.channels
        self.decoder = Decoder([s.channels for s in cfg.stages], cfg.decoder_dim,
                               cfg.num_classes, rng, dtype)

    @property
    def dtype(self):
        return self.stages[0].merge.proj.weight.dtype

    def forward(self, img):
        """``img (B, H, W, 3)`` -> ``(logits, fused features)`` at ``H/4 x W/4``."""
        return decoder_forward(encoder_forward(img, self), self)


def build_model(cfg: ModelConfig, rng: Rng, dtype=np.float32) -> DATR:
    return DATR(cfg, rng, dtype)


def _pad_to_multiple(img: Tensor, m: int) -> Tensor:
    h, w = img.shape[1:3]
    return ops.pad_hw(img, (-h) % m, (-w) % m)


def encoder_forward(img, model: DATR) -> tuple:
    """Four feature maps, ``F_i`` at ``H/2^(i+1) x W/2^(i+1) x C_i``."""
    if not isinstance(img, Tensor):
        img = Tensor(np.asarray(img, dtype=model.dtype))
    if img.ndim == 3:
        img = ops.reshape(img, (1,) + img.shape)
    if img.shape[1] < 32 or img.shape[2] < 32:
        raise DimensionError(f"image {img.shape[1]}x{img.shape[2]} is smaller than 32x32")
    x = _pad_to_multiple(img, 4)
    feats = []
    for stage in model.stages:
        x = stage(x)
        feats.append(x)
    return tuple(feats)


def decoder_forward(feats, model: DATR):
    """Logits ``(B, H/4, W/4, K)`` and the fused decoder features."""
    return model.decoder(feats)


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    """Resize logits to the (padded) input size, then crop to ``h x w``."""
    hp, wp = h + (-h) % 4, w + (-w) % 4
    out = ops.bilinear_resize(logits, hp, wp)
    if (hp, wp) != (h, w):
        out = ops.getitem(out, (slice(None), slice(0, h), slice(0, w), slice(None)))
    return out


def predict(img, model: DATR):
    """Per-pixel class probabilities ``(B, H, W, K)`` and argmax labels."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=model.dtype)
    if arr.ndim == 3:
        arr = arr[None]
    with no_grad():
        logits, _ = model(Tensor(arr))
        probs = ops.softmax(upsample_logits(logits, arr.shape[1], arr.shape[2]), -1).data
    return probs, probs.argmax(axis=-1).astype(np.int64)


def model_param_count(model: DATR) -> int:
    return param_count(model)
