"""Toy U-shaped window-attention/convolution segmenter.

Layout for the default config (64x64 input, patch 4, two encoder stages)::

    stem [1+F, 64, 64] -> embed [48, 16, 16]
    enc0 blocks @16x16 (48) -> merge -> enc1 blocks @8x8 (96) -> merge
    mid blocks @4x4 (192)
    up -> fuse skip enc1 -> dec1 blocks @8x8 (96)
    up -> fuse skip enc0 -> dec0 blocks @16x16 (48)
    head: project, upsample x4, concat stem, 1x1 conv, GELU, 1x1 -> logits

Shifted windows use a cyclic roll with no attention mask, so tokens that
wrap around the border attend to each other.  No relative position bias is
used, which keeps attention permutation-equivariant inside a window.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .embed import EmbedConfig, conv_stack_forward, init_embed_weights, stem_forward, uniform_init
from .filters import FilterBank, init_bank, learnable_param_count
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GLOG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    window: int = 4
    heads: int = 2
    shift: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class BankConfig:
    n_gabor: int = 2
    n_log: int = 5
    kernel_size: int = 7


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 4
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    window: int = 4
    heads: int = 2
    depth: int = 2
    blocks_per_stage: int = 2
    bottleneck_blocks: int = 2
    head_channels: int = 16

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed"]["conv_stack"] = [list(s) for s in self.embed.conv_stack]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["embed"] = EmbedConfig(**d["embed"])
        return cls(**d)

    def check_input(self, h: int, w: int) -> None:
        p = self.embed.patch_size
        if h % p or w % p:
            raise ValueError(f"constraint failed: image {h}x{w} divisible by patch_size={p}")
        th, tw = h // p, w // p
        for stage in range(self.depth + 1):
            if th % self.window or tw % self.window:
                raise ValueError(
                    f"constraint failed: window={self.window} divides token grid {th}x{tw} "
                    f"at stage {stage}")
            if stage < self.depth:
                if th % 2 or tw % 2:
                    raise ValueError(f"constraint failed: token grid {th}x{tw} even at stage {stage}")
                th, tw = th // 2, tw // 2


@dataclass
class ModelWeights:
    config: ModelConfig
    bank: FilterBank
    params: dict
    seed: int = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Traversal order used for counting, optimizers and checkpoints."""
        return [("bank.gabor", self.bank.gabor), ("bank.log", self.bank.log)] + list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def bank_param_count(self) -> int:
        return learnable_param_count(self.bank)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "ModelWeights":
        params = {k: Tensor(v.data.copy(), True, k) for k, v in self.params.items()}
        return ModelWeights(self.config, self.bank.copy(), params, self.seed)


# -- attention and blocks ----------------------------------------------------

def window_attention(tokens: Tensor, cfg: BlockConfig, weights: dict, prefix: str = "",
                     return_attn: bool = False):
    """Multi-head self-attention inside non-overlapping ``window x window`` groups.

    ``tokens`` is ``[dim, Ht, Wt]`` or ``[N, dim, Ht, Wt]``.  With
    ``cfg.shift`` the grid is cyclically rolled by half a window first
    (skipped when one window covers the whole grid) and rolled back after.
    """
    unbatched = tokens.data.ndim == 3
    x = ops.reshape(tokens, (1,) + tokens.shape) if unbatched else tokens
    n, d, h, w = x.shape
    win = cfg.window
    if h % win or w % win:
        raise ValueError(f"token grid {h}x{w} not divisible by window {win}")
    if d != cfg.dim:
        raise ValueError(f"tokens have {d} channels, block expects {cfg.dim}")
    shift = win // 2 if cfg.shift and (h > win or w > win) else 0
    if shift:
        x = ops.roll(x, (-shift, -shift), (2, 3))
    nh, nw = h // win, w // win
    x = ops.reshape(x, (n, d, nh, win, nw, win))
    x = ops.transpose(x, (0, 2, 4, 3, 5, 1))
    x = ops.reshape(x, (n * nh * nw, win * win, d))

    b, t = n * nh * nw, win * win
    heads, dh = cfg.heads, d // cfg.heads

    def project(name):
        y = ops.linear(x, weights[f"{prefix}w{name}"], weights[f"{prefix}b{name}"])
        return ops.transpose(ops.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = project("q"), project("k"), project("v")
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    o = ops.matmul(attn, v)
    o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (b, t, d))
    o = ops.linear(o, weights[f"{prefix}wo"], weights[f"{prefix}bo"])

    o = ops.reshape(o, (n, nh, nw, win, win, d))
    o = ops.transpose(o, (0, 5, 1, 3, 2, 4))
    o = ops.reshape(o, (n, d, h, w))
    if shift:
        o = ops.roll(o, (shift, shift), (2, 3))
    if unbatched:
        o = ops.reshape(o, (d, h, w))
    return (o, attn) if return_attn else o


def init_block_weights(dim: int, rng: np.random.Generator, prefix: str) -> dict:
    w = {}
    w[f"{prefix}ln1_g"] = np.ones(dim)
    w[f"{prefix}ln1_b"] = np.zeros(dim)
    for name in ("q", "k", "v", "o"):
        w[f"{prefix}w{name}"] = uniform_init(rng, (dim, dim), dim)
        w[f"{prefix}b{name}"] = np.zeros(dim)
    w[f"{prefix}ln2_g"] = np.ones(dim)
    w[f"{prefix}ln2_b"] = np.zeros(dim)
    w[f"{prefix}dw"] = uniform_init(rng, (dim, 3, 3), 9)
    w[f"{prefix}dw_b"] = np.zeros(dim)
    w[f"{prefix}pw"] = uniform_init(rng, (dim, dim, 1, 1), dim)
    w[f"{prefix}pw_b"] = np.zeros(dim)
    return {k: Tensor(v, True, k) for k, v in w.items()}


def cst_block(tokens: Tensor, cfg: BlockConfig, weights: dict, prefix: str = "") -> Tensor:
    """LN -> window attention (+res) -> LN -> 3x3 depthwise conv, GELU, pointwise (+res)."""
    h = ops.layer_norm(tokens, weights[f"{prefix}ln1_g"], weights[f"{prefix}ln1_b"])
    x = ops.add(tokens, window_attention(h, cfg, weights, prefix))
    h = ops.layer_norm(x, weights[f"{prefix}ln2_g"], weights[f"{prefix}ln2_b"])
    h = ops.depthwise_conv2d(h, weights[f"{prefix}dw"], weights[f"{prefix}dw_b"])
    h = ops.gelu(h)
    h = ops.conv2d(h, weights[f"{prefix}pw"], weights[f"{prefix}pw_b"])
    return ops.add(x, h)


# -- full model ---------------------------------------------------------------

def _stage_blocks(x: Tensor, dim: int, n_blocks: int, cfg: ModelConfig, weights: dict, tag: str) -> Tensor:
    for i in range(n_blocks):
        bcfg = BlockConfig(dim=dim, window=cfg.window, heads=cfg.heads, shift=i % 2 == 1)
        x = cst_block(x, bcfg, weights, f"{tag}.blk{i}.")
    return x


def model_init(n_classes: int = 4, cfg: Optional[ModelConfig] = None,
               bank_cfg: Optional[BankConfig] = None, seed: int = 0) -> ModelWeights:
    """Deterministic random weights plus an initialized filter bank."""
    cfg = cfg or ModelConfig(n_classes=n_classes)
    if cfg.n_classes != n_classes:
        cfg = replace(cfg, n_classes=n_classes)
    bank_cfg = bank_cfg or BankConfig()
    rng = np.random.default_rng(seed)
    bank = init_bank(bank_cfg.n_gabor, bank_cfg.n_log, bank_cfg.kernel_size, seed)
    stem_ch = 1 + bank.n_filters
    params: dict = {}
    params.update(init_embed_weights(cfg.embed, stem_ch, rng))
    dim = cfg.embed.embed_dim

    def dense(name, shape, fan_in):
        params[name] = Tensor(uniform_init(rng, shape, fan_in), True, name)

    def zeros(name, n):
        params[name] = Tensor(np.zeros(n), True, name)

    for s in range(cfg.depth):
        for i in range(cfg.blocks_per_stage):
            params.update(init_block_weights(dim, rng, f"enc{s}.blk{i}."))
        dense(f"enc{s}.merge_w", (2 * dim, dim, 2, 2), 4 * dim)
        zeros(f"enc{s}.merge_b", 2 * dim)
        dim *= 2
    for i in range(cfg.bottleneck_blocks):
        params.update(init_block_weights(dim, rng, f"mid.blk{i}."))
    for s in reversed(range(cfg.depth)):
        dense(f"dec{s}.up_w", (dim // 2, dim, 1, 1), dim)
        zeros(f"dec{s}.up_b", dim // 2)
        dim //= 2
        dense(f"dec{s}.fuse_w", (dim, 2 * dim, 1, 1), 2 * dim)
        zeros(f"dec{s}.fuse_b", dim)
        for i in range(cfg.blocks_per_stage):
            params.update(init_block_weights(dim, rng, f"dec{s}.blk{i}."))
    hc = cfg.head_channels
    params["head.ln_g"] = Tensor(np.ones(dim), True, "head.ln_g")
    params["head.ln_b"] = Tensor(np.zeros(dim), True, "head.ln_b")
    dense("head.proj_w", (hc, dim, 1, 1), dim)
    zeros("head.proj_b", hc)
    dense("head.conv_w", (hc, hc + stem_ch, 1, 1), hc + stem_ch)
    zeros("head.conv_b", hc)
    dense("head.out_w", (cfg.n_classes, hc, 1, 1), hc)
    zeros("head.out_b", cfg.n_classes)
    return ModelWeights(cfg, bank, params, seed)


def model_forward(image, weights: ModelWeights, trace: Optional[dict] = None) -> Tensor:
    """Per-pixel class logits ``[n_classes, H, W]`` (``[N, n_classes, H, W]`` if batched).

    ``trace``, when given, is filled with the tensor at every stage boundary.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    cfg, p = weights.config, weights.params
    if image.data.ndim not in (3, 4) or image.shape[-3] != 1:
        raise ValueError(f"constraint failed: single-channel image, got shape {image.shape}")
    cfg.check_input(*image.shape[-2:])
    trace = trace if trace is not None else {}

    stem = stem_forward(image, weights.bank)
    x = conv_stack_forward(stem, p, cfg.embed)
    trace["embed"] = x
    dim = cfg.embed.embed_dim
    skips = []
    for s in range(cfg.depth):
        x = _stage_blocks(x, dim, cfg.blocks_per_stage, cfg, p, f"enc{s}")
        trace[f"enc{s}"] = x
        skips.append(x)
        x = ops.conv2d(x, p[f"enc{s}.merge_w"], p[f"enc{s}.merge_b"], stride=2, padding=0)
        dim *= 2
    x = _stage_blocks(x, dim, cfg.bottleneck_blocks, cfg, p, "mid")
    trace["mid"] = x
    for s in reversed(range(cfg.depth)):
        x = ops.upsample_nearest(x, 2)
        x = ops.conv2d(x, p[f"dec{s}.up_w"], p[f"dec{s}.up_b"])
        dim //= 2
        x = ops.concat_channels([x, skips[s]])
        x = ops.conv2d(x, p[f"dec{s}.fuse_w"], p[f"dec{s}.fuse_b"])
        x = _stage_blocks(x, dim, cfg.blocks_per_stage, cfg, p, f"dec{s}")
        trace[f"dec{s}"] = x
    x = ops.layer_norm(x, p["head.ln_g"], p["head.ln_b"])
    x = ops.conv2d(x, p["head.proj_w"], p["head.proj_b"])
    x = ops.upsample_nearest(x, cfg.embed.patch_size)
    x = ops.concat_channels([x, stem])
    x = ops.gelu(ops.conv2d(x, p["head.conv_w"], p["head.conv_b"]))
    logits = ops.conv2d(x, p["head.out_w"], p["head.out_b"])
    trace["logits"] = logits
    return logits


def predict(weights: ModelWeights, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax labels ``[N, H, W]`` for images ``[N, H, W]`` or ``[N, 1, H, W]``."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    out = []
    for i in range(0, len(imgs), batch_size):
        logits = model_forward(Tensor(imgs[i:i + batch_size]), weights).data
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + imgs.shape[-2:], dtype=np.int64)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, weights: ModelWeights, meta: Optional[dict] = None) -> None:
    """``GLOG`` | u32 version | u32 header length | JSON header | float64 LE buffers."""
    named = weights.named_parameters()
    header = {
        "model_config": weights.config.to_dict(),
        "bank": {"n_gabor": weights.bank.n_gabor, "n_log": weights.bank.n_log,
                 "kernel_size": weights.bank.grid.size},
        "seed": weights.seed,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, t in named:
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelWeights, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GLOG checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["model_config"])
    b = header["bank"]
    weights = model_init(cfg.n_classes, cfg, BankConfig(b["n_gabor"], b["n_log"], b["kernel_size"]),
                         header["seed"])
    named = dict(weights.named_parameters())
    offset = 12 + hlen
    for entry in header["tensors"]:
        t = named[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ValueError(f"{path}: tensor {entry['name']} has shape {shape}, expected {t.shape}")
        n = int(np.prod(shape)) if shape else 1
        t.data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return weights, header.get("meta", {})


__all__ = [
    "BlockConfig", "BankConfig", "ModelConfig", "ModelWeights", "window_attention", "cst_block",
    "init_block_weights", "model_init", "model_forward", "predict", "save_checkpoint",
    "load_checkpoint",
]
