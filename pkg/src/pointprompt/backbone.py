"""Miniature pre-trainable point-cloud transformer.

Patch groups go through a two-stage shared-point MLP with max pooling, get a
coordinate positional term, and are prepended with a CLS token; an N-layer
pre-norm encoder then mixes the sequence. All forward helpers accept token
stacks shaped (B, L, d); the public single-cloud entry points wrap B=1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import PatchSet, PointCloud, group_patches, group_patches_batch
from .params import ParamRegistry, add_layernorm, add_linear, uniform_init

LN_EPS = 1e-5


class Role(str, enum.Enum):
    CLS = "CLS"
    PROMPT = "PROMPT"
    PATCH = "PATCH"


@dataclass
class BackboneConfig:
    depth: int = 4          # encoder layers
    dim: int = 64           # token width
    heads: int = 4
    ffn_mult: int = 4
    patches: int = 16       # m, patches per cloud
    patch_points: int = 16  # k, points per patch

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (prompt generation needs a layer "
                             "before the last)")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise ValueError("dim must be even for the two-stage patch embedder")


def paper_scale_config() -> BackboneConfig:
    """Accounting-scale configuration (~22M backbone+head parameters)."""
    return BackboneConfig(depth=12, dim=384, heads=6, ffn_mult=4,
                          patches=64, patch_points=32)


@dataclass
class TokenSequence:
    """Ordered token stack with role tags.

    tokens has shape (L, d) or (B, L, d); roles has length L with exactly one
    CLS at position 0 and any PROMPT tags in one block right after it.
    """

    tokens: ad.Tensor
    roles: tuple[Role, ...]
    layer_index: int

    def __post_init__(self):
        L = self.tokens.shape[-2]
        if len(self.roles) != L:
            raise ValueError(f"{len(self.roles)} roles for {L} tokens")
        if self.roles[0] != Role.CLS or Role.CLS in self.roles[1:]:
            raise ValueError("exactly one CLS tag required, at position 0")
        prompt_idx = [i for i, r in enumerate(self.roles) if r == Role.PROMPT]
        if prompt_idx:
            lo, hi = prompt_idx[0], prompt_idx[-1]
            if lo != 1 or hi - lo + 1 != len(prompt_idx):
                raise ValueError("PROMPT tags must form one block after CLS")
            if any(r != Role.PATCH for r in self.roles[hi + 1:]):
                raise ValueError("PATCH tokens must follow the prompt block")

    @property
    def prompt_count(self) -> int:
        return sum(1 for r in self.roles if r == Role.PROMPT)

    @property
    def patch_count(self) -> int:
        return sum(1 for r in self.roles if r == Role.PATCH)


def roles_for(prompt_count: int, patch_count: int) -> tuple[Role, ...]:
    return (Role.CLS,) + (Role.PROMPT,) * prompt_count + (Role.PATCH,) * patch_count


# ---------------------------------------------------------------------------
# parameters

def init_backbone(cfg: BackboneConfig, rng: np.random.Generator,
                  dtype=np.float32) -> ParamRegistry:
    """Fresh backbone registry; weights uniform(+-1/sqrt(fan_in)), CLS zero."""
    reg = ParamRegistry(dtype=dtype)
    d = cfg.dim
    add_linear(reg, rng, "backbone.embed.mlp1", 3, d // 2)
    add_linear(reg, rng, "backbone.embed.mlp2", d, d)
    add_linear(reg, rng, "backbone.pos.fc1", 3, d)
    add_linear(reg, rng, "backbone.pos.fc2", d, d)
    reg.add("backbone.cls", np.zeros(d))
    for i in range(1, cfg.depth + 1):
        add_encoder_layer(reg, rng, f"backbone.layer{i}", d, cfg.ffn_mult)
    return reg


def add_encoder_layer(reg: ParamRegistry, rng: np.random.Generator,
                      prefix: str, d: int, ffn_mult: int) -> None:
    add_layernorm(reg, f"{prefix}.ln1", d)
    add_linear(reg, rng, f"{prefix}.attn.qkv", d, 3 * d)
    add_linear(reg, rng, f"{prefix}.attn.proj", d, d)
    add_layernorm(reg, f"{prefix}.ln2", d)
    add_linear(reg, rng, f"{prefix}.ffn.fc1", d, ffn_mult * d)
    add_linear(reg, rng, f"{prefix}.ffn.fc2", ffn_mult * d, d)


# ---------------------------------------------------------------------------
# forward building blocks (batched tensors)

def linear(x: ad.Tensor, reg: ParamRegistry, name: str) -> ad.Tensor:
    return ad.add(ad.matmul(x, reg[f"{name}.w"]), reg[f"{name}.b"])


def ln_affine(x: ad.Tensor, reg: ParamRegistry, name: str) -> ad.Tensor:
    y = ad.layernorm(x, axis=-1, eps=LN_EPS)
    return ad.add(ad.mul(y, reg[f"{name}.g"]), reg[f"{name}.b"])


def broadcast_token(vec: ad.Tensor, batch: int, count: int, dtype) -> ad.Tensor:
    """Tile a (p, d) or (d,) parameter to (batch, count, d); grads sum back."""
    d = vec.shape[-1]
    zeros = ad.constant(np.zeros((batch, count, d), dtype=dtype))
    return ad.add(zeros, vec)


def encoder_layer(x: ad.Tensor, reg: ParamRegistry, prefix: str, heads: int) -> ad.Tensor:
    """One pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""
    b, L, d = x.shape
    e = d // heads
    h = ln_affine(x, reg, f"{prefix}.ln1")
    qkv = linear(h, reg, f"{prefix}.attn.qkv")
    q = ad.slice_axis(qkv, 2, 0, d)
    k = ad.slice_axis(qkv, 2, d, 2 * d)
    v = ad.slice_axis(qkv, 2, 2 * d, 3 * d)
    q = ad.transpose(ad.reshape(q, (b, L, heads, e)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (b, L, heads, e)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (b, L, heads, e)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(e))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (b, L, d))
    x = ad.add(x, linear(ctx, reg, f"{prefix}.attn.proj"))
    h = ln_affine(x, reg, f"{prefix}.ln2")
    h = ad.gelu(linear(h, reg, f"{prefix}.ffn.fc1"))
    return ad.add(x, linear(h, reg, f"{prefix}.ffn.fc2"))


def patch_features_batch(groups: np.ndarray, reg: ParamRegistry) -> ad.Tensor:
    """Shared-point MLP over (B, m, k, 3) groups, max-pooled to (B, m, d).

    Stage one lifts each point to d/2 and pools; the second stage consumes the
    concatenation [per-point || pooled], evaluated as a split matmul so the
    pooled half is never tiled. The feature is exactly invariant to
    within-patch point order (pooling only).
    """
    b, m, k, _ = groups.shape
    g = ad.constant(groups.astype(reg.dtype))
    h1 = ad.gelu(linear(g, reg, "backbone.embed.mlp1"))        # (B, m, k, d/2)
    pooled = ad.max_reduce(h1, axis=2)                          # (B, m, d/2)
    d2 = h1.shape[-1]
    w2 = reg["backbone.embed.mlp2.w"]
    w_pt = ad.slice_axis(w2, 0, 0, d2)
    w_pool = ad.slice_axis(w2, 0, d2, 2 * d2)
    z = ad.add(ad.matmul(h1, w_pt),
               ad.reshape(ad.matmul(pooled, w_pool), (b, m, 1, w2.shape[1])))
    z = ad.add(z, reg["backbone.embed.mlp2.b"])
    return ad.max_reduce(z, axis=2)                             # (B, m, d)


def pos_encode_batch(centers: np.ndarray, reg: ParamRegistry) -> ad.Tensor:
    c = ad.constant(centers.astype(reg.dtype))
    return linear(ad.gelu(linear(c, reg, "backbone.pos.fc1")), reg, "backbone.pos.fc2")


def embed_tokens_batch(centers: np.ndarray, groups: np.ndarray,
                       reg: ParamRegistry) -> ad.Tensor:
    """Layer-0 input: [CLS; patch features + positional term], (B, 1+m, d)."""
    feats = patch_features_batch(groups, reg)
    tok = ad.add(feats, pos_encode_batch(centers, reg))
    b, m, d = tok.shape
    cls = broadcast_token(ad.reshape(reg["backbone.cls"], (1, 1, d)), b, 1, reg.dtype)
    return ad.concat([cls, tok], axis=1)


def encode_range(x: ad.Tensor, reg: ParamRegistry, cfg: BackboneConfig,
                 first: int, last: int) -> ad.Tensor:
    for i in range(first, last + 1):
        x = encoder_layer(x, reg, f"backbone.layer{i}", cfg.heads)
    return x


# ---------------------------------------------------------------------------
# public single-cloud operations

def embed_patches(patches: PatchSet, reg: ParamRegistry,
                  cfg: BackboneConfig) -> TokenSequence:
    """Embed one PatchSet into the layer-0 token sequence [CLS, PATCH x m]."""
    m, k = patches.groups.shape[0], patches.groups.shape[1]
    if m != cfg.patches or k != cfg.patch_points:
        raise ValueError(f"patch set is {m}x{k}, config wants "
                         f"{cfg.patches}x{cfg.patch_points}")
    toks = embed_tokens_batch(patches.centers[None], patches.groups[None], reg)
    toks = ad.reshape(toks, toks.shape[1:])
    return TokenSequence(tokens=toks, roles=roles_for(0, m), layer_index=0)


def encoder_forward(seq: TokenSequence, reg: ParamRegistry, cfg: BackboneConfig,
                    first: int, last: int) -> TokenSequence:
    """Apply encoder layers f_first..f_last inclusive; first > last is identity."""
    if first > last:
        return seq
    if seq.layer_index != first - 1:
        raise ValueError(f"sequence is at layer {seq.layer_index}, "
                         f"cannot apply layer {first} next")
    if not (1 <= first and last <= cfg.depth):
        raise ValueError(f"layer range [{first}, {last}] outside 1..{cfg.depth}")
    x = seq.tokens
    single = x.value.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    x = encode_range(x, reg, cfg, first, last)
    if single:
        x = ad.reshape(x, x.shape[1:])
    return TokenSequence(tokens=x, roles=seq.roles, layer_index=last)


def forward_plain(cloud: PointCloud, reg: ParamRegistry,
                  cfg: BackboneConfig) -> TokenSequence:
    """Group, embed and encode one cloud through all layers (no prompts)."""
    patches = group_patches(cloud, cfg.patches, cfg.patch_points)
    seq = embed_patches(patches, reg, cfg)
    return encoder_forward(seq, reg, cfg, 1, cfg.depth)


def forward_plain_batch(points: np.ndarray, reg: ParamRegistry,
                        cfg: BackboneConfig) -> TokenSequence:
    centers, groups = group_patches_batch(points, cfg.patches, cfg.patch_points)
    toks = embed_tokens_batch(centers, groups, reg)
    seq = TokenSequence(tokens=toks, roles=roles_for(0, cfg.patches), layer_index=0)
    return encoder_forward(seq, reg, cfg, 1, cfg.depth)
