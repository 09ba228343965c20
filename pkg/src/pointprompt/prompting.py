"""Tuning strategies: static prompts, dynamic instance-aware prompts, freezing.

Static prompting learns fixed prompt matrices spliced between the CLS token
and the patch tokens (inserted once at layer 1, or replaced at every chosen
layer). Dynamic prompting runs the frozen encoder up to the insert layer,
feeds the patch tokens through a small generator (patch-level EdgeConv stack,
MLP stack, or one transformer layer), pools over patches, and splices the
resulting per-instance prompt back in. Parameter accounting walks the real
registry so reported counts match what the optimizer sees.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .backbone import (BackboneConfig, Role, TokenSequence, add_encoder_layer,
                       broadcast_token, embed_tokens_batch, encode_range,
                       encoder_layer, linear, roles_for)
from .geometry import PointCloud, group_patches_batch, knn_batch
from .params import ParamRegistry

STRATEGY_KINDS = ("full_finetune", "head_only", "vpt_shallow", "vpt_deep", "idpt")
GENERATORS = ("mlp1", "mlp3", "edgeconv1", "edgeconv2", "edgeconv3", "transformer1")
HEAD_INPUT_ORDER = ("cls", "prompt", "patch_maxpool")

PROMPT_INIT_SIGMA = 0.02


@dataclass(frozen=True)
class StrategyConfig:
    """Complete description of one tuning strategy.

    prompt_count is the number of learnable prompts per insert layer for the
    static kinds, and the top-K pool width for the dynamic kind. insert_layers
    and head_inputs default per kind when None (resolved against the backbone
    depth by `resolve`).
    """

    kind: str = "idpt"
    generator: str = "edgeconv3"
    prompt_count: int = 1
    insert_layers: tuple[int, ...] | None = None
    sharing: str = "shared"
    knn_k: int = 0  # 0 = min(8, patches)
    head_inputs: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind: {self.kind!r}")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator: {self.generator!r}")
        if self.prompt_count < 1:
            raise ValueError("prompt_count must be >= 1")
        if self.sharing not in ("shared", "independent"):
            raise ValueError(f"sharing must be shared|independent, got {self.sharing!r}")
        if self.head_inputs is not None:
            bad = set(self.head_inputs) - set(HEAD_INPUT_ORDER)
            if bad:
                raise ValueError(f"unknown head inputs: {sorted(bad)}")
            if not self.head_inputs:
                raise ValueError("head_inputs must be nonempty")

    @property
    def uses_prompts(self) -> bool:
        return self.kind in ("vpt_shallow", "vpt_deep", "idpt")

    def resolve(self, cfg: BackboneConfig) -> "StrategyConfig":
        """Fill per-kind defaults and validate against the backbone depth."""
        n = cfg.depth
        layers = self.insert_layers
        if layers is None or len(layers) == 0:
            layers = {"idpt": (n,), "vpt_shallow": (1,),
                      "vpt_deep": tuple(range(1, n + 1))}.get(self.kind, ())
        layers = tuple(sorted(set(int(i) for i in layers)))
        if self.kind == "idpt":
            for i in layers:
                if not 2 <= i <= n:
                    raise ValueError(
                        f"dynamic prompt insert layer {i} outside [2, {n}] "
                        "(the generator consumes the previous layer's output)")
        elif self.kind == "vpt_shallow":
            if layers != (1,):
                raise ValueError("vpt_shallow inserts at layer 1 only")
        elif self.kind == "vpt_deep":
            for i in layers:
                if not 1 <= i <= n:
                    raise ValueError(f"insert layer {i} outside [1, {n}]")
        heads_in = self.head_inputs
        if heads_in is None:
            heads_in = (("cls", "prompt", "patch_maxpool") if self.uses_prompts
                        else ("cls", "patch_maxpool"))
        heads_in = tuple(h for h in HEAD_INPUT_ORDER if h in heads_in)
        if "prompt" in heads_in and not self.uses_prompts:
            raise ValueError(f"head input 'prompt' unavailable for kind {self.kind!r}")
        kk = self.knn_k if self.knn_k > 0 else min(8, cfg.patches)
        if kk > cfg.patches:
            raise ValueError(f"knn_k={kk} exceeds patch count {cfg.patches}")
        return replace(self, insert_layers=layers, head_inputs=heads_in, knn_k=kk)


def trainable_prefixes(kind: str) -> tuple[str, ...]:
    return {
        "full_finetune": ("backbone.", "head."),
        "head_only": ("head.",),
        "vpt_shallow": ("prompt.", "head."),
        "vpt_deep": ("prompt.", "head."),
        "idpt": ("gen.", "head."),
    }[kind]


def apply_freeze(reg: ParamRegistry, strategy: StrategyConfig) -> None:
    prefixes = trainable_prefixes(strategy.kind)
    reg.set_trainable(lambda n: any(n.startswith(p) for p in prefixes))


# ---------------------------------------------------------------------------
# strategy parameters

def _generator_scopes(strategy: StrategyConfig) -> list[str]:
    if strategy.sharing == "shared" or len(strategy.insert_layers) == 1:
        return ["gen.shared"]
    return [f"gen.layer{i}" for i in strategy.insert_layers]


def init_strategy_params(reg: ParamRegistry, strategy: StrategyConfig,
                         cfg: BackboneConfig, rng: np.random.Generator) -> None:
    """Add the strategy's own parameters (prompts or generator) to `reg`."""
    d = cfg.dim
    if strategy.kind in ("vpt_shallow", "vpt_deep"):
        for i in strategy.insert_layers:
            reg.add(f"prompt.layer{i}",
                    rng.normal(0.0, PROMPT_INIT_SIGMA, size=(strategy.prompt_count, d)))
        return
    if strategy.kind != "idpt":
        return
    for scope in _generator_scopes(strategy):
        arch = strategy.generator
        if arch.startswith("edgeconv"):
            c = int(arch[-1])
            for j in range(1, c + 1):
                _add_linear_like(reg, rng, f"{scope}.edgeconv{j}", 2 * d, d)
            _add_linear_like(reg, rng, f"{scope}.fuse", c * d, d)
        elif arch.startswith("mlp"):
            for j in range(1, int(arch[-1]) + 1):
                _add_linear_like(reg, rng, f"{scope}.mlp{j}", d, d)
        else:  # transformer1
            add_encoder_layer(reg, rng, f"{scope}.tfm", d, cfg.ffn_mult)


def _add_linear_like(reg, rng, name, d_in, d_out):
    bound = 1.0 / np.sqrt(d_in)
    reg.add(f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
    reg.add(f"{name}.b", np.zeros(d_out))


# ---------------------------------------------------------------------------
# dynamic prompt generation

def _graph_knn(feats: np.ndarray, k: int) -> np.ndarray:
    """Feature-space kNN indices via the expanded-square distance form."""
    f = feats.astype(np.float64)
    sq = np.einsum("bmd,bmd->bm", f, f)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * (f @ f.swapaxes(1, 2))
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


def edgeconv_batch(x: ad.Tensor, knn_k: int, reg: ParamRegistry,
                   name: str) -> ad.Tensor:
    """EdgeConv over a (B, m, d_in) stack: kNN graph rebuilt in the current
    feature space, edge features [x_i || x_j - x_i] through a shared linear +
    activation, max over the neighbors.

    The edge linear is evaluated as x_i @ W_top + (x_j - x_i) @ W_bot, which
    is the same map without materializing the concatenated edge tensor.
    """
    b, m, din = x.shape
    if knn_k > m:
        raise ValueError(f"knn_k={knn_k} exceeds node count {m}")
    nidx = _graph_knn(x.value, knn_k)                      # (B, m, kk)
    flat = ad.reshape(x, (b * m, din))
    flat_idx = (nidx + (np.arange(b) * m)[:, None, None]).reshape(-1)
    nbr = ad.reshape(ad.gather_rows(flat, flat_idx), (b, m, knn_k, din))
    w = reg[f"{name}.w"]
    w_center = ad.slice_axis(w, 0, 0, din)
    w_diff = ad.slice_axis(w, 0, din, 2 * din)
    x_k = ad.reshape(x, (b, m, 1, din))
    diff = ad.add(nbr, ad.scale(x_k, -1.0))
    pre = ad.add(ad.matmul(diff, w_diff),
                 ad.reshape(ad.matmul(x, w_center), (b, m, 1, w.shape[1])))
    h = ad.gelu(ad.add(pre, reg[f"{name}.b"]))
    return ad.max_reduce(h, axis=2)


def edgeconv_layer(features: ad.Tensor, knn_k: int, reg: ParamRegistry,
                   name: str) -> ad.Tensor:
    """Single-instance EdgeConv on (m, d_in) features."""
    m, din = features.shape
    out = edgeconv_batch(ad.reshape(features, (1, m, din)), knn_k, reg, name)
    return ad.reshape(out, out.shape[1:])


def _generator_features(e_prev: ad.Tensor, reg: ParamRegistry,
                        strategy: StrategyConfig, cfg: BackboneConfig,
                        scope: str) -> ad.Tensor:
    arch = strategy.generator
    if arch.startswith("edgeconv"):
        c = int(arch[-1])
        outs = []
        h = e_prev
        for j in range(1, c + 1):
            h = edgeconv_batch(h, strategy.knn_k, reg, f"{scope}.edgeconv{j}")
            outs.append(h)
        fused = outs[0] if c == 1 else ad.concat(outs, axis=-1)
        return linear(fused, reg, f"{scope}.fuse")
    if arch.startswith("mlp"):
        h = e_prev
        for j in range(1, int(arch[-1]) + 1):
            h = ad.gelu(linear(h, reg, f"{scope}.mlp{j}"))
        return h
    return encoder_layer(e_prev, reg, f"{scope}.tfm", cfg.heads)


def generate_prompt(e_prev: ad.Tensor, reg: ParamRegistry,
                    strategy: StrategyConfig, cfg: BackboneConfig,
                    scope: str = "gen.shared", pool: str | None = None) -> ad.Tensor:
    """Instance-aware prompt tokens from patch tokens, (B, m, d) -> (B, K, d).

    The generator's per-patch features are pooled over the patch axis: a
    per-feature max for K=1, or a per-feature top-K stack for K>1. Passing
    pool="topk" forces the top-K path even for K=1 (it is bitwise identical
    to the max path). Accepts an (m, d) single instance as well.
    """
    single = e_prev.value.ndim == 2
    if single:
        e_prev = ad.reshape(e_prev, (1,) + e_prev.shape)
    k = strategy.prompt_count
    if pool is None:
        pool = "max" if k == 1 else "topk"
    if pool == "max" and k != 1:
        raise ValueError("max pooling yields one prompt; use topk for K > 1")
    feats = _generator_features(e_prev, reg, strategy, cfg, scope)  # (B, m, d)
    b, _, d = feats.shape
    if pool == "max":
        out = ad.reshape(ad.max_reduce(feats, axis=1), (b, 1, d))
    else:
        out = ad.topk_reduce(feats, axis=1, k=k)
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------------------
# tuned forward passes

def _splice_prompts(x: ad.Tensor, prompts: ad.Tensor, old_prompt_count: int) -> ad.Tensor:
    """Replace the current prompt block (possibly empty) right after CLS."""
    L = x.shape[1]
    cls_blk = ad.slice_axis(x, 1, 0, 1)
    patch_blk = ad.slice_axis(x, 1, 1 + old_prompt_count, L)
    return ad.concat([cls_blk, prompts, patch_blk], axis=1)


def forward_tuned_tokens(tokens: ad.Tensor, reg: ParamRegistry,
                         cfg: BackboneConfig, strategy: StrategyConfig,
                         pool: str | None = None,
                         tap: str = "output_n") -> tuple[ad.Tensor, tuple[Role, ...]]:
    """Run layer-0 tokens (B, 1+m, d) through the strategy's tuned pipeline.

    tap="input_n" stops right before the last encoder layer (after any prompt
    insertion targeting it); the default returns the layer-N output.
    """
    if tap not in ("output_n", "input_n"):
        raise ValueError(f"unknown tap: {tap!r}")
    n = cfg.depth
    last = n - 1 if tap == "input_n" else n
    m = tokens.shape[1] - 1
    b = tokens.shape[0]
    kind = strategy.kind

    if kind in ("full_finetune", "head_only"):
        x = encode_range(tokens, reg, cfg, 1, last)
        return x, roles_for(0, m)

    if kind in ("vpt_shallow", "vpt_deep"):
        x = tokens
        cur = 0
        p = strategy.prompt_count
        for i in range(1, n + 1):
            if i in strategy.insert_layers:
                block = broadcast_token(reg[f"prompt.layer{i}"], b, p, reg.dtype)
                x = _splice_prompts(x, block, cur)
                cur = p
            if i > last:
                break
            x = encoder_layer(x, reg, f"backbone.layer{i}", cfg.heads)
        return x, roles_for(cur, m)

    # dynamic prompting: generate from the previous layer's patch tokens
    x = tokens
    cur = 0
    nxt = 1
    for i in strategy.insert_layers:
        x = encode_range(x, reg, cfg, nxt, i - 1)
        patch_blk = ad.slice_axis(x, 1, 1 + cur, x.shape[1])
        scope = "gen.shared" if strategy.sharing == "shared" \
            or len(strategy.insert_layers) == 1 else f"gen.layer{i}"
        prompts = generate_prompt(patch_blk, reg, strategy, cfg, scope, pool=pool)
        x = _splice_prompts(x, prompts, cur)
        cur = strategy.prompt_count
        nxt = i
    x = encode_range(x, reg, cfg, nxt, last)
    return x, roles_for(cur, m)


def forward_tuned_batch(points: np.ndarray, reg: ParamRegistry,
                        cfg: BackboneConfig, strategy: StrategyConfig,
                        pool: str | None = None,
                        tap: str = "output_n") -> TokenSequence:
    centers, groups = group_patches_batch(points, cfg.patches, cfg.patch_points)
    tokens = embed_tokens_batch(centers, groups, reg)
    x, roles = forward_tuned_tokens(tokens, reg, cfg, strategy, pool=pool, tap=tap)
    layer = cfg.depth - 1 if tap == "input_n" else cfg.depth
    return TokenSequence(tokens=x, roles=roles, layer_index=layer)


def forward_tuned(cloud: PointCloud, reg: ParamRegistry, cfg: BackboneConfig,
                  strategy: StrategyConfig, pool: str | None = None) -> TokenSequence:
    """Full tuned pipeline for one cloud; returns the layer-N sequence."""
    seq = forward_tuned_batch(cloud.points[None], reg, cfg, strategy, pool=pool)
    toks = ad.reshape(seq.tokens, seq.tokens.shape[1:])
    return TokenSequence(tokens=toks, roles=seq.roles, layer_index=seq.layer_index)


# ---------------------------------------------------------------------------
# parameter accounting

def count_trainable(strategy: StrategyConfig, cfg: BackboneConfig,
                    head_hidden: int = 256, classes: int = 15) -> dict:
    """Exact parameter breakdown from walking a freshly built registry.

    total_all is the full fine-tuning footprint (backbone + head) so the
    trainable ratio is comparable across strategies sharing one backbone and
    head configuration.
    """
    from .training import build_model  # local import: training builds the head

    strategy = strategy.resolve(cfg)
    reg = build_model(cfg, strategy, head_hidden=head_hidden, classes=classes,
                      rng=np.random.default_rng(0))
    apply_freeze(reg, strategy)
    backbone_n = reg.count("backbone.")
    prompts_n = reg.count("prompt.")
    gen_n = reg.count("gen.")
    head_n = reg.count("head.")
    trainable = sum(t.value.size for t in reg.trainable_items().values())
    total_all = backbone_n + head_n
    return {
        "backbone": backbone_n,
        "prompts": prompts_n,
        "generator": gen_n,
        "head": head_n,
        "total_trainable": trainable,
        "total_all": total_all,
        "ratio": trainable / total_all,
    }
