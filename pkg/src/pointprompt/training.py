"""Classification head, optimizer, masked-autoencoder pretraining, the tuning
loop, voting evaluation, and episodic few-shot runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .backbone import (BackboneConfig, TokenSequence, embed_tokens_batch,
                       init_backbone, linear, roles_for)
from .data import DatasetSplit, few_shot_split
from .geometry import augment_batch, group_patches_batch
from .params import ParamRegistry, add_linear
from .prompting import (StrategyConfig, apply_freeze, forward_tuned_batch,
                        forward_tuned_tokens, init_strategy_params)

MASK_TOKEN_SIGMA = 0.02


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


@dataclass
class TrainSettings:
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch: int = 32
    seed: int = 0
    augment: tuple[str, ...] = ()
    eval_every: int = 1


@dataclass
class PretrainSettings:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch: int = 32
    mask_ratio: float = 0.6
    seed: int = 0


@dataclass
class RunMetrics:
    train_loss: list[float]
    train_acc: list[float]
    test_acc: list[float]
    wall_time: float
    seed: int
    strategy: StrategyConfig

    def __post_init__(self):
        for acc in list(self.train_acc) + list(self.test_acc):
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")


# ---------------------------------------------------------------------------
# model assembly

def init_head(reg: ParamRegistry, rng: np.random.Generator, in_dim: int,
              hidden: int, classes: int) -> None:
    add_linear(reg, rng, "head.fc1", in_dim, hidden)
    add_linear(reg, rng, "head.fc2", hidden, hidden)
    add_linear(reg, rng, "head.fc3", hidden, classes)


def build_model(cfg: BackboneConfig, strategy: StrategyConfig, head_hidden: int,
                classes: int, rng: np.random.Generator,
                dtype=np.float32) -> ParamRegistry:
    """Backbone + strategy + head parameters in one named registry."""
    strategy = strategy.resolve(cfg)
    reg = init_backbone(cfg, rng, dtype=dtype)
    init_strategy_params(reg, strategy, cfg, rng)
    init_head(reg, rng, cfg.dim * len(strategy.head_inputs), head_hidden, classes)
    return reg


def assemble_model(cfg: BackboneConfig, strategy: StrategyConfig, head_hidden: int,
                   classes: int, backbone_values: dict[str, np.ndarray],
                   tunables: dict[str, np.ndarray] | None = None,
                   seed: int = 0) -> ParamRegistry:
    """Model registry with a loaded backbone and optional loaded tunables."""
    strategy = strategy.resolve(cfg)
    reg = build_model(cfg, strategy, head_hidden, classes,
                      np.random.default_rng(derive_seed(seed, 5)))
    reg.load_values(backbone_values)
    if tunables is not None:
        reg.load_values(tunables)
    apply_freeze(reg, strategy)
    return reg


# ---------------------------------------------------------------------------
# head

def head_forward(seq: TokenSequence, reg: ParamRegistry,
                 head_inputs: tuple[str, ...]) -> ad.Tensor:
    """Concatenate the selected sequence summaries and apply the MLP head.

    Component order is fixed (CLS, pooled PROMPT, max-pooled PATCH) no matter
    how head_inputs is written; a prompt block wider than one token is reduced
    by a per-feature max before entering the head.
    """
    if not head_inputs:
        raise ValueError("head_inputs must be nonempty")
    x = seq.tokens
    single = x.value.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    b, L, d = x.shape
    n_prompt = seq.prompt_count
    parts = []
    for comp in ("cls", "prompt", "patch_maxpool"):
        if comp not in head_inputs:
            continue
        if comp == "cls":
            parts.append(ad.reshape(ad.slice_axis(x, 1, 0, 1), (b, d)))
        elif comp == "prompt":
            if n_prompt == 0:
                raise ValueError("head input 'prompt' requested but the sequence "
                                 "has no prompt tokens")
            block = ad.slice_axis(x, 1, 1, 1 + n_prompt)
            parts.append(ad.max_reduce(block, axis=1))
        else:
            block = ad.slice_axis(x, 1, 1 + n_prompt, L)
            parts.append(ad.max_reduce(block, axis=1))
    h = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
    h = ad.gelu(linear(h, reg, "head.fc1"))
    h = ad.gelu(linear(h, reg, "head.fc2"))
    logits = linear(h, reg, "head.fc3")
    if single:
        logits = ad.reshape(logits, (logits.shape[-1],))
    return logits


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Decoupled-weight-decay Adam with a cosine learning-rate schedule.

    The schedule starts at `lr` on the first step and lands on `min_lr` at the
    final step; with zero gradients and zero weight decay a step is a no-op.
    """

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3,
                 weight_decay: float = 0.05, total_steps: int = 1,
                 min_lr: float = 1e-6, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.total_steps = max(int(total_steps), 1)
        self.min_lr = min_lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {n: np.zeros_like(t.value) for n, t in self.params.items()}
        self._v = {n: np.zeros_like(t.value) for n, t in self.params.items()}

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 1:
            return self.lr
        frac = min(step / (self.total_steps - 1), 1.0)
        return float(self.min_lr
                     + 0.5 * (self.lr - self.min_lr) * (1.0 + np.cos(np.pi * frac)))

    def step(self) -> None:
        lr_t = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value = p.value - lr_t * update


# ---------------------------------------------------------------------------
# evaluation

def _logits_from_groups(centers: np.ndarray, groups: np.ndarray,
                        reg: ParamRegistry, cfg: BackboneConfig,
                        strategy: StrategyConfig) -> ad.Tensor:
    tokens = embed_tokens_batch(centers, groups, reg)
    x, roles = forward_tuned_tokens(tokens, reg, cfg, strategy)
    seq = TokenSequence(tokens=x, roles=roles, layer_index=cfg.depth)
    return head_forward(seq, reg, strategy.head_inputs)


def _logits(points: np.ndarray, reg: ParamRegistry, cfg: BackboneConfig,
            strategy: StrategyConfig, batch: int = 64) -> np.ndarray:
    outs = []
    for lo in range(0, points.shape[0], batch):
        seq = forward_tuned_batch(points[lo:lo + batch], reg, cfg, strategy)
        outs.append(head_forward(seq, reg, strategy.head_inputs).value)
    return np.concatenate(outs, axis=0)


def evaluate(reg: ParamRegistry, cfg: BackboneConfig, strategy: StrategyConfig,
             split: DatasetSplit, votes: int = 1, augment_ops=(),
             seed: int = 0, batch: int = 64) -> float:
    """Accuracy on a split; votes > 1 averages logits over augmented passes."""
    if votes < 1:
        raise ValueError("votes must be >= 1")
    strategy = strategy.resolve(cfg)
    if votes == 1:
        logits = _logits(split.points, reg, cfg, strategy, batch)
    else:
        rng = np.random.default_rng(derive_seed(seed, 7))
        total = None
        for _ in range(votes):
            pts = augment_batch(split.points, augment_ops, rng) if augment_ops \
                else split.points
            cur = _logits(pts, reg, cfg, strategy, batch).astype(np.float64)
            total = cur if total is None else total + cur
        logits = total / votes
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == split.labels))


def accuracy_by_submode(reg, cfg, strategy, split: DatasetSplit,
                        batch: int = 64) -> dict[str, float]:
    logits = _logits(split.points, reg, cfg, strategy.resolve(cfg), batch)
    pred = np.argmax(logits, axis=1)
    out = {}
    subs = np.asarray(split.submodes)
    for sm in sorted(set(split.submodes)):
        mask = subs == sm
        out[sm] = float(np.mean(pred[mask] == split.labels[mask]))
    return out


# ---------------------------------------------------------------------------
# tuning

def tune(backbone_values: dict[str, np.ndarray], cfg: BackboneConfig,
         strategy: StrategyConfig, train_split: DatasetSplit,
         test_split: DatasetSplit | None, settings: TrainSettings,
         head_hidden: int = 256) -> tuple[RunMetrics, dict[str, np.ndarray]]:
    """Cross-entropy training of exactly the strategy's trainable set.

    The backbone is loaded from `backbone_values` and, unless the strategy is
    full fine-tuning, byte-verified unchanged after the run. Returns metrics
    plus the trained tunable tensors (never any frozen backbone tensor).
    """
    t0 = time.perf_counter()
    strategy = strategy.resolve(cfg)
    if len(train_split) == 0:
        raise ValueError("empty training split")
    classes = train_split.class_count
    reg = build_model(cfg, strategy, head_hidden, classes,
                      np.random.default_rng(derive_seed(settings.seed, 1)))
    reg.load_values(backbone_values)
    apply_freeze(reg, strategy)
    frozen_names = [n for n, t in reg.items() if not t.requires_grad]
    frozen_snap = reg.snapshot(frozen_names)

    train_loss: list[float] = []
    train_acc: list[float] = []
    test_acc: list[float] = []

    n = len(train_split)
    batches_per_epoch = (n + settings.batch - 1) // settings.batch
    opt = AdamW(reg.trainable_items(), lr=settings.lr,
                weight_decay=settings.weight_decay,
                total_steps=settings.epochs * batches_per_epoch)
    rng_shuffle = np.random.default_rng(derive_seed(settings.seed, 2))
    rng_aug = np.random.default_rng(derive_seed(settings.seed, 3))

    # without augmentation the patching is identical every epoch: group once
    cache = None
    if not settings.augment:
        cache = group_patches_batch(train_split.points, cfg.patches,
                                    cfg.patch_points)
    test_cache = None
    if test_split is not None:
        test_cache = group_patches_batch(test_split.points, cfg.patches,
                                         cfg.patch_points)

    def test_accuracy() -> float:
        preds = []
        for lo in range(0, len(test_split), 64):
            logit = _logits_from_groups(test_cache[0][lo:lo + 64],
                                        test_cache[1][lo:lo + 64],
                                        reg, cfg, strategy)
            preds.append(np.argmax(logit.value, axis=1))
        return float(np.mean(np.concatenate(preds) == test_split.labels))

    if settings.epochs == 0 and test_split is not None:
        test_acc.append(test_accuracy())

    for epoch in range(settings.epochs):
        order = rng_shuffle.permutation(n)
        losses = []
        correct = 0
        for lo in range(0, n, settings.batch):
            idx = order[lo:lo + settings.batch]
            if cache is not None:
                centers, groups = cache[0][idx], cache[1][idx]
            else:
                pts = augment_batch(train_split.points[idx], settings.augment,
                                    rng_aug)
                centers, groups = group_patches_batch(pts, cfg.patches,
                                                      cfg.patch_points)
            labels = train_split.labels[idx]
            logits = _logits_from_groups(centers, groups, reg, cfg, strategy)
            loss = ad.cross_entropy_with_logits(logits, labels)
            reg.zero_grads()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.value))
            correct += int(np.sum(np.argmax(logits.value, axis=1) == labels))
        train_loss.append(float(np.mean(losses)))
        train_acc.append(correct / n)
        if test_split is not None and (epoch % settings.eval_every == 0
                                       or epoch == settings.epochs - 1):
            test_acc.append(test_accuracy())

    if strategy.kind != "full_finetune":
        dirty = reg.changed_since(frozen_snap)
        if dirty:
            raise RuntimeError(f"frozen tensors changed during tuning: {dirty[:3]}")

    tunables = {n: t.value.copy() for n, t in reg.trainable_items().items()}
    metrics = RunMetrics(train_loss=train_loss, train_acc=train_acc,
                         test_acc=test_acc, wall_time=time.perf_counter() - t0,
                         seed=settings.seed, strategy=strategy)
    return metrics, tunables


# ---------------------------------------------------------------------------
# masked-autoencoder pretraining

def _mae_params(reg: ParamRegistry, cfg: BackboneConfig,
                rng: np.random.Generator) -> None:
    reg.add("mae.mask_token", rng.normal(0.0, MASK_TOKEN_SIGMA, size=cfg.dim))
    add_linear(reg, rng, "mae.dec.fc1", cfg.dim, cfg.dim)
    add_linear(reg, rng, "mae.dec.fc2", cfg.dim, cfg.patch_points * 3)


def _chamfer_loss(pred: ad.Tensor, true: ad.Tensor) -> ad.Tensor:
    d = ad.squared_distance_matrix(pred, true)
    min_ab = ad.scale(ad.max_reduce(ad.scale(d, -1.0), axis=2), -1.0)
    min_ba = ad.scale(ad.max_reduce(ad.scale(d, -1.0), axis=1), -1.0)
    m_ab = ad.mean_reduce(ad.mean_reduce(min_ab, 1), 0)
    m_ba = ad.mean_reduce(ad.mean_reduce(min_ba, 1), 0)
    return ad.add(m_ab, m_ba)


def mae_step_loss(reg: ParamRegistry, cfg: BackboneConfig, points: np.ndarray,
                  mask_idx: np.ndarray) -> ad.Tensor:
    """Reconstruction loss for one batch given per-sample masked patch indices.

    Masked patches enter the encoder as (mask token + positional term); their
    encoded outputs are decoded to k x 3 local offsets and scored with a
    symmetric chamfer distance against the true groups.
    """
    from .backbone import (broadcast_token, encode_range, patch_features_batch,
                           pos_encode_batch)

    b = points.shape[0]
    m = cfg.patches
    n_mask = mask_idx.shape[1]
    centers, groups = group_patches_batch(points, m, cfg.patch_points)

    feats = patch_features_batch(groups, reg)
    pos = pos_encode_batch(centers, reg)
    mask = np.zeros((b, m, 1), dtype=reg.dtype)
    np.put_along_axis(mask, mask_idx[:, :, None], 1.0, axis=1)
    keep = ad.constant(1.0 - mask)
    mask_c = ad.constant(mask)
    mask_tok = broadcast_token(ad.reshape(reg["mae.mask_token"], (1, 1, cfg.dim)),
                               b, m, reg.dtype)
    tok = ad.add(ad.add(ad.mul(feats, keep), ad.mul(mask_tok, mask_c)), pos)
    cls = broadcast_token(ad.reshape(reg["backbone.cls"], (1, 1, cfg.dim)),
                          b, 1, reg.dtype)
    x = ad.concat([cls, tok], axis=1)
    x = encode_range(x, reg, cfg, 1, cfg.depth)

    patch_out = ad.slice_axis(x, 1, 1, 1 + m)
    flat = ad.reshape(patch_out, (b * m, cfg.dim))
    flat_idx = (mask_idx + (np.arange(b) * m)[:, None]).reshape(-1)
    masked_out = ad.gather_rows(flat, flat_idx)
    h = ad.gelu(linear(masked_out, reg, "mae.dec.fc1"))
    pred = ad.reshape(linear(h, reg, "mae.dec.fc2"),
                      (b * n_mask, cfg.patch_points, 3))
    true = ad.constant(groups[np.arange(b)[:, None], mask_idx]
                       .reshape(b * n_mask, cfg.patch_points, 3).astype(reg.dtype))
    return _chamfer_loss(pred, true)


def pretrain_mae(cfg: BackboneConfig, points: np.ndarray,
                 settings: PretrainSettings) -> tuple[dict[str, np.ndarray], list[float]]:
    """Masked-patch pretraining; returns backbone tensor values + loss curve."""
    if points.shape[0] == 0:
        raise ValueError("empty pretraining dataset")
    rng_init = np.random.default_rng(derive_seed(settings.seed, 1))
    reg = init_backbone(cfg, rng_init)
    _mae_params(reg, cfg, rng_init)

    n_mask = int(np.ceil(settings.mask_ratio * cfg.patches))
    curve: list[float] = []
    if n_mask == 0 or settings.epochs == 0:
        backbone = {n: t.value.copy() for n, t in reg.items()
                    if n.startswith("backbone.")}
        return backbone, [0.0] * settings.epochs

    n = points.shape[0]
    batches_per_epoch = (n + settings.batch - 1) // settings.batch
    opt = AdamW(reg.trainable_items(), lr=settings.lr,
                weight_decay=settings.weight_decay,
                total_steps=settings.epochs * batches_per_epoch)
    rng_shuffle = np.random.default_rng(derive_seed(settings.seed, 2))
    rng_mask = np.random.default_rng(derive_seed(settings.seed, 4))

    for _ in range(settings.epochs):
        order = rng_shuffle.permutation(n)
        losses = []
        for lo in range(0, n, settings.batch):
            idx = order[lo:lo + settings.batch]
            pts = points[idx]
            scores = rng_mask.random((pts.shape[0], cfg.patches))
            mask_idx = np.argsort(scores, axis=1)[:, :n_mask]
            loss = mae_step_loss(reg, cfg, pts, mask_idx)
            reg.zero_grads()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.value))
        curve.append(float(np.mean(losses)))

    backbone = {n: t.value.copy() for n, t in reg.items()
                if n.startswith("backbone.")}
    return backbone, curve


# ---------------------------------------------------------------------------
# few-shot episodes

def few_shot_run(backbone_values: dict[str, np.ndarray], cfg: BackboneConfig,
                 strategy: StrategyConfig, pool: DatasetSplit, n_way: int,
                 m_shot: int, queries: int, episodes: int, seed: int,
                 settings: TrainSettings, head_hidden: int = 256) -> dict:
    """n-way m-shot episodes: tune on supports, score on queries.

    Returns per-episode accuracies with their mean and (population) standard
    deviation.
    """
    accs = []
    for ep in range(episodes):
        rng = np.random.default_rng(derive_seed(seed, 100 + ep))
        sup_idx, qry_idx = few_shot_split(pool.labels, n_way, m_shot, queries, rng)
        chosen = np.unique(pool.labels[sup_idx])
        remap = {int(c): i for i, c in enumerate(chosen)}

        def episode_split(idx):
            return DatasetSplit(
                points=pool.points[idx],
                labels=np.array([remap[int(c)] for c in pool.labels[idx]],
                                dtype=np.int64),
                submodes=[pool.submodes[i] for i in idx],
                class_count=n_way)

        ep_settings = replace(settings, seed=derive_seed(settings.seed, 200 + ep))
        metrics, _ = tune(backbone_values, cfg, strategy, episode_split(sup_idx),
                          episode_split(qry_idx), ep_settings, head_hidden)
        accs.append(metrics.test_acc[-1])
    arr = np.asarray(accs)
    return {"episode_acc": accs, "mean": float(arr.mean()),
            "std": float(arr.std())}
