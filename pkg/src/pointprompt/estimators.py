"""scikit-learn style wrappers so the lab composes with the wider ecosystem.

`PromptTunedPointClassifier` is fit/predict-shaped: fit() adapts a (given or
freshly pretrained) frozen backbone to the labels with the configured tuning
strategy; predict() runs the tuned model. `MaskedPatchEmbedder` is
fit/transform-shaped: fit() pretrains the backbone on unlabeled clouds and
transform() returns CLS features for downstream tabular pipelines.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .backbone import BackboneConfig, forward_plain_batch, init_backbone
from .data import DatasetSplit
from .prompting import StrategyConfig
from .training import (PretrainSettings, TrainSettings, _logits, assemble_model,
                       derive_seed, pretrain_mae, tune)


def check_point_clouds(X, min_points: int = 16) -> np.ndarray:
    """Validate and coerce input to a float32 (n, M, 3) stack.

    Accepts (n, M, 3) arrays or flattened (n, 3*M) tabular arrays, so the
    estimators survive sklearn utilities that insist on 2-D X.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        if arr.shape[1] % 3 != 0:
            raise ValueError(f"2-D input must have 3*M columns, got {arr.shape[1]}")
        arr = arr.reshape(arr.shape[0], arr.shape[1] // 3, 3)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (n, M, 3) point clouds, got shape {arr.shape}")
    if arr.shape[1] < min_points:
        raise ValueError(f"clouds need at least {min_points} points, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ValueError("point clouds contain non-finite values")
    return arr


class PromptTunedPointClassifier(BaseEstimator, ClassifierMixin):
    """Point-cloud classifier tuned with a parameter-efficient strategy.

    Without `backbone_values`, fit() first self-pretrains the backbone with
    masked-patch reconstruction for `pretrain_epochs` (0 keeps random weights).
    """

    def __init__(self, strategy="idpt", generator="edgeconv3", prompt_count=1,
                 insert_layers=None, head_inputs=None, depth=4, dim=64, heads=4,
                 ffn_mult=4, patches=16, patch_points=16, head_hidden=256,
                 epochs=30, lr=1e-3, weight_decay=0.05, batch_size=32,
                 augment=(), pretrain_epochs=0, mask_ratio=0.6, seed=0,
                 backbone_values=None):
        self.strategy = strategy
        self.generator = generator
        self.prompt_count = prompt_count
        self.insert_layers = insert_layers
        self.head_inputs = head_inputs
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.patches = patches
        self.patch_points = patch_points
        self.head_hidden = head_hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.pretrain_epochs = pretrain_epochs
        self.mask_ratio = mask_ratio
        self.seed = seed
        self.backbone_values = backbone_values

    def _configs(self):
        bb = BackboneConfig(depth=self.depth, dim=self.dim, heads=self.heads,
                            ffn_mult=self.ffn_mult, patches=self.patches,
                            patch_points=self.patch_points)
        st = StrategyConfig(
            kind=self.strategy, generator=self.generator,
            prompt_count=self.prompt_count,
            insert_layers=tuple(self.insert_layers) if self.insert_layers else None,
            head_inputs=tuple(self.head_inputs) if self.head_inputs else None,
        ).resolve(bb)
        return bb, st

    def fit(self, X, y):
        pts = check_point_clouds(X, min_points=self.patch_points)
        y = np.asarray(y)
        if y.shape[0] != pts.shape[0]:
            raise ValueError(f"{y.shape[0]} labels for {pts.shape[0]} clouds")
        bb, st = self._configs()
        self.classes_ = np.unique(y)
        label_of = {c: i for i, c in enumerate(self.classes_.tolist())}
        labels = np.array([label_of[c] for c in y.tolist()], dtype=np.int64)

        if self.backbone_values is not None:
            backbone = self.backbone_values
        elif self.pretrain_epochs > 0:
            backbone, _ = pretrain_mae(bb, pts, PretrainSettings(
                epochs=self.pretrain_epochs, mask_ratio=self.mask_ratio,
                batch=self.batch_size, seed=self.seed))
        else:
            reg = init_backbone(bb, np.random.default_rng(derive_seed(self.seed, 1)))
            backbone = {n: t.value.copy() for n, t in reg.items()}

        split = DatasetSplit(points=pts, labels=labels,
                             submodes=["clean"] * pts.shape[0],
                             class_count=len(self.classes_))
        settings = TrainSettings(epochs=self.epochs, lr=self.lr,
                                 weight_decay=self.weight_decay,
                                 batch=self.batch_size, seed=self.seed,
                                 augment=tuple(self.augment))
        _, tunables = tune(backbone, bb, st, split, None, settings,
                           head_hidden=self.head_hidden)
        self.backbone_cfg_ = bb
        self.strategy_cfg_ = st
        self.model_ = assemble_model(bb, st, self.head_hidden,
                                     len(self.classes_), backbone, tunables,
                                     seed=self.seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before predict()")

    def decision_function(self, X):
        self._check_fitted()
        pts = check_point_clouds(X, min_points=self.patch_points)
        return _logits(pts, self.model_, self.backbone_cfg_, self.strategy_cfg_)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]


class MaskedPatchEmbedder(BaseEstimator, TransformerMixin):
    """Self-supervised cloud embedder: masked-patch pretraining, CLS features out."""

    def __init__(self, depth=4, dim=64, heads=4, ffn_mult=4, patches=16,
                 patch_points=16, epochs=30, mask_ratio=0.6, lr=1e-3,
                 batch_size=32, seed=0):
        self.depth = depth
        self.dim = dim
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.patches = patches
        self.patch_points = patch_points
        self.epochs = epochs
        self.mask_ratio = mask_ratio
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        pts = check_point_clouds(X, min_points=self.patch_points)
        bb = BackboneConfig(depth=self.depth, dim=self.dim, heads=self.heads,
                            ffn_mult=self.ffn_mult, patches=self.patches,
                            patch_points=self.patch_points)
        values, curve = pretrain_mae(bb, pts, PretrainSettings(
            epochs=self.epochs, lr=self.lr, mask_ratio=self.mask_ratio,
            batch=self.batch_size, seed=self.seed))
        self.backbone_cfg_ = bb
        self.loss_curve_ = curve
        reg = init_backbone(bb, np.random.default_rng(derive_seed(self.seed, 1)))
        reg.load_values(values)
        reg.set_trainable(lambda n: False)
        self.model_ = reg
        return self

    def transform(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before transform()")
        pts = check_point_clouds(X, min_points=self.patch_points)
        out = []
        for lo in range(0, pts.shape[0], self.batch_size):
            seq = forward_plain_batch(pts[lo:lo + self.batch_size],
                                      self.model_, self.backbone_cfg_)
            out.append(seq.tokens.value[:, 0, :])
        return np.concatenate(out, axis=0)
