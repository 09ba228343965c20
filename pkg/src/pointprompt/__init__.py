"""Parameter-efficient prompt tuning for miniature point-cloud transformers."""

from .autodiff import OpKind, Tensor, backward, finite_diff_check, forward, tensor
from .backbone import BackboneConfig, Role, TokenSequence, forward_plain
from .data import DatasetSpec, build_dataset, corrupt, generate_shape
from .estimators import MaskedPatchEmbedder, PromptTunedPointClassifier
from .geometry import (PatchSet, PointCloud, augment, chamfer,
                       farthest_point_sample, group_patches, knn)
from .prompting import StrategyConfig, count_trainable, forward_tuned, generate_prompt
from .training import evaluate, few_shot_run, head_forward, pretrain_mae, tune

__version__ = "0.1.0"

__all__ = [
    "OpKind", "Tensor", "forward", "backward", "finite_diff_check", "tensor",
    "BackboneConfig", "Role", "TokenSequence", "forward_plain",
    "PointCloud", "PatchSet", "farthest_point_sample", "knn", "group_patches",
    "chamfer", "augment",
    "StrategyConfig", "generate_prompt", "forward_tuned", "count_trainable",
    "head_forward", "pretrain_mae", "tune", "evaluate", "few_shot_run",
    "DatasetSpec", "generate_shape", "corrupt", "build_dataset",
    "PromptTunedPointClassifier", "MaskedPatchEmbedder",
]
