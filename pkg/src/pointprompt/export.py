"""CSV export of per-token features for external visualization (t-SNE, PCA)."""

from __future__ import annotations

import csv
from pathlib import Path

from .backbone import BackboneConfig
from .data import DatasetSplit
from .params import ParamRegistry
from .prompting import StrategyConfig, forward_tuned_batch


def export_embeddings(reg: ParamRegistry, cfg: BackboneConfig,
                      strategy: StrategyConfig, split: DatasetSplit,
                      tap: str, path, limit: int = 0, batch: int = 64) -> int:
    """Write one CSV row per (sample, token) at the chosen tap point.

    tap is "input_n" (tokens entering the last encoder layer, prompts included)
    or "output_n" (tokens leaving it). Returns the number of data rows written.
    """
    strategy = strategy.resolve(cfg)
    n = len(split) if limit == 0 else min(limit, len(split))
    rows = 0
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        dim = cfg.dim
        writer.writerow(["sample_id", "class", "submode", "role"]
                        + [f"f{i}" for i in range(dim)])
        for lo in range(0, n, batch):
            pts = split.points[lo:lo + batch]
            seq = forward_tuned_batch(pts, reg, cfg, strategy, tap=tap)
            toks = seq.tokens.value
            for bi in range(toks.shape[0]):
                sample = lo + bi
                for ti, role in enumerate(seq.roles):
                    writer.writerow([sample, int(split.labels[sample]),
                                     split.submodes[sample], role.value]
                                    + [repr(float(v)) for v in toks[bi, ti]])
                    rows += 1
    return rows
