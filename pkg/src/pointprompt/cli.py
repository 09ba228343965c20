"""Command-line surface: dataset generation, pretraining, tuning, evaluation,
few-shot episodes, parameter accounting and embedding export.

Exit codes: 0 on success, 1 for usage/config errors, 2 for runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config, render_config
from .data import build_dataset, load_split
from .export import export_embeddings
from .prompting import StrategyConfig, count_trainable
from .training import (PretrainSettings, TrainSettings, accuracy_by_submode,
                       assemble_model, evaluate, few_shot_run, pretrain_mae, tune)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pointprompt",
                     description="Parameter-efficient prompt tuning lab for "
                                 "point-cloud transformers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("gen-data", "generate the synthetic dataset"),
        ("pretrain", "masked-patch pretraining of the backbone"),
        ("tune", "tune a strategy on a frozen (or full) backbone"),
        ("eval", "evaluate a tuned model, optionally with voting"),
        ("few-shot", "episodic n-way m-shot evaluation"),
        ("count-params", "trainable parameter accounting"),
        ("export-embeddings", "dump per-token features to CSV"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", type=str, default=None,
                       help="flat section.key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=None,
                       help="shorthand for --set run.seed=N")
        p.add_argument("--threads", type=int, default=None,
                       help="shorthand for --set run.threads=N")
    return parser


def _load_config(args) -> RunConfig:
    text = ""
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        text = path.read_text(encoding="utf-8")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    return parse_config(text, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(cfg: RunConfig) -> Path:
    if not cfg.data.dir:
        raise ConfigError(["data.dir must point at a generated dataset"])
    return Path(cfg.data.dir)


def _load_backbone(cfg: RunConfig):
    if not cfg.train.backbone:
        raise ConfigError(["train.backbone must point at a backbone checkpoint"])
    ckpt = load_checkpoint(cfg.train.backbone)
    if ckpt.role != "backbone":
        raise CheckpointError(f"{cfg.train.backbone} has role {ckpt.role!r}, "
                              "expected 'backbone'")
    return ckpt


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _print_table(header: list[str], rows: list[list]) -> None:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    line = "  ".join(str(h).ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands

def _cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    spec = cfg.data.to_spec(cfg.run.seed)
    rows = build_dataset(spec, out)
    counts = {}
    for r in rows:
        counts[(r.class_id, r.submode, r.split)] = \
            counts.get((r.class_id, r.submode, r.split), 0) + 1
    table = [[cid, sm, sp, n] for (cid, sm, sp), n in sorted(counts.items())]
    _print_table(["class", "submode", "split", "count"], table)
    print(f"wrote {len(rows)} clouds under {out}")
    return 0


def _cmd_pretrain(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    split = load_split(_dataset_dir(cfg), "train")
    settings = PretrainSettings(epochs=cfg.train.pretrain_epochs,
                                lr=cfg.train.pretrain_lr,
                                weight_decay=cfg.train.weight_decay,
                                batch=cfg.train.batch,
                                mask_ratio=cfg.train.mask_ratio,
                                seed=cfg.run.seed)
    values, curve = pretrain_mae(cfg.backbone, split.points, settings)
    ckpt_path = out / "backbone.ckpt"
    save_checkpoint(ckpt_path, "backbone", values, render_config(cfg))
    _write_csv(out / "pretrain_loss.csv", ["epoch", "loss"],
               [[i, _fmt(v)] for i, v in enumerate(curve)])
    _print_table(["epoch", "loss"],
                 [[i, f"{v:.5f}"] for i, v in enumerate(curve)])
    print(f"saved {ckpt_path}")
    return 0


def _tune_settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(epochs=cfg.train.epochs, lr=cfg.train.lr,
                         weight_decay=cfg.train.weight_decay,
                         batch=cfg.train.batch, seed=cfg.run.seed,
                         augment=tuple(cfg.train.augment),
                         eval_every=cfg.train.eval_every)


def _cmd_tune(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    data_dir = _dataset_dir(cfg)
    train_split = load_split(data_dir, "train")
    test_split = load_split(data_dir, "test")
    backbone = _load_backbone(cfg)
    metrics, tunables = tune(backbone.tensors, cfg.backbone, cfg.strategy,
                             train_split, test_split, _tune_settings(cfg),
                             head_hidden=cfg.train.head_hidden)
    ckpt_path = out / "tunables.ckpt"
    save_checkpoint(ckpt_path, "tunables", tunables, render_config(cfg))
    rows = [[e, _fmt(l), _fmt(a), _fmt(t)] for e, (l, a, t) in
            enumerate(zip(metrics.train_loss, metrics.train_acc, metrics.test_acc))]
    _write_csv(out / "metrics.csv", ["epoch", "train_loss", "train_acc", "test_acc"],
               rows)
    _print_table(["epoch", "train_loss", "train_acc", "test_acc"],
                 [[e, f"{l:.4f}", f"{a:.4f}", f"{t:.4f}"] for e, (l, a, t) in
                  enumerate(zip(metrics.train_loss, metrics.train_acc,
                                metrics.test_acc))])
    print(f"wall time: {metrics.wall_time:.1f}s")
    print(f"saved {ckpt_path}")
    return 0


def _assemble_from_cfg(cfg: RunConfig, classes: int):
    backbone = _load_backbone(cfg)
    tunables = None
    if cfg.train.tunables:
        ck = load_checkpoint(cfg.train.tunables)
        if ck.role != "tunables":
            raise CheckpointError(f"{cfg.train.tunables} has role {ck.role!r}, "
                                  "expected 'tunables'")
        tunables = ck.tensors
    return assemble_model(cfg.backbone, cfg.strategy, cfg.train.head_hidden,
                          classes, backbone.tensors, tunables, seed=cfg.run.seed)


def _cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    split = load_split(_dataset_dir(cfg), "test")
    reg = _assemble_from_cfg(cfg, split.class_count)
    acc = evaluate(reg, cfg.backbone, cfg.strategy, split, votes=cfg.eval.votes,
                   augment_ops=tuple(cfg.train.augment), seed=cfg.run.seed)
    per_sub = accuracy_by_submode(reg, cfg.backbone, cfg.strategy, split)
    rows = [["overall", _fmt(acc)]] + [[k, _fmt(v)] for k, v in per_sub.items()]
    _write_csv(out / "eval.csv", ["subset", "accuracy"], rows)
    _print_table(["subset", "accuracy"],
                 [[k, f"{float(v):.4f}"] for k, v in
                  [("overall", acc)] + list(per_sub.items())])
    return 0


def _cmd_few_shot(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    pool = load_split(_dataset_dir(cfg), "all")
    backbone = _load_backbone(cfg)
    settings = _tune_settings(cfg)
    settings = TrainSettings(epochs=cfg.fewshot.epochs, lr=settings.lr,
                             weight_decay=settings.weight_decay,
                             batch=settings.batch, seed=settings.seed,
                             augment=settings.augment,
                             eval_every=max(cfg.fewshot.epochs, 1))
    result = few_shot_run(backbone.tensors, cfg.backbone, cfg.strategy, pool,
                          cfg.fewshot.n_way, cfg.fewshot.m_shot,
                          cfg.fewshot.queries, cfg.fewshot.episodes,
                          cfg.run.seed, settings,
                          head_hidden=cfg.train.head_hidden)
    rows = [[i, _fmt(a)] for i, a in enumerate(result["episode_acc"])]
    rows.append(["mean", _fmt(result["mean"])])
    rows.append(["std", _fmt(result["std"])])
    _write_csv(out / "fewshot.csv", ["episode", "accuracy"], rows)
    _print_table(["episode", "accuracy"],
                 [[i, f"{a:.4f}"] for i, a in enumerate(result["episode_acc"])])
    print(f"{cfg.fewshot.n_way}-way {cfg.fewshot.m_shot}-shot: "
          f"{100 * result['mean']:.2f} +- {100 * result['std']:.2f}")
    return 0


def _cmd_count_params(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    classes = len(cfg.data.classes)
    breakdown = count_trainable(cfg.strategy, cfg.backbone,
                                head_hidden=cfg.train.head_hidden,
                                classes=classes)
    rows = [[k, v if isinstance(v, int) else _fmt(v)]
            for k, v in breakdown.items()]
    _write_csv(out / "params.csv", ["field", "value"], rows)
    show = [[k, f"{v:,}" if isinstance(v, int) else f"{100 * v:.2f}%"]
            for k, v in breakdown.items()]
    _print_table(["field", "value"], show)
    return 0


def _cmd_export(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    split = load_split(_dataset_dir(cfg), cfg.export.split)
    reg = _assemble_from_cfg(cfg, split.class_count)
    path = out / "embeddings.csv"
    n = export_embeddings(reg, cfg.backbone, cfg.strategy, split,
                          cfg.export.tap, path, limit=cfg.export.limit)
    print(f"wrote {n} rows to {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "tune": _cmd_tune,
    "eval": _cmd_eval,
    "few-shot": _cmd_few_shot,
    "count-params": _cmd_count_params,
    "export-embeddings": _cmd_export,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cfg.run.threads):
            return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
