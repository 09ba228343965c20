"""Run configuration: flat ``section.key = value`` text with full validation.

Parsing is total: any input produces either a RunConfig or a ConfigError
carrying every problem found (unknown keys, type errors, bound violations,
cross-field inconsistencies), each tagged with its source line. `render`
emits the canonical form; render(parse(t)) reparses to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .data import SHAPE_KINDS, SUBMODES, DatasetSpec
from .geometry import AUGMENT_OPS
from .prompting import GENERATORS, HEAD_INPUT_ORDER, STRATEGY_KINDS, StrategyConfig


class ConfigError(Exception):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1


@dataclass
class DataSection:
    classes: tuple[str, ...] = SHAPE_KINDS
    per_class: int = 40
    points: int = 128
    submodes: tuple[str, ...] = SUBMODES
    train_frac: float = 0.8
    dir: str = ""

    def to_spec(self, seed: int) -> DatasetSpec:
        return DatasetSpec(classes=self.classes, per_class=self.per_class,
                           points=self.points, submodes=self.submodes,
                           train_frac=self.train_frac, seed=seed)


@dataclass
class TrainSection:
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch: int = 32
    mask_ratio: float = 0.6
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    augment: tuple[str, ...] = ("scale", "translate")
    head_hidden: int = 256
    eval_every: int = 1
    backbone: str = ""
    tunables: str = ""


@dataclass
class EvalSection:
    votes: int = 1


@dataclass
class FewShotSection:
    n_way: int = 5
    m_shot: int = 10
    queries: int = 20
    episodes: int = 5
    epochs: int = 40


@dataclass
class ExportSection:
    tap: str = "output_n"
    split: str = "test"
    limit: int = 0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    fewshot: FewShotSection = field(default_factory=FewShotSection)
    export: ExportSection = field(default_factory=ExportSection)


# key -> (type tag, default, extra)
# type tags: int, float, bool, str, choice, str_list, int_list
_SCHEMA: dict[str, tuple] = {
    "run.seed": ("int", 0, {"min": 0}),
    "run.out_dir": ("str", "out", {}),
    "run.threads": ("int", 1, {"min": 1}),
    "backbone.depth": ("int", 4, {"min": 2}),
    "backbone.dim": ("int", 64, {"min": 2}),
    "backbone.heads": ("int", 4, {"min": 1}),
    "backbone.ffn_mult": ("int", 4, {"min": 1}),
    "backbone.patches": ("int", 16, {"min": 1}),
    "backbone.patch_points": ("int", 16, {"min": 1}),
    "strategy.kind": ("choice", "idpt", {"choices": STRATEGY_KINDS}),
    "strategy.generator": ("choice", "edgeconv3", {"choices": GENERATORS}),
    "strategy.prompt_count": ("int", 1, {"min": 1}),
    "strategy.insert_layers": ("int_list", (), {"min": 1}),
    "strategy.sharing": ("choice", "shared", {"choices": ("shared", "independent")}),
    "strategy.knn_k": ("int", 0, {"min": 0}),
    "strategy.head_inputs": ("str_list", (), {"choices": HEAD_INPUT_ORDER}),
    "data.classes": ("str_list", SHAPE_KINDS, {"choices": SHAPE_KINDS}),
    "data.per_class": ("int", 40, {"min": 1}),
    "data.points": ("int", 128, {"min": 16}),
    "data.submodes": ("str_list", SUBMODES, {"choices": SUBMODES}),
    "data.train_frac": ("float", 0.8, {"gt": 0.0, "lt": 1.0}),
    "data.dir": ("str", "", {}),
    "train.epochs": ("int", 50, {"min": 0}),
    "train.lr": ("float", 1e-3, {"gt": 0.0}),
    "train.weight_decay": ("float", 0.05, {"min": 0.0}),
    "train.batch": ("int", 32, {"min": 1}),
    "train.mask_ratio": ("float", 0.6, {"min": 0.0, "max": 1.0}),
    "train.pretrain_epochs": ("int", 30, {"min": 0}),
    "train.pretrain_lr": ("float", 1e-3, {"gt": 0.0}),
    "train.augment": ("str_list", ("scale", "translate"), {"choices": AUGMENT_OPS}),
    "train.head_hidden": ("int", 256, {"min": 1}),
    "train.eval_every": ("int", 1, {"min": 1}),
    "train.backbone": ("str", "", {}),
    "train.tunables": ("str", "", {}),
    "eval.votes": ("int", 1, {"min": 1}),
    "fewshot.n_way": ("int", 5, {"min": 1}),
    "fewshot.m_shot": ("int", 10, {"min": 1}),
    "fewshot.queries": ("int", 20, {"min": 1}),
    "fewshot.episodes": ("int", 5, {"min": 1}),
    "fewshot.epochs": ("int", 40, {"min": 0}),
    "export.tap": ("choice", "output_n", {"choices": ("input_n", "output_n")}),
    "export.split": ("choice", "test", {"choices": ("train", "test", "all")}),
    "export.limit": ("int", 0, {"min": 0}),
}


def _convert(key: str, raw: str, where: str, errors: list[str]):
    tag, default, extra = _SCHEMA[key]
    raw = raw.strip()
    try:
        if tag == "int":
            val = int(raw)
            if "min" in extra and val < extra["min"]:
                raise ValueError(f"must be >= {extra['min']}")
            return val
        if tag == "float":
            val = float(raw)
            if "min" in extra and val < extra["min"]:
                raise ValueError(f"must be >= {extra['min']}")
            if "max" in extra and val > extra["max"]:
                raise ValueError(f"must be <= {extra['max']}")
            if "gt" in extra and val <= extra["gt"]:
                raise ValueError(f"must be > {extra['gt']}")
            if "lt" in extra and val >= extra["lt"]:
                raise ValueError(f"must be < {extra['lt']}")
            return val
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if tag == "str":
            return raw
        if tag == "choice":
            if raw not in extra["choices"]:
                raise ValueError(f"must be one of {', '.join(extra['choices'])}")
            return raw
        if tag == "str_list":
            items = tuple(s.strip() for s in raw.split(",") if s.strip())
            bad = [s for s in items if s not in extra["choices"]]
            if bad:
                raise ValueError(f"unknown values {bad}; allowed: "
                                 f"{', '.join(extra['choices'])}")
            return items
        # int_list
        items = tuple(int(s.strip()) for s in raw.split(",") if s.strip())
        if "min" in extra and any(v < extra["min"] for v in items):
            raise ValueError(f"entries must be >= {extra['min']}")
        return items
    except ValueError as exc:
        errors.append(f"{where}: {key}: {exc}")
        return default


def parse_config(text: str, overrides: list[str] = ()) -> RunConfig:
    """Parse config text plus ``key=value`` overrides into a validated RunConfig.

    Raises ConfigError listing every problem (not just the first).
    """
    errors: list[str] = []
    pending: dict[str, tuple[str, str]] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'section.key = value', "
                          f"got {stripped!r}")
            continue
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _SCHEMA:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        pending[key] = (raw, f"line {lineno}")

    for i, ov in enumerate(overrides, start=1):
        if "=" not in ov:
            errors.append(f"--set #{i}: expected key=value, got {ov!r}")
            continue
        key, raw = (s.strip() for s in ov.split("=", 1))
        if key not in _SCHEMA:
            errors.append(f"--set #{i}: unknown key {key!r}")
            continue
        pending[key] = (raw, f"--set #{i}")

    values = {}
    where_of = {}
    for key, (tag, default, _extra) in _SCHEMA.items():
        if key in pending:
            raw, where = pending[key]
            values[key] = _convert(key, raw, where, errors)
            where_of[key] = where
        else:
            values[key] = default

    def sect(name: str) -> dict:
        plen = len(name) + 1
        return {k[plen:]: v for k, v in values.items() if k.startswith(name + ".")}

    cfg = RunConfig()
    try:
        cfg.run = RunSection(**sect("run"))
    except ValueError as exc:
        errors.append(f"run: {exc}")
    backbone_ok = strategy_ok = True
    try:
        cfg.backbone = BackboneConfig(**sect("backbone"))
    except ValueError as exc:
        errors.append(f"{where_of.get('backbone.dim', 'backbone')}: {exc}")
        backbone_ok = False
    try:
        s = sect("strategy")
        s["insert_layers"] = s["insert_layers"] or None
        s["head_inputs"] = s["head_inputs"] or None
        cfg.strategy = StrategyConfig(**s)
    except ValueError as exc:
        errors.append(f"{where_of.get('strategy.kind', 'strategy')}: {exc}")
        strategy_ok = False
    try:
        d = sect("data")
        DatasetSpec(classes=d["classes"], per_class=d["per_class"],
                    points=d["points"], submodes=d["submodes"],
                    train_frac=d["train_frac"], seed=0)
        cfg.data = DataSection(**d)
    except ValueError as exc:
        errors.append(f"{where_of.get('data.classes', 'data')}: {exc}")
    cfg.train = TrainSection(**sect("train"))
    cfg.eval = EvalSection(**sect("eval"))
    cfg.fewshot = FewShotSection(**sect("fewshot"))
    cfg.export = ExportSection(**sect("export"))

    if backbone_ok and strategy_ok:
        try:
            cfg.strategy.resolve(cfg.backbone)
        except ValueError as exc:
            errors.append(f"{where_of.get('strategy.insert_layers', 'strategy')}: {exc}")

    if errors:
        raise ConfigError(errors)
    return cfg


def _format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (tuple, list)):
        return ",".join(str(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form covering every key, in schema order."""
    sections = {
        "run": cfg.run, "backbone": cfg.backbone, "strategy": cfg.strategy,
        "data": cfg.data, "train": cfg.train, "eval": cfg.eval,
        "fewshot": cfg.fewshot, "export": cfg.export,
    }
    lines = []
    last_section = None
    for key in _SCHEMA:
        section, attr = key.split(".", 1)
        if section != last_section:
            if last_section is not None:
                lines.append("")
            last_section = section
        val = getattr(sections[section], attr)
        if val is None:
            val = ()
        lines.append(f"{key} = {_format_value(val)}")
    return "\n".join(lines) + "\n"
