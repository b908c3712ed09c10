"""Flat ``section.key = value`` configuration files.

Every ModelConfig / MaskConfig / TrainConfig field is addressable, plus the
``corpus.*`` and ``finetune.*`` settings used by the CLI.  Unknown keys are
errors.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace

from posmask.masking import MaskConfig
from posmask.model import ModelConfig
from posmask.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    grid: int = 1000
    min_bytes: int = 1800
    max_len: int = 512
    tokenizer: str = "wordpiece"
    lowercase: bool = True


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    runs: int = 5
    seed: int = 0
    learning_rate: float = 5e-5
    batch_size: int = 25
    include_other: bool = True
    match: str = "exact"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    explicit: frozenset = frozenset()

    def to_flat(self):
        out = {}
        for section in ("model", "mask", "train", "corpus", "finetune"):
            for k, v in asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out

    def to_text(self):
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self.to_flat().items()))


_SECTIONS = {
    "model": ModelConfig,
    "mask": MaskConfig,
    "train": TrainConfig,
    "corpus": CorpusConfig,
    "finetune": FinetuneConfig,
}


def _parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("'\"")


def parse_flat(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw)
    return values


def _coerce(cls, name, value):
    typ = {f.name: f.type for f in fields(cls)}[name]
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if typ == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {name} (expected {typ})") from None


def build_config(values):
    """RunConfig from a flat ``{"section.key": value}`` mapping."""
    per = {s: {} for s in _SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)}:
            raise ConfigError(f"unknown config key {key!r}")
        per[section][name] = _coerce(cls, name, value)

    variant = per["mask"].get("variant", per["model"].get("pm_variant", "none"))
    if per["model"].get("pm_variant", variant) != variant:
        raise ConfigError("mask.variant and model.pm_variant disagree")
    per["mask"]["variant"] = variant
    per["model"]["pm_variant"] = variant
    if variant != "none":
        per["model"].setdefault("use_height_width", False)
    if "grid" in per["corpus"]:
        per["model"].setdefault("grid_max", per["corpus"]["grid"])
    try:
        built = {s: cls(**per[s]) for s, cls in _SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**built, explicit=frozenset(values))


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return build_config(parse_flat(fh.read()))


def with_overrides(cfg, **sections):
    """Replace fields section-wise, e.g. ``with_overrides(cfg, train={"seed": 3})``."""
    values = cfg.to_flat()
    for section, kv in sections.items():
        for k, v in kv.items():
            values[f"{section}.{k}"] = v
    out = build_config(values)
    return replace(out, explicit=cfg.explicit | {f"{s}.{k}" for s, kv in sections.items() for k in kv})
