"""Run configuration: one INI document with task, model, train, eval and path sections."""

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from tsm.data import TaskSpec
from tsm.training import TrainConfig


@dataclass
class ModelSection:
    """Head settings that do not come from the data (features/classes do)."""

    frames: int = 64
    widths: tuple = (16, 32, 32)
    attention_widths: tuple = (8, 8)
    attention: str = "a012"
    kernel: int = 5
    dropout: float = 0.0
    seed: int = 0


@dataclass
class EvalSection:
    frames: int = 0  # 0: native density
    sweep: tuple = (8, 16, 32, 64)
    split: str = "test"
    fusion_weights: tuple = (0.5, 0.5)
    viz_items: int = 4
    viz_class: int = -1  # -1: predicted class


@dataclass
class PathSection:
    dataset: str = None
    dataset_b: str = None
    checkpoint: str = None
    checkpoint_b: str = None
    out: str = None


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathSection = field(default_factory=PathSection)

    SECTIONS = ("task", "model", "train", "eval", "paths")

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in self.SECTIONS}

    def hash(self):
        """Digest of every setting except paths, so outputs can be traced to it."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _convert(raw, default, name):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
    if default is None or isinstance(default, str):
        return raw.strip()
    raise TypeError(f"cannot parse setting {name}")


def _build(cls, values, section):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        default = getattr(defaults, key)
        try:
            kwargs[key] = _convert(raw, default, f"{section}.{key}")
        except ValueError:
            raise ValueError(f"bad value for {section}.{key}: {raw!r}") from None
    return cls(**kwargs)


SECTION_TYPES = {
    "task": TaskSpec,
    "model": ModelSection,
    "train": TrainConfig,
    "eval": EvalSection,
    "paths": PathSection,
}


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    unknown = set(parser.sections()) - set(SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTION_TYPES.items():
        values = dict(parser[name]) if parser.has_section(name) else {}
        parts[name] = _build(cls, values, name)
    return RunConfig(**parts)


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    """INI text that :func:`parse_config` reads back to an equal config."""
    lines = []
    for name in RunConfig.SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
