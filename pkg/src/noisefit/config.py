"""INI run configuration: ``[model] [noise] [loss] [train] [run]`` sections.

Every key maps onto a field of the matching config dataclass.  Unknown
sections or keys are rejected, and ``to_ini`` writes every field (defaults
included) so a run directory carries the complete configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .noise import NoiseConfig
from .objective import LossConfig
from .trainer import TrainConfig

BUILTIN_DATASET = "builtin:copy"


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: str = BUILTIN_DATASET
    test_dataset: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)),
                                   train=dataclasses.replace(self.train, seed=int(seed)))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if not (name == "train" and f.name == "seed")}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = {"model": ModelConfig, "noise": NoiseConfig, "loss": LossConfig, "train": TrainConfig,
            "run": RunSection}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, raw: str, where: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None
    return text


def _field_kind(cls, f) -> type:
    default = f.default if f.default is not dataclasses.MISSING else None
    for kind in (bool, int, float, tuple):
        if isinstance(default, kind):
            return kind
    return str


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}; expected {sorted(SECTIONS)}")
    built = {}
    for name, cls in SECTIONS.items():
        known = {f.name: f for f in dataclasses.fields(cls)}
        if name == "train":
            known.pop("seed")  # the seed lives in [run]
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _parse(_field_kind(cls, known[key]), raw, f"{source} [{name}] {key}")
        built[name] = cls(**values)
    built["train"] = dataclasses.replace(built["train"], seed=built["run"].seed)
    return RunConfig(**built)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
