"""JSON run configuration with path-qualified validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .data import SYNTHETIC, Corpus, build_corpus, load_corpus
from .model import ModelConfig
from .routing import ConfigError
from .training import TrainerConfig

_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,), "None": (type(None),),
          "list": (list,)}


def _check_types(section: str, cls, d: dict) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown key")
        allowed: tuple = ()
        for part in str(known[key].type).split("|"):
            allowed += _TYPES.get(part.strip().split("[")[0], ())
        ok = isinstance(value, allowed) and not (isinstance(value, bool) and bool not in allowed)
        if allowed and not ok:
            raise ConfigError(f"{section}.{key}: expected {known[key].type}, got {value!r}")
        out[key] = value
    return out


@dataclass
class DataConfig:
    path: str | None = None
    synthetic: str | None = "wiki"
    synthetic_bytes: int = 1_000_000
    synthetic_seed: int = 0
    max_bytes: int | None = 1_000_000
    fractions: list = field(default_factory=lambda: [0.9, 0.05, 0.05])

    def validate(self) -> None:
        if self.path is None and self.synthetic is None:
            raise ConfigError("data: set either data.path or data.synthetic")
        if self.synthetic is not None and self.synthetic not in SYNTHETIC:
            raise ConfigError(f"data.synthetic: expected one of {sorted(SYNTHETIC)}, got {self.synthetic!r}")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"data.fractions: need three fractions summing to 1, got {self.fractions}")

    def load(self) -> Corpus:
        if self.path is not None:
            return load_corpus(self.path, self.max_bytes, tuple(self.fractions))
        raw = SYNTHETIC[self.synthetic](self.synthetic_bytes, self.synthetic_seed)
        return build_corpus(raw, tuple(self.fractions))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str | None = None

    def validate(self) -> None:
        self.model.validate()
        self.trainer.validate(require_positive_lambda=True)
        self.data.validate()
        if self.trainer.context > self.model.context:
            raise ConfigError(f"trainer.context: {self.trainer.context} exceeds model.context {self.model.context}")

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "trainer": asdict(self.trainer), "data": asdict(self.data),
                "out": self.out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config: expected a JSON object")
        unknown = set(d) - {"model", "trainer", "data", "out"}
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        cfg = cls(
            model=ModelConfig(**_check_types("model", ModelConfig, d.get("model", {}))),
            trainer=TrainerConfig(**_check_types("trainer", TrainerConfig, d.get("trainer", {}))),
            data=DataConfig(**_check_types("data", DataConfig, d.get("data", {}))),
            out=d.get("out"),
        )
        if validate:
            cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str, validate: bool = True) -> RunConfig:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(raw, validate)

    @classmethod
    def from_file(cls, path: str | Path, validate: bool = True) -> RunConfig:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: file not found: {p}")
        return cls.from_json(p.read_text(), validate)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("smoelab.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str, validate: bool = True) -> RunConfig:
    f = resources.files("smoelab.presets") / f"{name}.json"
    if not f.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return RunConfig.from_json(f.read_text(), validate)
