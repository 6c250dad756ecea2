"""Run configuration: one JSON document with a section per module.

Unknown keys are rejected, missing keys take the dataclass defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .dmlloss import DmlConfig
from .encoder import EncoderConfig
from .errors import InvalidConfig
from .evalkit import EvalConfig
from .labeler import DbscanConfig, ThresholdConfig
from .silloss import SilConfig
from .synthdata import DatasetConfig
from .trainer import TrainConfig


@dataclass
class LossConfig:
    margin: float = 0.3
    gamma: float = 0.05
    delta: float = 1.0
    tau: float = 0.05
    use_sl: bool = True
    use_dml: bool = True
    use_cluster: bool = True

    def sil(self) -> SilConfig:
        return SilConfig(self.margin, self.gamma)

    def dml(self) -> DmlConfig:
        return DmlConfig(self.delta, self.tau)

    def validate(self) -> None:
        self.sil().validate()
        self.dml().validate()


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for f in fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, factory in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise InvalidConfig(f"section {name!r} must be an object")
        cls = type(factory())
        allowed = {f.name for f in fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise InvalidConfig(f"unknown keys in {name!r}: {sorted(bad)}")
        try:
            parts[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"section {name!r}: {exc}") from exc
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def loads(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(doc)


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Copy of ``cfg`` with dotted keys (``"losses.use_sl"``) replaced."""
    doc = copy.deepcopy(cfg.to_dict())
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in doc or name not in doc[section]:
            raise InvalidConfig(f"unknown override {key!r}")
        doc[section][name] = value
    return from_dict(doc)
