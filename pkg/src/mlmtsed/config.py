"""One JSON document with a section per component."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .audio_features import SpectrogramConfig
from .errors import ConfigError, MissingInput
from .metrics import MatchConfig
from .model import ModelConfig
from .synthgen import SynthConfig
from .trainer import TrainConfig


@dataclass
class DecodeSettings:
    segment_hop: int | None = None
    roi: str = "pq"

    def validate(self) -> None:
        if self.roi not in ("pq", "pp"):
            raise ConfigError("decoder.roi must be 'pq' or 'pp'")
        if self.segment_hop is not None and self.segment_hop < 1:
            raise ConfigError("decoder.segment_hop must be >= 1")


SECTIONS = {
    "features": SpectrogramConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "decoder": DecodeSettings,
    "match": MatchConfig,
    "synth": SynthConfig,
}


@dataclass
class RunConfig:
    features: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecodeSettings = field(default_factory=DecodeSettings)
    match: MatchConfig = field(default_factory=MatchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = klass(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.features.validate()
            self.model.validate()
            self.train.validate()
            self.decoder.validate()
            self.synth.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.M != self.features.n_mels:
            raise ConfigError("model.M must equal features.n_mels")

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            d = sec.to_dict() if hasattr(sec, "to_dict") else dataclasses.asdict(sec)
            out[name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or the defaults) and apply ``{section: {key: value}}`` overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"config not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for sec, vals in (overrides or {}).items():
        data.setdefault(sec, {}).update(vals)
    return RunConfig.from_dict(data)


def bundled_config(name: str = "desk") -> Path:
    return Path(str(resources.files("mlmtsed") / "configs" / f"{name}.json"))
