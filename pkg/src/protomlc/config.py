"""Run configuration: one JSON document holding every section, with defaults resolved."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datamodel import SynthConfig
from .encoders import EncoderConfig
from .evaluate import EvalOptions
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "PROTOMLC_OUTPUT_ROOT"
SECTIONS = {"synth": SynthConfig, "encoder": EncoderConfig, "train": TrainConfig, "eval": EvalOptions}
NESTED_TRAIN = ("mlc", "focal", "asym")


class ConfigError(ValueError):
    pass


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if cls is TrainConfig:
        from .losses import AsymConfig, FocalConfig, MlcLossConfig

        nested = {"mlc": MlcLossConfig, "focal": FocalConfig, "asym": AsymConfig}
        for name, sub in nested.items():
            if name in doc:
                _build(sub, doc[name], f"{where}.{name}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int | None = None
    output_dir: str | None = None
    checkpoint_every: int = 500
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        top = {"seed", "output_dir", "checkpoint_every"}
        unknown = sorted(set(doc) - top - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        seed = doc.get("seed")
        if seed is not None and (not isinstance(seed, int) or seed < 0):
            raise ConfigError("seed must be a non-negative integer")
        sections = {}
        for name, sub in SECTIONS.items():
            body = dict(doc.get(name, {}))
            # the root seed feeds every consumer unless a section pins its own
            if seed is not None:
                key = "drop_seed" if name == "eval" else "seed"
                body.setdefault(key, seed)
            sections[name] = _build(sub, body, name)
        every = doc.get("checkpoint_every", 500)
        if not isinstance(every, int) or every < 0:
            raise ConfigError("checkpoint_every must be a non-negative integer")
        cfg = cls(seed=seed, output_dir=doc.get("output_dir"), checkpoint_every=every, **sections)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.synth.validate()
            self.train.validate()
            self.eval.validate()
            self.encoder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "synth": asdict(self.synth),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def resolve_output(out) -> Path:
    """Relative output paths are placed under ``$PROTOMLC_OUTPUT_ROOT`` when it is set."""
    out = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        return Path(root) / out
    return out
