"""TOML run configuration: nested sections map onto the component dataclasses."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .core import TrainConfig
from .errors import ConfigurationError, ParseError
from .flow import HornSchunckParams
from .net import FusionConfig, ModelConfig
from .pipeline import ExperimentConfig
from .regions import ProposalFilterConfig, SelectiveSearchParams
from .runtime import StreamOptions
from .synth import SynthConfig

SECTIONS = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "fusion": FusionConfig,
    "proposals": ProposalFilterConfig,
    "selective_search": SelectiveSearchParams,
    "horn_schunck": HornSchunckParams,
    "stream": StreamOptions,
    "model": ModelConfig,
}


@dataclass
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    data: str = "data"
    out: str = "runs/default"
    seed: int = 0
    streams: str = "both"

    def stream_names(self) -> tuple[str, ...]:
        return ("rgb", "flow") if self.streams == "both" else (self.streams,)


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"[{where}] unknown key(s): {', '.join(sorted(unknown))}")
    converted = {}
    for k, v in values.items():
        converted[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**converted)
    except TypeError as exc:
        raise ConfigurationError(f"[{where}] {exc}") from None


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    exp = cfg.experiment
    doc: dict[str, Any] = {"data": cfg.data, "out": cfg.out, "seed": cfg.seed, "streams": cfg.streams,
                           "use_regression": exp.use_regression}
    for name in SECTIONS:
        section = asdict(getattr(exp, name))
        doc[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
    return doc


def from_dict(doc: dict[str, Any]) -> RunConfig:
    doc = dict(doc)
    sections = {}
    for name, cls in SECTIONS.items():
        merged = {**{k: v for k, v in asdict(getattr(ExperimentConfig(), name)).items()}, **doc.pop(name, {})}
        sections[name] = _build(cls, merged, name)
    exp = ExperimentConfig(**sections, use_regression=bool(doc.pop("use_regression", True)))
    run = _build(RunConfig, doc, "top level")
    run.experiment = exp
    if run.streams not in ("rgb", "flow", "both"):
        raise ConfigurationError(f"streams must be rgb, flow or both, not {run.streams!r}")
    return run


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ParseError("config file not found", path) from None
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"invalid TOML: {exc}", path) from None
    return from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(to_dict(cfg)), encoding="utf-8")


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply ``section.key=value`` (or top-level ``key=value``) overrides; ``None`` values are skipped."""
    doc = to_dict(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        target = doc[section] if section else doc
        target[key] = list(value) if isinstance(value, tuple) else value
    return from_dict(doc)

