"""Run configuration: a line-oriented ``[section]`` / ``key = value`` format.

Example::

    # comments start with '#'
    [corpus]
    num_speakers = 16
    snr_range = -5, 20

    [finetune]
    steps = 600
    transfer = false

Every key must be a field of the section's dataclass; its type comes from
the field default. Tuples and lists are comma-separated. An empty value for
``decode.weights`` means equal weights.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from avsd.adapt import AdaptConfig
from avsd.checkpoint import config_digest
from avsd.corpus import CorpusSpec
from avsd.decode import DecodeConfig
from avsd.finetune import FinetuneConfig
from avsd.models import ModelConfig
from avsd.pretrain import PretrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class ScoreConfig:
    bootstrap: int = 10000
    level: float = 0.95
    seed: int = 0

    def validate(self) -> None:
        if self.bootstrap < 1:
            raise ValueError("bootstrap must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must be in (0, 1), got {self.level}")


SECTIONS: dict[str, type] = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "adapt": AdaptConfig,
    "decode": DecodeConfig,
    "score": ScoreConfig,
}

# fields that hold probabilities, checked on top of each section's own validate()
PROBABILITIES = {
    "corpus": ("occlusion_prob", "overlap"),
    "pretrain": ("p_noise", "p_m", "p_a", "audio_coverage", "video_coverage"),
    "finetune": ("freeze_fraction",),
    "adapt": ("rho", "val_fraction"),
    "decode": ("alpha",),
    "score": ("level",),
}


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def digest(self) -> str:
        return config_digest(self.to_dict())

    def validate(self, source: str = "<config>") -> None:
        for section, names in PROBABILITIES.items():
            obj = getattr(self, section)
            for name in names:
                v = getattr(obj, name)
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"{section}.{name} must be a probability in [0, 1], got {v}", source=source)
        try:
            self.corpus.validate()
            self.pretrain.validate(self.model.blocks)
            self.finetune.validate()
            self.adapt.validate()
            self.decode.validate(len(self.decode.weights) if self.decode.weights else 1)
            self.score.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), source=source) from exc


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse_scalar(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    raise ValueError(f"unsupported field type {kind}")


def parse_value(text: str, hint):
    """Convert ``text`` to the type described by a dataclass annotation."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if not text or text.lower() == "none":
            return None
        return parse_value(text, inner[0])
    if origin in (tuple, list):
        parts = [p.strip() for p in text.split(",")] if text else []
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(parts) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values, got {len(parts)}")
            return tuple(_parse_scalar(p, a) for p, a in zip(parts, args))
        item = args[0] if args else str
        vals = [_parse_scalar(p, item) for p in parts]
        return tuple(vals) if origin is tuple else vals
    return _parse_scalar(text, hint)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def _assign(cfg: RunConfig, section: str, key: str, raw: str, line: int | None, source: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]", line, source)
    hints = _field_types(SECTIONS[section])
    if key not in hints:
        raise ConfigError(f"unknown key {key!r} in [{section}]", line, source)
    try:
        value = parse_value(raw, hints[key])
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}", line, source) from None
    setattr(getattr(cfg, section), key, value)


def parse_config(text: str, source: str = "<config>", overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    section = None
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno, source)
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno, source)
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, source)
        if section is None:
            raise ConfigError("key outside any [section]", lineno, source)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {section}.{key}", lineno, source)
        seen.add((section, key))
        _assign(cfg, section, key, raw, lineno, source)
    for item in overrides or []:
        apply_override(cfg, item)
    cfg.validate(source)
    return cfg


def apply_override(cfg: RunConfig, item: str) -> None:
    """Apply one ``section.key=value`` override."""
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {item!r}", source="--set")
    lhs, raw = item.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    _assign(cfg, section, key, raw, None, "--set")


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(p)) from None
    return parse_config(text, str(p), overrides)


def dump_config(cfg: RunConfig) -> str:
    """Render a config in the same format (defaults included)."""
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        for f in dataclasses.fields(SECTIONS[name]):
            out.append(f"{f.name} = {format_value(getattr(getattr(cfg, name), f.name))}")
        out.append("")
    return "\n".join(out)
