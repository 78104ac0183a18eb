"""Plain-text run configuration.

One knob per line, ``section.key = value``; ``#`` starts a comment.  Sequence
values are space-separated.  Every key must name a field of the section's
config dataclass, so typos fail loudly instead of silently using a default.

Sections and their dataclasses::

    preprocess.*  PreprocessConfig    (resampling, windowing, crop/pad)
    model.*       LiverFormerConfig   plus model.kind = liverformer | unet
    train.*       TrainConfig
    augment.*     RegistrationConfig  plus augment.exclusion = self | templates
    phantom.*     PhantomConfig       (planes written as 16 numbers, row-major)
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .deform import RegistrationConfig
from .model import LiverFormerConfig
from .phantom import PhantomConfig
from .preprocess import PreprocessConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "preprocess": PreprocessConfig,
    "model": LiverFormerConfig,
    "train": TrainConfig,
    "augment": RegistrationConfig,
    "phantom": PhantomConfig,
}
EXTRA_KEYS = {
    ("model", "kind"): ("liverformer", ("liverformer", "unet")),
    ("augment", "exclusion"): ("self", ("self", "templates")),
}


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: LiverFormerConfig = field(default_factory=LiverFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: RegistrationConfig = field(default_factory=RegistrationConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model_kind: str = "liverformer"
    exclusion: str = "self"

    def items(self):
        """(dotted key, value) pairs in a stable order."""
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        out.append(("augment.exclusion", self.exclusion))
        out.append(("model.kind", self.model_kind))
        return sorted(out)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def save(self, path):
        Path(path).write_text(self.to_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        flat = []
        for x in v:
            flat.extend(x if isinstance(x, (list, tuple)) else [x])
        return " ".join(format_value(x) for x in flat)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, default, key):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (list, tuple)):
            parts = raw.split()
            if default and isinstance(default[0], (list, tuple)):
                width = len(default[0])
                nums = [float(p) for p in parts]
                if len(nums) % width:
                    raise ValueError(f"expected a multiple of {width} numbers")
                return tuple(tuple(nums[i:i + width]) for i in range(0, len(nums), width))
            elem = type(default[0]) if default else float
            return type(default)(elem(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from None


def parse_run_config(text: str) -> RunConfig:
    defaults = RunConfig()
    values = {s: {} for s in SECTIONS}
    kind, exclusion = defaults.model_kind, defaults.exclusion
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        section, _, name = key.partition(".")
        if (section, name) in EXTRA_KEYS:
            allowed = EXTRA_KEYS[(section, name)][1]
            if raw not in allowed:
                raise ConfigError(f"{key}: must be one of {allowed}, got {raw!r}")
            if name == "kind":
                kind = raw
            else:
                exclusion = raw
            continue
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in key {key!r}")
        obj = getattr(defaults, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _convert(raw, getattr(obj, name), key)
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"[{section}] {e}") from None
    return RunConfig(**built, model_kind=kind, exclusion=exclusion)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_run_config(Path(path).read_text())
