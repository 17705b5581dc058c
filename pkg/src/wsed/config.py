"""Namespaced key=value run configuration."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Iterable

from .dsp import FeatureConfig
from .evaluation import CollarConfig
from .gcrnn import GcrnnConfig
from .salr import SalrGrid
from .train import TrainConfig
from .vat import VatConfig


class ConfigError(ValueError):
    pass


def _fields(cls, rename=None) -> dict[str, str]:
    rename = rename or {}
    return {rename.get(f.name, f.name): f.name for f in dataclasses.fields(cls)}


SECTIONS = {
    "dsp": (FeatureConfig, _fields(FeatureConfig)),
    "model": (GcrnnConfig, _fields(GcrnnConfig)),
    "vat": (VatConfig, _fields(VatConfig, {"lam": "lambda"})),
    "train": (TrainConfig, _fields(TrainConfig)),
    "salr": (SalrGrid, _fields(SalrGrid)),
    "eval": (CollarConfig, _fields(CollarConfig)),
}
# keys that do not map onto a dataclass field
EXTRA_KEYS = {
    "train.manifest", "train.weak_labels", "train.classes", "train.use_unlabelled",
    "salr.presence_threshold", "salr.split",
}


def known_keys() -> set[str]:
    keys = set(EXTRA_KEYS)
    for section, (_, names) in SECTIONS.items():
        keys.update(f"{section}.{k}" for k in names)
    return keys


def parse_lines(lines: Iterable[str], source: str) -> list[tuple[str, str, str]]:
    out = []
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out.append((key, value, f"{source}:{n}"))
    return out


class RunConfig:
    """Merged settings; later layers override earlier ones, duplicates within a layer conflict."""

    def __init__(self):
        self.values: dict[str, str] = {}
        self.sources: dict[str, str] = {}

    def add_layer(self, items: list[tuple[str, str, str]]) -> None:
        valid = known_keys()
        seen: dict[str, tuple[str, str]] = {}
        for key, value, source in items:
            if key not in valid:
                raise ConfigError(f"unknown config key {key!r} ({source})")
            if key in seen and seen[key][0] != value:
                raise ConfigError(
                    f"conflicting values for {key}: {seen[key][0]!r} from {seen[key][1]} "
                    f"vs {value!r} from {source}")
            seen[key] = (value, source)
        for key, (value, source) in seen.items():
            self.values[key] = value
            self.sources[key] = source

    @classmethod
    def load(cls, path=None, overrides: list[tuple[str, str, str]] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            if not Path(path).exists():
                raise FileNotFoundError(path)
            cfg.add_layer(parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
        if overrides:
            cfg.add_layer(overrides)
        return cfg

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, name: str):
        cls, names = SECTIONS[name]
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        for ext, attr in names.items():
            key = f"{name}.{ext}"
            if key in self.values:
                kwargs[attr] = _coerce(self.values[key], getattr(defaults, attr), types[attr], key)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from None

    def set_default(self, key: str, value) -> None:
        if key not in self.values:
            self.values[key] = _format(value)
            self.sources[key] = "default"

    def resolved(self) -> dict[str, str]:
        """Every known dataclass-backed setting, plus any extra keys that were set."""
        out = {}
        for name, (cls, names) in SECTIONS.items():
            obj = self.section(name)
            for ext, attr in names.items():
                out[f"{name}.{ext}"] = _format(getattr(obj, attr))
        for key in EXTRA_KEYS:
            if key in self.values:
                out[key] = self.values[key]
        return dict(sorted(out.items()))

    def write_resolved(self, path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.resolved().items()),
                              encoding="utf-8")


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _coerce(raw: str, default, annotation, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or (default is None and "float" in str(annotation)):
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [type(default[0])(s) if default else float(s) for s in items]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
