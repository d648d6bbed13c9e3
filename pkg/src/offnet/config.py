"""Flat ``key=value`` run configuration files.

A run config mirrors the fields of :class:`~offnet.network.OffConfig` and
:class:`~offnet.train.TrainConfig` plus dataset paths. Blank lines and ``#``
comments are ignored, absent keys take their defaults, and unknown keys are
rejected by name.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .network import OffConfig
from .train import TrainConfig


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def parse_value(key: str, annotation, text: str):
    text = text.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        if typing.get_origin(annotation) is tuple:
            (item_type, *_rest) = typing.get_args(annotation)
            return tuple(item_type(tok) for tok in text.replace(" ", "").split(",") if tok)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key!r}: {exc}") from None
    raise ConfigurationError(f"unsupported type for {key!r}: {annotation}")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dataclass_items(obj) -> dict[str, str]:
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def build_dataclass(cls, items: dict[str, str]):
    """Instantiate ``cls`` from the subset of ``items`` naming its fields."""
    types = _field_types(cls)
    kwargs = {k: parse_value(k, types[k], v) for k, v in items.items() if k in types}
    return cls(**kwargs)


@dataclass
class RunConfig:
    off: OffConfig = field(default_factory=OffConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_data: str = ""
    test_data: str = ""

    PATH_KEYS = ("train_data", "test_data")

    @classmethod
    def known_keys(cls) -> set[str]:
        return set(_field_types(OffConfig)) | set(_field_types(TrainConfig)) | set(cls.PATH_KEYS)

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(items) - cls.known_keys())
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]!r}")
        return cls(
            off=build_dataclass(OffConfig, items),
            train=build_dataclass(TrainConfig, items),
            train_data=items.get("train_data", ""),
            test_data=items.get("test_data", ""),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        items: dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
            items[key] = value
        return cls.from_items(items)

    def items(self) -> dict[str, str]:
        out = dataclass_items(self.off)
        out.update(dataclass_items(self.train))
        out["train_data"] = self.train_data
        out["test_data"] = self.test_data
        return out

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{k} = {v}\n" for k, v in self.items().items()))
