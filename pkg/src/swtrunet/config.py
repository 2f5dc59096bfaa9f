"""Flat ``key = value`` run configuration with dotted namespaces.

Every namespace mirrors a dataclass (``model.*`` -> SwtrConfig, ``train.*`` ->
TrainConfig, ...). Values are parsed against the type of the default, tuples are
comma separated, ``none`` clears optional fields. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .augment import AugmentSpec
from .errors import ConfigError
from .model import SwtrConfig
from .phantom import PhantomSpec
from .training import TrainConfig

SNAPSHOT_NAME = "effective_config.txt"


@dataclass
class PreprocessConfig:
    target_hw: tuple = (224, 224)
    tiles: tuple = (8, 8)
    clip_limit: float = 0.01


@dataclass
class CohortConfig:
    count: int = 20


@dataclass
class AblationConfig:
    epochs: int = 0          # 0 -> use train.epochs
    seeds: tuple = (0,)
    holdout: int = 0         # 0 -> one fold's worth of patients


NAMESPACES = {
    "phantom": PhantomSpec,
    "cohort": CohortConfig,
    "preprocess": PreprocessConfig,
    "augment": AugmentSpec,
    "model": SwtrConfig,
    "train": TrainConfig,
    "ablation": AblationConfig,
}


def defaults() -> dict:
    out = {}
    for ns, cls in NAMESPACES.items():
        for k, v in asdict(cls()).items():
            out[f"{ns}.{k}"] = v
    return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _scalar(text: str, like, key: str):
    t = text.strip()
    try:
        if isinstance(like, bool):
            if t.lower() not in ("true", "false"):
                raise ValueError
            return t.lower() == "true"
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return t


def parse_value(text: str, like, key: str):
    t = text.strip()
    if t.lower() == "none":
        return None
    if isinstance(like, (tuple, list)):
        items = [s for s in t.strip("()[]").split(",") if s.strip()]
        elem = like[0] if like else 0.0
        return tuple(_scalar(s, elem, key) for s in items)
    if like is None:  # optional int (e.g. model.shift)
        return _scalar(t, 0, key)
    return _scalar(t, like, key)


def parse_lines(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; returns raw strings."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


class RunConfig:
    """Defaults, then a config file, then ``key=value`` overrides."""

    def __init__(self, values: dict | None = None):
        self.values = defaults()
        if values:
            self.update(values)

    def update(self, raw: dict, source: str = "override") -> "RunConfig":
        for key, value in raw.items():
            if key not in self.values:
                raise ConfigError(f"unknown config key {key!r} ({source})")
            like = self.values[key]
            if like is None and key in _default_types:
                like = _default_types[key]
            self.values[key] = parse_value(value, like, key) if isinstance(value, str) else value
        return self

    @classmethod
    def load(cls, path=None, overrides=None, seed: int | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(f"config file not found: {p}")
            cfg.update(parse_lines(p.read_text(), str(p)), str(p))
        if overrides:
            cfg.update(parse_overrides(overrides))
        if seed is not None:
            cfg.set_seed(seed)
        return cfg

    def set_seed(self, seed: int) -> None:
        for ns in ("phantom", "augment", "model", "train"):
            self.values[f"{ns}.seed"] = int(seed)

    def section(self, ns: str) -> dict:
        prefix = ns + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def build(self, ns: str):
        try:
            return NAMESPACES[ns](**self.section(ns))
        except TypeError as exc:
            raise ConfigError(f"{ns}: {exc}") from None

    def text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.values.items())

    def write_snapshot(self, directory) -> Path:
        path = Path(directory) / SNAPSHOT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.text())
        return path

    def __getitem__(self, key):
        return self.values[key]


_default_types = {"model.shift": 0}


def parse_overrides(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def known_keys() -> list[str]:
    return list(defaults())


def namespace_fields(ns: str) -> list[str]:
    return [f.name for f in fields(NAMESPACES[ns])]
