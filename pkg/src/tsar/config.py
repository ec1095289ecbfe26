"""Run configuration: defaults, INI files and command-line overrides.

Precedence is defaults < config file < flags.  Every field lives in one INI
section; validation errors name the field as ``section.key``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__

MODES = ("grow", "sculpt", "anml", "oml", "scratch")
REGIMES = ("scarce", "rich")
PRESETS = ("tiny", "paper")
DETAILS = ("summary", "tracked", "full")
TREATMENTS = ("normal", "enhancing", "diminishing", "mixed", "fixed", "reservoir")
DATA_ENV = "TSAR_DATA_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a ``section.key`` path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    # [run]
    mode: str = "grow"
    regime: str = "scarce"
    preset: str = "tiny"
    seeds: list[int] = field(default_factory=lambda: [0])
    data: str = "synthetic"
    data_seed: int = 1
    out: str = "runs"
    workers: int = 1
    # [meta]
    iterations: int = 1000
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    order: str = "second"
    scarce_classes: int = 25
    rich_classes: int = 100
    probe_every: int = 10
    # [transfer]
    checkpoint: str | None = None
    tasks: int = 20
    images_per_task: int = 10
    transfer_lr: float = 3e-2
    lr_grid: list[float] = field(default_factory=list)
    treatment: str = "normal"
    trace_detail: str = "summary"
    tracked_band: list[float] = field(default_factory=lambda: [0.0, 100.0])
    validation_per_class: int = 10
    pool_per_class: int = 30
    record_weights: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = __version__
        return d


SECTIONS = {
    "run": ("mode", "regime", "preset", "seeds", "data", "data_seed", "out", "workers"),
    "meta": ("iterations", "inner_lr", "outer_lr", "order", "scarce_classes", "rich_classes", "probe_every"),
    "transfer": (
        "checkpoint",
        "tasks",
        "images_per_task",
        "transfer_lr",
        "lr_grid",
        "treatment",
        "trace_detail",
        "tracked_band",
        "validation_per_class",
        "pool_per_class",
        "record_weights",
    ),
}
SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def field_path(name: str) -> str:
    return f"{SECTION_OF.get(name, 'run')}.{name}"


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or ``"0-9"`` (inclusive); seeds are non-negative."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(part)])
    return out


def _coerce(name: str, value):
    kind = _TYPES[name]
    try:
        if kind == "list[int]":
            return parse_seeds(value) if isinstance(value, str) else [int(v) for v in value]
        if kind == "list[float]":
            if isinstance(value, str):
                return [float(v) for v in value.split(",") if v.strip()]
            return [float(v) for v in value]
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {value!r}")
            return bool(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str | None":
            return None if value in (None, "", "none", "None") else str(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(field_path(name), f"cannot parse {value!r} ({exc})") from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[key] = raw
    return values


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then explicit overrides (``None`` means unset)."""
    cfg = RunConfig()
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _TYPES:
                raise ConfigError(key, "unknown field")
            setattr(cfg, key, _coerce(key, value))
    validate(cfg)
    return cfg


def _mode_ok(mode: str) -> bool:
    if mode in MODES:
        return True
    if mode.startswith("custom_bias="):
        try:
            float(mode.split("=", 1)[1])
            return True
        except ValueError:
            return False
    return False


def validate(cfg: RunConfig) -> None:
    def need(ok: bool, name: str, msg: str):
        if not ok:
            raise ConfigError(field_path(name), msg)

    need(_mode_ok(cfg.mode), "mode", f"must be one of {MODES} or custom_bias=<float>, got {cfg.mode!r}")
    need(cfg.regime in REGIMES, "regime", f"must be one of {REGIMES}")
    need(cfg.preset in PRESETS, "preset", f"must be one of {PRESETS}")
    need(len(cfg.seeds) > 0, "seeds", "at least one seed required")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    need(cfg.iterations >= 1, "iterations", "must be >= 1")
    need(cfg.inner_lr >= 0, "inner_lr", "must be >= 0")
    need(cfg.outer_lr > 0, "outer_lr", "must be > 0")
    need(cfg.order in ("first", "second"), "order", "must be 'first' or 'second'")
    need(cfg.scarce_classes >= 2, "scarce_classes", "must be >= 2")
    need(cfg.rich_classes >= 2, "rich_classes", "must be >= 2")
    need(cfg.tasks >= 1, "tasks", "must be >= 1")
    need(cfg.images_per_task >= 1, "images_per_task", "must be >= 1")
    need(cfg.transfer_lr > 0, "transfer_lr", "must be > 0")
    need(all(lr > 0 for lr in cfg.lr_grid), "lr_grid", "learning rates must be > 0")
    need(cfg.treatment in TREATMENTS, "treatment", f"must be one of {TREATMENTS}")
    need(cfg.trace_detail in DETAILS, "trace_detail", f"must be one of {DETAILS}")
    need(
        len(cfg.tracked_band) == 2 and 0 <= cfg.tracked_band[0] <= cfg.tracked_band[1] <= 100,
        "tracked_band",
        "must be two percentiles lo,hi with 0 <= lo <= hi <= 100",
    )
    need(cfg.pool_per_class >= cfg.images_per_task, "pool_per_class", "must be >= images_per_task")
    if cfg.treatment in ("enhancing", "diminishing", "mixed"):
        need(cfg.pool_per_class >= 2 * cfg.images_per_task, "pool_per_class", "curated treatments need >= 2 * images_per_task")


def data_root() -> Path | None:
    root = os.environ.get(DATA_ENV)
    return Path(root) if root else None


def resolve_data_path(spec: str, name: str = "data") -> Path | None:
    """``synthetic`` gives None; otherwise an existing folder (relative names are tried under TSAR_DATA_DIR)."""
    if spec == "synthetic":
        return None
    p = Path(spec).expanduser()
    if p.is_dir():
        return p
    root = data_root()
    if root is not None and not p.is_absolute() and (root / p).is_dir():
        return root / p
    raise ConfigError(field_path(name), f"dataset folder not found: {spec}")
