"""Run configuration: defaults < ``key = value`` file < command-line flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .attention import PE_MODES, ConfigError
from .model import parse_structure


@dataclass(frozen=True)
class RunConfig:
    variant: str = "M"
    neighborhood: int = 11
    structure: str = "ooos"
    pe_mode: str = "rpe"
    wrap_horizontal: bool = False
    lr: float = 5e-5
    epochs_source: int = 5
    epochs_adapt: int = 10
    batch_size: int = 8
    lambda_ss: float = 1.0
    lambda_f: float = 0.1
    threshold: float = 0.0
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in ("M", "T", "S"):
            raise ConfigError(f"variant must be M, T or S, got {self.variant!r}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ConfigError(f"neighborhood must be an odd positive integer, got {self.neighborhood}")
        parse_structure(self.structure)
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.epochs_source < 0 or self.epochs_adapt < 0 or self.epochs_source + self.epochs_adapt < 1:
            raise ConfigError("need at least one training epoch")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.lambda_ss < 0 or self.lambda_f < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ALIASES = {"pe": "pe_mode", "data": "data_dir", "out": "out_dir"}


def _convert(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from exc
    return raw.strip()


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = canonical_key(key)
        out[key] = _convert(key, value.strip())
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge in precedence order; ``None`` overrides mean "flag not given"."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
