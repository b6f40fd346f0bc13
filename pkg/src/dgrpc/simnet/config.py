"""Plain ``key = value`` topology/scenario files.

Blank lines and ``#`` comments are ignored; ``:`` works as a separator too.
Unknown keys are rejected so typos don't silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    link_gbps: float = 25.0
    prop_delay_us: float = 1.25
    switch_buffer_bytes: int = 12 * 1024 * 1024
    switch_fwd_ns: int = 500
    loss_rate: float = 0.0
    reorder_rate: float = 0.0
    reorder_delay_us: float = 5.0
    wire_overhead_bytes: int = 42
    ctrl_delay_us: float = 10.0
    rq_size: int = 4096
    seed: int = 1
    trace: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.link_gbps <= 0:
            raise ConfigError("link_gbps must be positive")
        if self.prop_delay_us < 0 or self.reorder_delay_us < 0 or self.ctrl_delay_us < 0:
            raise ConfigError("delays must be non-negative")
        if self.switch_buffer_bytes <= 0:
            raise ConfigError("switch_buffer_bytes must be positive")
        for name in ("loss_rate", "reorder_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.rq_size < 1:
            raise ConfigError("rq_size must be >= 1")

    @property
    def link_bps(self) -> int:
        return int(round(self.link_gbps * 1e9))

    @property
    def prop_ns(self) -> int:
        return int(round(self.prop_delay_us * 1000))

    @classmethod
    def from_text(cls, text: str, **overrides) -> SimConfig:
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            key, _, value = line.partition(sep)
            key, value = key.strip(), value.strip()
            if not _ or not key or not value:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _convert(fields[key], value, lineno)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> SimConfig:
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _convert(field: dataclasses.Field, value: str, lineno: int):
    kind = field.type
    try:
        if kind == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(float(value)) if "e" in value.lower() else int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {field.name}") from None
