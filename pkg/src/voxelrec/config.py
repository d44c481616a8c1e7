"""Flat ``key=value`` run configuration.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Values are kept as strings until coerced against a typed default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import NetworkConfig


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k.replace("-", "_")] = v
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def format_kv(d: dict) -> str:
    return "".join(f"{k}={format_value(d[k])}\n" for k in sorted(d))


def coerce(text: str, like):
    """Convert ``text`` to the type of ``like``."""
    if isinstance(like, bool):
        t = text.strip().lower()
        if t in ("1", "true", "on", "yes"):
            return True
        if t in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"cannot parse {text!r}: {e}") from None
    return text


def network_from_kv(d: dict[str, str], prefix: str = "net.") -> NetworkConfig:
    defaults = NetworkConfig()
    kw = {}
    for f in dataclasses.fields(NetworkConfig):
        key = prefix + f.name
        if key in d:
            kw[f.name] = coerce(d[key], getattr(defaults, f.name))
    return NetworkConfig(**kw)


def network_to_kv(cfg: NetworkConfig, prefix: str = "net.") -> dict:
    return {prefix + k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.to_dict().items()}


@dataclass
class RunConfig:
    """Fully resolved settings of one command, written next to its outputs."""

    command: str
    values: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return f"# voxelrec run configuration\ncommand={self.command}\n" + format_kv(self.values)

    def write(self, out_dir, name: str = "run.cfg") -> Path:
        p = Path(out_dir) / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_text(), newline="\n")
        return p

    @classmethod
    def read(cls, path) -> RunConfig:
        d = read_kv(path)
        return cls(d.pop("command", ""), d)
