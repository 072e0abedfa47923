"""Flat key=value experiment configuration.

Files hold one `dotted.key = value` pair per line (# comments allowed);
every key can be overridden on the command line as `--set key=value`.
Values are coerced to bool/int/float when they parse as such.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def coerce(value: str):
    text = value.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = coerce(value)
    return values


def load_config(path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(values: dict[str, object], overrides: list[str]) -> dict[str, object]:
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = coerce(value)
    return out


def dump_config(values: dict[str, object]) -> str:
    return "\n".join(f"{k} = {values[k]}" for k in sorted(values)) + "\n"


def parse_seed_list(value) -> list[int]:
    if isinstance(value, int):
        return [value]
    seeds = [int(s) for s in str(value).split(",") if s.strip()]
    if not seeds:
        raise ConfigError("seed list must not be empty")
    return seeds
