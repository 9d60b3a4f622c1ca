"""Plain ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored; keys use underscores
(``cities_per_region = 3``). Values stay strings until a consumer converts
them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping


class ConfigFileError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not key:
            raise ConfigFileError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if hasattr(value, "value"):  # enums
        return str(value.value)
    return str(value)


def format_config(values: Mapping) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())
