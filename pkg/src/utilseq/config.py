"""Flat key=value configuration files.

One ``section.key=value`` entry per line, ``#`` comments and blank lines
ignored.  No nesting, no quoting: values are verbatim strings, parsed at
the point of use.  Files written by :func:`write_config` are sorted by
key so reruns are diffable byte for byte.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .errors import ParseError


def parse_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected key=value", str(path), lineno)
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError("empty key", str(path), lineno)
            out[key] = value.strip()
    return out


def write_config(config: Mapping[str, str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for key in sorted(config):
            handle.write(f"{key}={config[key]}\n")
