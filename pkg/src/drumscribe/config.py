"""Flat `key = value` config text with [section] headers.

Kept in-repo instead of an external config language; the same format is
embedded in checkpoints and score files for provenance.
"""

from __future__ import annotations

from typing import Any


class ConfigError(ValueError):
    pass


def loads_config(text: str) -> dict[str, dict[str, Any]]:
    sections: dict[str, dict[str, Any]] = {}
    current = sections.setdefault("", {})
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        current[key.strip()] = _parse_value(value.strip())
    if not sections[""]:
        del sections[""]
    return sections


def _parse_value(text: str) -> Any:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered == "none":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dumps_config(sections: dict[str, dict[str, Any]]) -> str:
    lines = []
    for name, items in sections.items():
        if name:
            lines.append(f"[{name}]")
        for key, value in items.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
