"""Key-value config files and dataclass plumbing.

Format: one `dotted.key = value` per line; `#` starts a comment; blank
lines ignored. Values parse as bool (true/false), int, float, quoted or
bare strings, or comma-separated lists of those. Dotted keys nest:

    train.iterations = 2000
    train.sampling.n_samples = 12
    dataset.pose_sigma = 0.15, 0.3

Sections used by the CLI: `dataset.*` (DatasetSpec), `train.*`
(TrainConfig, with `train.generator.*`, `train.sampling.*`,
`train.poses.*`, `train.weights.*`), `service.*` (ServiceConfig),
`invert.*` (inversion defaults).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints


class ConfigError(ValueError):
    pass


def _parse_scalar(token: str) -> Any:
    token = token.strip()
    if (token.startswith('"') and token.endswith('"')) or \
       (token.startswith("'") and token.endswith("'")):
        return token[1:-1]
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def parse_config(text: str) -> dict:
    """Parse the key=value format into a nested dict."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        parsed: Any
        if "," in value:
            parsed = [_parse_scalar(v) for v in value.split(",") if v.strip()]
        else:
            parsed = _parse_scalar(value)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: key {key!r} conflicts with a scalar")
        node[parts[-1]] = parsed
    return out


def load_config(path: str | Path) -> dict:
    return parse_config(Path(path).read_text())


def dataclass_to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: dataclass_to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [dataclass_to_dict(v) for v in obj]
    return obj


def dataclass_from_dict(cls: type, data: dict | None) -> Any:
    """Build a dataclass from a (possibly partial) nested dict; unknown keys
    are rejected so config typos fail loudly."""
    data = dict(data or {})
    hints = get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown config keys {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        target = hint
        if get_origin(hint) is not None and type(None) in get_args(hint):
            inner = [a for a in get_args(hint) if a is not type(None)]
            target = inner[0] if len(inner) == 1 else None
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            value = dataclass_from_dict(target, value)
        elif get_origin(target) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)
