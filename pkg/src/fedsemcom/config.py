"""Flat ``key = value`` run-config files.

Blank lines and ``#`` comments are ignored.  Keys are :class:`RunConfig`
fields; model geometry uses the ``model.`` prefix (``model.image_size = 32``).
Every default matches the simulation table (10 clients, lr 1e-4, batch 16,
100 rounds, 3 local epochs, 1/16 compression).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .fl import RunConfig
from .model import ModelSpec

_MODEL_KEYS = {
    "image_size": int,
    "channels": int,
    "patch_size": int,
    "semantic_hidden": int,
    "patch_features": int,
    "channel_width": int,
    "snr_width": int,
    "symbol_dim": int,
    "bias": bool,
    "bytes_per_element": int,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind: Any, text: str) -> Any:
    if kind is bool or kind == "bool":
        return _parse_bool(text)
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    if kind == "int | None":
        return None if text.strip().lower() in ("", "none") else int(text)
    return text.strip()


_RUN_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "model"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into a dict of typed values, with line-precise errors."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (part.strip() for part in line.partition("="))
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub not in _MODEL_KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown model key {sub!r}")
            kind = _MODEL_KEYS[sub]
        elif key in _RUN_TYPES:
            kind = _RUN_TYPES[key]
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(kind, val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_config(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    run_kw = {k: v for k, v in values.items() if not k.startswith("model.")}
    model_kw = {k[len("model."):]: v for k, v in values.items() if k.startswith("model.")}
    spec = base.model
    if model_kw:
        c, h, w = spec.image_shape
        channels = model_kw.pop("channels", c)
        size = model_kw.pop("image_size", None)
        shape = (channels, size, size) if size is not None else (channels, h, w)
        fields_now = {f.name: getattr(spec, f.name) for f in dataclasses.fields(ModelSpec)}
        if "model.image_size" in values or "model.channels" in values:
            # Derived symbol count must follow the new geometry unless set explicitly.
            fields_now["symbol_dim"] = None
        fields_now.update(model_kw, image_shape=shape)
        try:
            spec = ModelSpec(**fields_now)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
    try:
        return dataclasses.replace(base, model=spec, **run_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
    values = parse_config_text(text, str(p))
    values.update(overrides or {})
    return build_config(values)
