"""INI-style ``key = value`` configs mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing


def read_ini(path_or_text, default_section: str = "main", is_text: bool = False) -> dict:
    """Parse into ``{section: {key: str}}``; keys before any header go to ``default_section``."""
    if is_text:
        text = path_or_text
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    stripped = [ln.strip() for ln in text.splitlines()]
    first = next((ln for ln in stripped if ln and not ln.startswith(("#", ";"))), "")
    if not first.startswith("["):
        text = f"[{default_section}]\n" + text
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string(text)
    return {s: dict(cp[s]) for s in cp.sections()}


def _coerce(value: str, hint, name: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value.strip().lower() in ("", "none", "null"):
            return None
        return _coerce(value, args[0], name)
    if origin is tuple:
        args = typing.get_args(hint)
        inner = args[0] if args else str
        parts = [p.strip() for p in value.replace(";", ",").split(",") if p.strip()]
        return tuple(_coerce(p, inner, name) for p in parts)
    try:
        if hint is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot read {value!r} as {hint.__name__}") from None
    return value.strip()


def from_mapping(cls, mapping: dict, base=None, strict: bool = True):
    """Build dataclass ``cls`` from string values, overlaying ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if strict and unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kw = {k: (v if not isinstance(v, str) else _coerce(v, hints[k], k)) for k, v in mapping.items() if k in names}
    if base is not None:
        return dataclasses.replace(base, **kw)
    return cls(**kw)


def format_ini(sections: dict) -> str:
    """``{section: dataclass or dict}`` -> INI text (deterministic key order)."""
    out = []
    for sec, obj in sections.items():
        items = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
        out.append(f"[{sec}]")
        for k, v in items.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(_fmt(x) for x in v)
            out.append(f"{k} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)
