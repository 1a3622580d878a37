"""INI experiment configs mapped onto the runner dataclasses.

A file holds one section whose name is the experiment id::

    [ex1_torus]
    M = 600, 1000, 1400
    N = 900, 2500, 4900, 8100
    box = -1.5, 1.5; -1.5, 1.5; -0.5, 0.5

Tuples are comma separated, nested tuples use ``;`` between rows.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .experiments import EXPERIMENTS, SampleConfig


class ConfigError(ValueError):
    pass


CONFIG_TYPES = {k: v[0] for k, v in EXPERIMENTS.items()} | {"sample": SampleConfig}


def _scalar(text, like, key):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError
            return low in ("true", "yes", "1", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse(text, default, key):
    if not isinstance(default, tuple):
        return _scalar(text, default, key)
    nested = bool(default) and isinstance(default[0], tuple)
    if nested:
        rows = [r for r in text.split(";") if r.strip()]
        like = default[0][0]
        return tuple(tuple(_scalar(v, like, key) for v in r.split(",")) for r in rows)
    like = default[0] if default else ""
    return tuple(_scalar(v, like, key) for v in text.split(",") if v.strip())


def parse_config(text: str, source: str = "<string>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = cp.sections()
    if len(sections) != 1:
        raise ConfigError(f"{source}: expected exactly one section, found {sections}")
    exp_id = sections[0]
    if exp_id not in CONFIG_TYPES:
        raise ConfigError(f"{source}: unknown experiment {exp_id!r}; known: {sorted(CONFIG_TYPES)}")
    cls = CONFIG_TYPES[exp_id]
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in cp.items(exp_id):
        if key not in defaults or key == "id":
            raise ConfigError(f"{source}: unknown key {key!r} in section [{exp_id}]")
        values[key] = _parse(raw, defaults[key], key)
    return cls(**values)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def with_seed(cfg, seed: int):
    """Override the seed field(s) of ``cfg``."""
    names = {f.name for f in dataclasses.fields(cfg)}
    if "seeds" in names:
        return dataclasses.replace(cfg, seeds=(seed,))
    if "seed" in names:
        return dataclasses.replace(cfg, seed=seed)
    raise ConfigError(f"{cfg.id} has no seed")


def dump_config(cfg) -> str:
    lines = [f"[{cfg.id}]"]
    for f in dataclasses.fields(cfg):
        if f.name == "id":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple) and v and isinstance(v[0], tuple):
            v = "; ".join(", ".join(map(str, r)) for r in v)
        elif isinstance(v, tuple):
            v = ", ".join(map(str, v))
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
