"""Flat ``key = value`` configuration files and their layering.

Precedence is defaults < config file < command-line flags.  Lists are comma
separated; time steps may be written as powers of two (``2^-7``).
"""

from __future__ import annotations

import re
from dataclasses import replace
from pathlib import Path

from .experiments import CASES, ConfigError, ExperimentConfig, default_config
from .noise import EPSILON, default_truncation

KEYS = ("case", "r", "L", "basis", "T", "tau_list", "n_list", "ref_tau", "ref_n", "samples", "base_seed", "out_dir")

_POW = re.compile(r"^\s*2\s*\^\s*(-?\d+)\s*$")


def parse_float(text: str) -> float:
    m = _POW.match(text)
    if m:
        return 2.0 ** int(m.group(1))
    return float(text)


def parse_value(key: str, text: str):
    text = text.strip()
    try:
        if key in ("case", "basis", "out_dir"):
            if key == "case" and text not in CASES:
                raise ConfigError(f"case must be one of {', '.join(CASES)}, got {text!r}")
            return text
        if key in ("r", "T", "ref_tau"):
            return parse_float(text)
        if key in ("L", "ref_n", "samples", "base_seed"):
            return int(text)
        if key == "tau_list":
            return tuple(parse_float(x) for x in text.split(",") if x.strip())
        if key == "n_list":
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"unknown key {key!r}")


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = parse_value(key, val)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve(study: str, file_values: dict | None = None, flag_values: dict | None = None, levels: int | None = None) -> ExperimentConfig:
    """Merge the three layers into an experiment configuration."""
    layers = [file_values or {}, flag_values or {}]
    merged: dict = {}
    for layer in layers:
        for k, v in layer.items():
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
            if v is not None:
                merged[k] = v
    case = merged.pop("case", "I")
    cfg = default_config(study, case=case)
    if "r" not in merged:
        merged["r"] = CASES[case]
    if "L" not in merged:
        merged["L"] = default_truncation(merged["r"])
    cfg = replace(cfg, **merged)
    if levels is not None:
        if levels < 1:
            raise ConfigError("--levels must be positive")
        if cfg.axis == "space":
            cfg = replace(cfg, n_list=cfg.n_list[:levels])
        else:
            cfg = replace(cfg, tau_list=cfg.tau_list[:levels])
    return cfg


def show_config(cfg: ExperimentConfig) -> str:
    lines = [
        f"study={cfg.study}",
        f"case={cfg.case}",
        f"r={cfg.r!r}",
        f"L={cfg.L}",
        f"basis={cfg.basis}",
        f"epsilon={EPSILON!r}",
        f"T={cfg.T!r}",
        f"f=({cfg.f[0]!r}, {cfg.f[1]!r})",
        "u0=(0, 0)",
        "domain=[0,1]^2",
        "boundary=stress",
        f"tau_list={','.join(repr(t) for t in cfg.tau_list)}",
        f"n_list={','.join(str(n) for n in cfg.n_list)}",
        f"ref_tau={cfg.ref_tau!r}",
        f"ref_n={cfg.ref_n}",
        f"samples={cfg.samples}",
        f"base_seed={cfg.base_seed}",
        f"out_dir={cfg.out_dir}",
    ]
    return "\n".join(lines) + "\n"
