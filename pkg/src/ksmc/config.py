"""Experiment configuration: a flat ``key = value`` text format.

Example::

    problem = duffing
    problem.sigma_m = 0.05
    filters = ks, abs1
    ks.N = 200
    ks.final_correction = true
    abs1.N = 200
    T_seconds = 10.0
    dt_seconds = 0.002
    refine = 8
    seeds = 0, 1, 2
    output_dir = out/duffing

Values are typed on parsing: ``true``/``false`` become booleans, integers and
floats become numbers, comma-separated numbers become tuples, anything else
stays a string.  ``#`` starts a comment.  :func:`serialize` writes keys in a
canonical order so ``parse(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

from .errors import ConfigError, OutputError
from .sde import n_steps_for

PROBLEMS = ("duffing", "shear_frame", "tracker", "linear_gaussian", "custom")
FILTERS = ("ks", "enkf", "abs1", "abs2", "kalman")
SEED_ENV = "KSMC_SEED_OVERRIDE"

_TOP_KEYS = ("problem", "filters", "T_seconds", "dt_seconds", "refine", "seeds", "output_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    filters: tuple
    T: float
    dt: float
    seeds: tuple
    output_dir: str = "out"
    refine: Optional[int] = None
    problem_params: Mapping = field(default_factory=dict)
    filter_params: Mapping = field(default_factory=dict)
    extra: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; expected one of {PROBLEMS}")
        filters = (self.filters,) if isinstance(self.filters, str) else tuple(self.filters)
        if not filters:
            raise ConfigError("at least one filter is required")
        for f in filters:
            if f not in FILTERS:
                raise ConfigError(f"unknown filter {f!r}; expected one of {FILTERS}")
        if len(set(filters)) != len(filters):
            raise ConfigError("filters must not repeat")
        object.__setattr__(self, "filters", filters)
        seeds = (self.seeds,) if isinstance(self.seeds, int) else tuple(self.seeds)
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds):
            raise ConfigError("seeds must be non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must not repeat")
        object.__setattr__(self, "seeds", seeds)
        if not self.T > 0 or not self.dt > 0:
            raise ConfigError("T and dt must be positive")
        n_steps_for(self.T, self.dt)
        if self.refine is not None and (isinstance(self.refine, bool) or int(self.refine) != self.refine
                                        or self.refine < 1):
            raise ConfigError("refine must be a positive integer")
        unknown = set(self.filter_params) - set(self.filters)
        if unknown:
            raise ConfigError(f"parameters given for filters not in the campaign: {sorted(unknown)}")
        object.__setattr__(self, "problem_params", dict(self.problem_params))
        object.__setattr__(self, "filter_params",
                           {k: dict(v) for k, v in self.filter_params.items()})
        object.__setattr__(self, "extra", dict(self.extra))

    def params_for(self, filter_name: str) -> dict:
        return dict(self.filter_params.get(filter_name, {}))

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(seeds))


# -- value typing --------------------------------------------------------------


def _scalar(text: str):
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
        return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        parts = [p.strip() for p in text.split(",")]
        values = [_scalar(p) for p in parts if p]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            return tuple(values)
        return tuple(parts)
    return _scalar(text)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if len(value) == 1:
            raise ConfigError("single-element lists cannot be written unambiguously")
        return ", ".join(format_value(v) for v in value)
    return str(value)


# -- parse / serialize -------------------------------------------------------


def parse_config(text: str) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = parse_value(value)

    missing = [k for k in ("problem", "filters", "T_seconds", "dt_seconds", "seeds") if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {missing}")
    filters = raw.pop("filters")
    filters = (filters,) if isinstance(filters, str) else tuple(filters)
    seeds = raw.pop("seeds")
    seeds = (seeds,) if isinstance(seeds, int) else tuple(seeds)
    problem_params, filter_params, extra = {}, {}, {}
    for key in list(raw):
        if key in _TOP_KEYS:
            continue
        head, _, rest = key.partition(".")
        value = raw.pop(key)
        if head == "problem" and rest:
            problem_params[rest] = value
        elif head in FILTERS and rest:
            filter_params.setdefault(head, {})[rest] = value
        elif rest:
            extra[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    T, dt = raw["T_seconds"], raw["dt_seconds"]
    if isinstance(T, (str, tuple, bool)) or isinstance(dt, (str, tuple, bool)):
        raise ConfigError("T_seconds and dt_seconds must be numbers")
    return ExperimentConfig(
        problem=str(raw["problem"]), filters=filters, T=float(T), dt=float(dt),
        seeds=seeds, output_dir=str(raw.get("output_dir", "out")),
        refine=None if "refine" not in raw else int(raw["refine"]), problem_params=problem_params,
        filter_params=filter_params, extra=extra)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"problem = {cfg.problem}"]
    lines += [f"problem.{k} = {format_value(v)}" for k, v in sorted(cfg.problem_params.items())]
    lines.append("filters = " + (", ".join(cfg.filters) if len(cfg.filters) > 1
                                 else cfg.filters[0]))
    for name in cfg.filters:
        for k, v in sorted(cfg.params_for(name).items()):
            lines.append(f"{name}.{k} = {format_value(v)}")
    lines += [f"T_seconds = {cfg.T!r}", f"dt_seconds = {cfg.dt!r}",
              *([f"refine = {cfg.refine}"] if cfg.refine is not None else []),
              "seeds = " + ", ".join(str(s) for s in cfg.seeds),
              f"output_dir = {cfg.output_dir}"]
    lines += [f"{k} = {format_value(v)}" for k, v in sorted(cfg.extra.items())]
    return "\n".join(lines) + "\n"


def campaign_text(cfg: ExperimentConfig) -> str:
    """Serialized config without ``output_dir``: the part that determines results."""
    return "".join(line + "\n" for line in serialize_config(cfg).splitlines()
                   if not line.startswith("output_dir ="))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    try:
        path.write_text(serialize_config(cfg))
    except OSError as exc:
        raise OutputError(f"cannot write config {path}: {exc}") from exc
    return path


def parse_seeds(text: str) -> tuple:
    value = parse_value(text)
    seeds = (value,) if isinstance(value, int) else value
    if not isinstance(seeds, tuple) or not all(isinstance(s, int) and not isinstance(s, bool)
                                               for s in seeds):
        raise ConfigError(f"invalid seed list {text!r}")
    return seeds


def apply_seed_override(cfg: ExperimentConfig, override: Optional[str] = None,
                        environ=None):
    """Return ``(config, source)``; an explicit override wins over the
    environment variable, which wins over the file."""
    environ = os.environ if environ is None else environ
    if override is not None:
        return cfg.with_seeds(parse_seeds(override)), "option"
    if environ.get(SEED_ENV):
        return cfg.with_seeds(parse_seeds(environ[SEED_ENV])), "environment"
    return cfg, "config"
