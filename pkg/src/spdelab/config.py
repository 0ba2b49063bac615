"""Experiment configuration: flat key-value text with sections (INI syntax).

Only the output directory may come from the environment (``SPDELAB_OUT``).
Every numeric range is checked here, before any computation starts.
"""

from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .solver import DEFAULT_CLAMP, SIGMA_PRESETS, DiffusionSpec, DriftSpec, SolverConfig, sigma_preset
from .spectral import SpectralModel

EXPERIMENTS = ("simulate", "gaussian-check", "malliavin-check", "kernel-check", "scaling", "density", "localize")


class ConfigError(ValueError):
    def __init__(self, message: str, section: str | None = None, key: str | None = None, line: int | None = None):
        where = ""
        if section:
            where = f"[{section}]" + (f" {key}" if key else "")
        if line:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}" if where else message)
        self.section, self.key, self.line = section, key, line


@dataclass
class ExperimentConfig:
    name: str
    model: SpectralModel
    solver: SolverConfig
    drift: DriftSpec
    diffusion: DiffusionSpec
    x: tuple[float, ...]
    seed: int = 0
    paths: int = 1
    workers: int = 1
    chunk_size: int = 256
    strict_reproducible: bool = False
    out: str = "results"
    params: dict[str, str] = field(default_factory=dict)
    echo: dict[str, dict[str, str]] = field(default_factory=dict)
    reader: "_Reader | None" = field(default=None, repr=False, compare=False)


class _Reader:
    """Typed access to a parsed INI file that reports the offending line."""

    def __init__(self, parser: configparser.ConfigParser, text: str):
        self.parser = parser
        self.lines = text.splitlines()

    def line_of(self, section: str, key: str) -> int | None:
        current = None
        for no, raw in enumerate(self.lines, 1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                current = s[1:-1].strip()
            elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return no
        return None

    def fail(self, section, key, message):
        raise ConfigError(message, section, key, self.line_of(section, key))

    def raw(self, section, key, default=None):
        if self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        return default

    def get(self, section, key, conv, default=None, required=False):
        v = self.raw(section, key)
        if v is None:
            if required:
                raise ConfigError("required key is missing", section, key)
            return default
        try:
            return conv(v)
        except (TypeError, ValueError) as exc:
            self.fail(section, key, f"cannot parse {v!r}: {exc}")

    def floats(self, section, key, default=None):
        return self.get(section, key, parse_floats, default)


def parse_floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    m = re.fullmatch(r"geom\s*:\s*([^:]+):([^:]+):(\d+)", text)
    if m:
        import numpy as np

        return tuple(float(v) for v in np.geomspace(float(m.group(1)), float(m.group(2)), int(m.group(3))))
    return tuple(float(v) for v in text.replace(";", ",").split(","))


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _clamp(text: str):
    return None if text.strip().lower() in ("none", "off", "") else float(text)


def load(path, *, seed=None, paths=None, out=None, strict=None, workers=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, seed=seed, paths=paths, out=out, strict=strict, workers=workers)


def loads(text: str, *, seed=None, paths=None, out=None, strict=None, workers=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    r = _Reader(parser, text)

    name = r.get("experiment", "name", str, required=True)
    if name not in EXPERIMENTS:
        r.fail("experiment", "name", f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")

    dim = r.get("model", "dimension", int, 1)
    n_modes = r.get("model", "n_modes", int, 16)
    m = r.get("model", "m", int, 1)
    try:
        model = SpectralModel(dim, n_modes, m)
    except ValueError as exc:
        raise ConfigError(str(exc), "model") from exc

    dt = r.get("solver", "dt", float)
    n_steps = r.get("solver", "n_steps", int, required=True)
    t_final = r.get("solver", "t_final", float)
    if dt is None and t_final is not None:
        dt = t_final / n_steps if n_steps else float("nan")
    if dt is None:
        raise ConfigError("one of dt or t_final is required", "solver", "dt")
    if not (dt > 0 and math.isfinite(dt)):
        r.fail("solver", "dt" if r.raw("solver", "dt") is not None else "t_final", f"dt must be positive, got {dt}")
    if n_steps < 1:
        r.fail("solver", "n_steps", "n_steps must be at least 1")
    u0 = r.floats("solver", "u0", ())
    scale = r.get("solver", "u0_scale", float, 1.0)
    if len(u0) > model.size:
        r.fail("solver", "u0", f"{len(u0)} coefficients given, model keeps {model.size}")
    dealias = r.get("solver", "dealias", float, 2.0)
    if dealias < 1:
        r.fail("solver", "dealias", "dealias factor must be at least 1")
    grid_points = r.get("solver", "grid_points", int)
    if grid_points is not None and grid_points < dealias * n_modes:
        r.fail("solver", "grid_points", f"grid must hold at least dealias x n_modes = {dealias * n_modes} points")

    strict_flag = r.get("experiment", "strict_reproducible", parse_bool, False) if strict is None else bool(strict)
    solver = SolverConfig(dt, n_steps, tuple(scale * c for c in u0) or None, dealias, grid_points,
                          transform="dst" if strict_flag else "matrix")

    coeffs = r.floats("drift", "coefficients", (0.0,))
    clamp = r.get("drift", "clamp", _clamp, DEFAULT_CLAMP)
    odd = r.get("drift", "odd_dissipative", parse_bool, False)
    if clamp is not None and not clamp > 0:
        r.fail("drift", "clamp", "clamp level must be positive")
    try:
        drift = DriftSpec(coeffs or (0.0,), clamp, odd)
    except ValueError as exc:
        r.fail("drift", "coefficients", str(exc))

    preset = r.get("diffusion", "preset", str, "constant")
    if preset not in SIGMA_PRESETS:
        r.fail("diffusion", "preset", f"unknown sigma preset {preset!r}; choose from {', '.join(sorted(SIGMA_PRESETS))}")
    diffusion = sigma_preset(preset, r.get("diffusion", "value", float))

    x = r.floats("point", "x", (0.5,) * dim)
    if len(x) != dim or any(not 0 < v < 1 for v in x):
        r.fail("point", "x", f"x must be {dim} coordinate(s) inside (0, 1)")

    seed_v = r.get("experiment", "seed", int, 0) if seed is None else int(seed)
    paths_v = r.get("experiment", "paths", int, 1) if paths is None else int(paths)
    if paths_v < 1:
        raise ConfigError("path count must be positive", "experiment", "paths", r.line_of("experiment", "paths"))
    workers_v = r.get("experiment", "workers", int, os.cpu_count() or 1) if workers is None else int(workers)
    chunk = r.get("experiment", "chunk_size", int, 256)
    if workers_v < 1 or chunk < 1:
        raise ConfigError("workers and chunk_size must be positive", "experiment")
    out_v = out or os.environ.get("SPDELAB_OUT") or r.get("experiment", "out", str, "results")

    section = name.split("-")[0]
    params = dict(parser.items(section)) if parser.has_section(section) else {}
    echo = {s: dict(parser.items(s)) for s in parser.sections()}
    echo.setdefault("experiment", {})
    echo["experiment"].update({"seed": str(seed_v), "paths": str(paths_v), "strict_reproducible": str(strict_flag).lower()})
    return ExperimentConfig(name, model, solver, drift, diffusion, tuple(x), seed_v, paths_v, workers_v, chunk,
                            strict_flag, out_v, params, echo, r)


def param(cfg: ExperimentConfig, key: str, conv, default):
    """Experiment-section value with the same error reporting as the core keys."""
    reader = cfg.reader
    section = cfg.name.split("-")[0]
    if key not in cfg.params:
        return default
    try:
        return conv(cfg.params[key])
    except (TypeError, ValueError) as exc:
        line = reader.line_of(section, key) if reader else None
        raise ConfigError(f"cannot parse {cfg.params[key]!r}: {exc}", section, key, line) from exc
