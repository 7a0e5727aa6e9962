"""Run configuration files.

A config file is a sequence of ``[section]`` headers followed by
``key = value`` lines.  Several assignments may share a line when separated
by commas (``lo = 2, hi = 5, n = 10``); a comma-separated segment without
``=`` continues the list value of the previous key (``values = 0, 3.5, 5``).
``#`` starts a comment.  Unknown sections or keys are errors.

The sections ``model``, ``grid``, ``control`` and ``prior`` are required.
Keys missing from the other sections fall back to the per-model preset,
which ``fisher-design config --dump-defaults --model NAME`` prints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dp import ControlSet, PriorGrid
from .exceptions import ConfigError
from .experiment import ExperimentConfig
from .mca import Grid, MCAConfig
from .models import MODELS, ObservationModel, make_model

REQUIRED_SECTIONS = ("model", "grid", "control", "prior")

# (section, key) -> (attribute, type, help)
_SCHEMA = {
    ("model", "name"): ("model", "str", "model name: " + ", ".join(sorted(MODELS))),
    ("model", "true_theta"): ("true_theta", "float?", "true parameter value (default: model preset)"),
    ("model", "x0"): ("x0", "floats", "initial state"),
    ("grid", "lo"): ("grid_lo", "floats", "lower grid bound per dimension"),
    ("grid", "hi"): ("grid_hi", "floats", "upper grid bound per dimension"),
    ("grid", "n"): ("grid_n", "ints", "nodes per dimension"),
    ("grid", "dt_h"): ("dt_h", "float", "Markov chain time step"),
    ("grid", "r"): ("skip", "ints?", "diffusion skip factor per dimension (default: smallest stable)"),
    ("control", "values"): ("controls", "floats", "ordered control set; ties go to the earliest"),
    ("prior", "lo"): ("prior_lo", "float?", "uniform prior lower end"),
    ("prior", "hi"): ("prior_hi", "float?", "uniform prior upper end"),
    ("prior", "n"): ("prior_n", "int?", "uniform prior grid size"),
    ("prior", "thetas"): ("prior_thetas", "floats?", "explicit prior grid (instead of lo/hi/n)"),
    ("prior", "weights"): ("prior_weights", "floats?", "explicit prior weights"),
    ("observation", "mode"): ("obs_mode", "str", "full | noisy"),
    ("observation", "H"): ("obs_H", "floats", "observation matrix, row-major"),
    ("observation", "R"): ("obs_R", "floats", "observation noise variance per channel"),
    ("observation", "period"): ("obs_period", "float", "time between observations"),
    ("filter", "particles"): ("particles", "int", "estimation-filter particles per theta"),
    ("filter", "control_particles"): ("control_particles", "int?", "control-filter particles"),
    ("filter", "control_theta"): ("control_theta", "float?", "theta used by the control filter"),
    ("filter", "resample"): ("resample", "bool", "weight and resample at observations"),
    ("experiment", "dt"): ("dt", "float", "simulation time step"),
    ("experiment", "horizon"): ("horizon", "float", "experiment duration T"),
    ("experiment", "solve_horizon"): ("solve_horizon", "float?", "policy horizon (default: horizon)"),
    ("experiment", "trials"): ("trials", "int", "number of trials"),
    ("experiment", "seed"): ("seed", "int", "base seed"),
    ("experiment", "batch_size"): ("batch_size", "int?", "trials per vectorised group"),
}
SECTIONS = ("model", "grid", "control", "prior", "observation", "filter", "experiment")


@dataclass
class RunConfig:
    model: str
    x0: tuple
    grid_lo: tuple
    grid_hi: tuple
    grid_n: tuple
    dt_h: float
    controls: tuple
    prior_lo: float | None = None
    prior_hi: float | None = None
    prior_n: int | None = None
    prior_thetas: tuple | None = None
    prior_weights: tuple | None = None
    skip: tuple | None = None
    true_theta: float | None = None
    params: dict = field(default_factory=dict)
    obs_mode: str = "full"
    obs_H: tuple = (1.0,)
    obs_R: tuple = (1.0,)
    obs_period: float = 1.0
    particles: int = 1000
    control_particles: int | None = None
    control_theta: float | None = None
    resample: bool = False
    dt: float = 0.01
    horizon: float = 30.0
    solve_horizon: float | None = None
    trials: int = 128
    seed: int = 0
    batch_size: int | None = None

    # builders ---------------------------------------------------------------
    def build_model(self):
        return make_model(self.model, **self.params)

    def grid(self) -> Grid:
        return Grid(tuple(self.grid_lo), tuple(self.grid_hi), tuple(self.grid_n))

    def mca_config(self, model=None) -> MCAConfig:
        if self.skip is not None:
            return MCAConfig(self.dt_h, tuple(self.skip))
        return MCAConfig.auto(model or self.build_model(), self.grid(), self.dt_h)

    def control_set(self) -> ControlSet:
        return ControlSet(tuple(self.controls))

    def prior(self) -> PriorGrid:
        if self.prior_thetas is not None:
            w = self.prior_weights if self.prior_weights is not None else np.ones(len(self.prior_thetas))
            return PriorGrid(tuple(self.prior_thetas), tuple(w))
        return PriorGrid.uniform(self.prior_lo, self.prior_hi, self.prior_n)

    def observation_model(self) -> ObservationModel | None:
        if self.obs_mode == "full":
            return None
        d = make_model(self.model).dim
        H = np.asarray(self.obs_H, dtype=float).reshape(-1, d)
        return ObservationModel(H, np.asarray(self.obs_R, dtype=float), self.obs_period)

    @property
    def policy_horizon(self) -> float:
        return self.horizon if self.solve_horizon is None else self.solve_horizon

    def experiment_config(self, **overrides) -> ExperimentConfig:
        kw = dict(
            model=self.model, prior=self.prior(), controls=self.control_set(), x0=self.x0,
            dt=self.dt, horizon=self.horizon, observation=self.observation_model(),
            params=dict(self.params), true_theta=self.true_theta, n_particles=self.particles,
            n_control_particles=self.control_particles, control_theta=self.control_theta,
            n_trials=self.trials, seed=self.seed, resample=self.resample, batch_size=self.batch_size,
        )
        kw.update(overrides)
        return ExperimentConfig(**kw)

    # serialisation -----------------------------------------------------------
    def to_text(self) -> str:
        out = []
        for section in SECTIONS:
            out.append(f"[{section}]")
            for (sec, key), (attr, typ, help_) in _SCHEMA.items():
                if sec != section:
                    continue
                value = getattr(self, attr)
                if value is None:
                    out.append(f"# {key} =    ({help_})")
                    continue
                out.append(f"{key} = {_format_value(value, typ)}    # {help_}")
            if section == "model":
                for k, v in sorted(self.params.items()):
                    out.append(f"{k} = {_format_value(v, 'float')}")
            out.append("")
        return "\n".join(out)


def _format_value(value, typ: str) -> str:
    base = typ.rstrip("?")
    if base in ("floats", "ints"):
        return ", ".join(_format_value(v, base[:-1]) for v in value)
    if base == "float":
        return repr(float(value))
    if base == "int":
        return str(int(value))
    if base == "bool":
        return "true" if value else "false"
    return str(value)


def _parse_value(raw: str, typ: str, key: str, line: int):
    base = typ.rstrip("?")
    items = [s.strip() for s in raw.split(",")]
    if base in ("floats", "ints"):
        if not items or any(s == "" for s in items):
            raise ConfigError(f"{key}: empty list entry", line)
        return tuple(_parse_value(s, base[:-1], key, line) for s in items)
    if len(items) != 1:
        raise ConfigError(f"{key} takes a single value, got {raw!r}", line)
    s = items[0]
    if base == "float":
        try:
            v = float(s)
        except ValueError:
            raise ConfigError(f"{key}: malformed number {s!r}", line) from None
        if not math.isfinite(v):
            raise ConfigError(f"{key}: value must be finite, got {s!r}", line)
        return v
    if base == "int":
        try:
            v = float(s)
        except ValueError:
            raise ConfigError(f"{key}: malformed number {s!r}", line) from None
        if v != int(v):
            raise ConfigError(f"{key}: expected an integer, got {s!r}", line)
        return int(v)
    if base == "bool":
        low = s.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {s!r}", line)
    if s == "":
        raise ConfigError(f"{key}: empty value", line)
    return s


def _assignments(text: str, line_no: int):
    """Split 'a = 1, b = 2, 3' into [('a', '1'), ('b', '2, 3')]."""
    out = []
    for seg in text.split(","):
        if "=" in seg:
            key, _, val = seg.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError("missing key before '='", line_no)
            out.append([key, val.strip()])
        else:
            if not out:
                raise ConfigError(f"expected 'key = value', got {text.strip()!r}", line_no)
            out[-1][1] += "," + seg
    return [(k, v.strip()) for k, v in out]


def parse_text(text: str) -> RunConfig:
    section = None
    seen_sections = {}
    raw = {}  # (section, key) -> (value, line)
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"malformed section header {body!r}", no)
            section = body[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}", no)
            seen_sections.setdefault(section, no)
            continue
        if section is None:
            raise ConfigError("assignment before any [section] header", no)
        for key, val in _assignments(body, no):
            if (section, key) in raw:
                raise ConfigError(f"duplicate key {key!r} in [{section}]", no)
            raw[(section, key)] = (val, no)

    missing = [s for s in REQUIRED_SECTIONS if s not in seen_sections]
    if missing:
        raise ConfigError("missing required section(s): " + ", ".join(f"[{s}]" for s in missing))
    if ("model", "name") not in raw:
        raise ConfigError("missing required key 'name' in [model]", seen_sections["model"])
    name = raw[("model", "name")][0]
    if name not in MODELS:
        raise ConfigError(f"unknown model {name!r}; choose from {', '.join(sorted(MODELS))}",
                          raw[("model", "name")][1])
    param_fields = {f.name: f for f in fields(MODELS[name][1])}

    base = preset(name)
    values = {}
    params = {}
    for (sec, key), (val, no) in raw.items():
        if (sec, key) in _SCHEMA:
            attr, typ, _ = _SCHEMA[(sec, key)]
            values[attr] = _parse_value(val, typ, key, no)
        elif sec == "model" and key in param_fields:
            params[key] = _parse_value(val, "float", key, no)
        else:
            known = sorted(k for s, k in _SCHEMA if s == sec)
            if sec == "model":
                known += sorted(param_fields)
            raise ConfigError(f"unknown key {key!r} in [{sec}]; known keys: {', '.join(known)}", no)

    for sec, key in (("grid", "lo"), ("grid", "hi"), ("grid", "n"), ("control", "values")):
        if (sec, key) not in raw:
            raise ConfigError(f"missing required key {key!r} in [{sec}]", seen_sections[sec])
    explicit = ("prior", "thetas") in raw
    uniform = [k for k in ("lo", "hi", "n") if ("prior", k) in raw]
    if not explicit and len(uniform) != 3:
        need = [k for k in ("lo", "hi", "n") if ("prior", k) not in raw]
        raise ConfigError("missing required key(s) " + ", ".join(repr(k) for k in need)
                          + " in [prior] (or give thetas)", seen_sections["prior"])
    if explicit and uniform:
        raise ConfigError("[prior] takes either lo/hi/n or thetas/weights, not both",
                          raw[("prior", uniform[0])][1])
    if not explicit:
        values.setdefault("prior_thetas", None)
        values.setdefault("prior_weights", None)
    else:
        for k in ("prior_lo", "prior_hi", "prior_n"):
            values.setdefault(k, None)
    if ("grid", "r") not in raw:
        values.setdefault("skip", None)

    cfg = RunConfig(**{**_as_kwargs(base), **values, "params": {**base.params, **params}})
    _check(cfg, raw, seen_sections)
    return cfg


def _as_kwargs(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _line(raw, sec, key, default):
    return raw.get((sec, key), (None, default))[1]


def _check(cfg: RunConfig, raw, seen):
    d = make_model(cfg.model).dim
    for key in ("lo", "hi", "n"):
        attr = _SCHEMA[("grid", key)][0]
        if len(getattr(cfg, attr)) != d:
            raise ConfigError(f"grid {key} needs {d} value(s) for {cfg.model}", _line(raw, "grid", key, seen["grid"]))
    if len(cfg.x0) != d:
        raise ConfigError(f"x0 needs {d} value(s) for {cfg.model}", _line(raw, "model", "x0", seen["model"]))
    if cfg.skip is not None and len(cfg.skip) != d:
        raise ConfigError(f"r needs {d} value(s)", _line(raw, "grid", "r", seen["grid"]))
    if cfg.obs_mode not in ("full", "noisy"):
        raise ConfigError(f"observation mode must be 'full' or 'noisy', got {cfg.obs_mode!r}",
                          _line(raw, "observation", "mode", seen.get("observation")))
    if cfg.obs_mode == "noisy" and len(cfg.obs_H) % d:
        raise ConfigError(f"H must have a multiple of {d} entries", _line(raw, "observation", "H", seen.get("observation")))
    try:
        cfg.grid(), cfg.control_set(), cfg.prior(), cfg.observation_model()
    except ValueError as err:
        raise ConfigError(str(err)) from err


def parse_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from err
    return parse_text(text)


# presets ---------------------------------------------------------------------

def preset(name: str) -> RunConfig:
    """Default settings for one of the built-in models (all model parameters spelled out)."""
    cfg = _preset(name)
    cfg.params = {f.name: float(getattr(MODELS[name][1](), f.name)) for f in fields(MODELS[name][1])}
    return cfg


def _preset(name: str) -> RunConfig:
    if name == "double_well":
        return RunConfig(
            model="double_well", x0=(-1.0,), grid_lo=(-5.0,), grid_hi=(5.0,), grid_n=(100,), dt_h=0.01,
            controls=(0.0, -2.0, 2.0, -4.0, 4.0, -6.0, 6.0, -8.0, 8.0, -10.0, 10.0),
            prior_lo=2.0, prior_hi=5.0, prior_n=10,
            obs_mode="noisy", obs_H=(1.0,), obs_R=(0.0025,), obs_period=0.25,
            particles=2000, dt=0.01, horizon=30.0, trials=128)
    if name == "morris_lecar":
        return RunConfig(
            model="morris_lecar", x0=(-60.854, 0.014917), grid_lo=(-80.0, 0.0), grid_hi=(80.0, 1.0),
            grid_n=(72, 72), dt_h=2.0, controls=(0.0, 3.5, 5.0),
            prior_lo=4.0, prior_hi=5.0, prior_n=11,
            obs_mode="noisy", obs_H=(1.0, 0.0), obs_R=(0.25,), obs_period=0.5,
            particles=200, dt=0.5, horizon=1000.0, trials=128)
    if name == "chemostat":
        return RunConfig(
            model="chemostat", x0=(-4.0, 2.0), grid_lo=(-6.0, -2.0), grid_hi=(1.0, 6.0),
            grid_n=(71, 81), dt_h=0.02, controls=(0.1, 0.3, 0.5, 0.68),
            prior_lo=3.5, prior_hi=5.5, prior_n=11,
            obs_mode="full", obs_H=(1.0, 0.0, 0.0, 1.0), obs_R=(0.000625, 0.000625), obs_period=0.5,
            particles=500, dt=0.01, horizon=30.0, trials=128)
    if name == "ou":
        return RunConfig(
            model="ou", x0=(0.0,), grid_lo=(-3.0,), grid_hi=(3.0,), grid_n=(61,), dt_h=0.01,
            controls=(0.0, -1.0, 1.0), prior_lo=0.5, prior_hi=1.5, prior_n=11,
            obs_mode="noisy", obs_H=(1.0,), obs_R=(0.01,), obs_period=0.1,
            particles=500, dt=0.01, horizon=10.0, trials=128)
    raise ConfigError(f"no preset for model {name!r}; choose from {', '.join(sorted(MODELS))}")


def dump_defaults(name: str) -> str:
    return preset(name).to_text()
