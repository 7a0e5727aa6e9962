"""Closed-loop experiments: simulate, observe, estimate state, apply control,
then estimate the parameter by grid maximum likelihood.

Trials are run in vectorised groups.  Every random number a trial uses is
addressed by ``(seed, trial index, role, index)``, so results do not depend
on group size or on the order trials are run in.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dp import ControlSet, PolicyTable, PriorGrid, lookup_control
from .exceptions import BatchFailure, FisherDesignError
from .filter import ParticleEnsemble, filter_batch, grid_mle_batch
from .models import ObservationModel, make_model, true_parameter
from .noise import (ROLE_CONTROL_FILTER, ROLE_ESTIMATION_FILTER, ROLE_OBSERVATION, ROLE_TRUTH,
                    standard_normals, stream_id, stream_ids)
from .sde import Trajectory, _loglik_arrays, euler_step, fi_integrand

log = logging.getLogger(__name__)

# Largest theta x particle x trial count held in one vectorised group.
GROUP_ELEMENTS = 2_000_000
MAX_FAILURE_FRACTION = 0.01


@dataclass
class ExperimentConfig:
    """Everything a batch of trials needs apart from the control law."""

    model: str
    prior: PriorGrid
    controls: ControlSet
    x0: tuple
    dt: float
    horizon: float
    observation: ObservationModel | None = None  # None means full observation
    params: dict = field(default_factory=dict)
    true_theta: float | None = None              # defaults to the model's nominal value
    n_particles: int = 1000
    n_control_particles: int | None = None       # defaults to n_particles
    control_theta: float | None = None           # defaults to the prior midpoint
    n_trials: int = 128
    seed: int = 0
    resample: bool = False
    batch_size: int | None = None

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        self.x0 = tuple(float(v) for v in np.atleast_1d(self.x0))

    def build_model(self):
        return make_model(self.model, **self.params)

    @property
    def theta_true(self) -> float:
        if self.true_theta is not None:
            return float(self.true_theta)
        return true_parameter(self.build_model())

    @property
    def n_steps(self) -> int:
        n = int(round(self.horizon / self.dt))
        if abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError(f"horizon {self.horizon} is not a multiple of dt = {self.dt}")
        return n

    @property
    def full_observation(self) -> bool:
        return self.observation is None


@dataclass
class TrialResult:
    trial_index: int
    seed: int
    estimate: float
    in_range: bool
    payoff: float                          # realised sum of FI integrand * dt
    min_ess: float = float("nan")          # estimation-filter diagnostic
    trajectory: Trajectory | None = None
    observations: np.ndarray | None = None


@dataclass
class SummaryStats:
    duration: float
    control: str
    true_theta: float
    n_trials: int
    in_range: float
    mean: float
    bias: float
    std_dev: float
    std_dev_err: float
    mean_payoff: float = float("nan")
    payoff_se: float = float("nan")
    n_failed: int = 0

    @classmethod
    def from_trials(cls, trials, true_theta, duration, control, n_failed=0):
        est = np.array([t.estimate for t in trials], dtype=float)
        n = est.size
        sd = float(np.std(est, ddof=1)) if n > 1 else float("nan")
        pay = np.array([t.payoff for t in trials], dtype=float)
        return cls(
            duration=float(duration), control=str(control), true_theta=float(true_theta),
            n_trials=n,
            in_range=float(np.mean([t.in_range for t in trials])) if n else float("nan"),
            mean=float(est.mean()) if n else float("nan"),
            bias=float(est.mean() - true_theta) if n else float("nan"),
            std_dev=sd,
            std_dev_err=sd / math.sqrt(2 * (n - 1)) if n > 1 else float("nan"),
            mean_payoff=float(pay.mean()) if n else float("nan"),
            payoff_se=float(pay.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
            n_failed=int(n_failed),
        )


@dataclass
class BatchResult:
    stats: SummaryStats
    trials: list
    failures: dict  # trial index -> error message


def control_label(control) -> str:
    return "dynamic" if isinstance(control, PolicyTable) else f"{float(control):g}"


def _check_control(config: ExperimentConfig, control):
    if isinstance(control, PolicyTable):
        model = config.build_model()
        if control.model_name != model.name:
            raise ValueError(f"policy was solved for {control.model_name!r}, config uses {model.name!r}")
        if control.horizon < config.horizon - 1e-9:
            raise ValueError(f"policy horizon {control.horizon} is shorter than the experiment ({config.horizon})")
        return
    u = float(control)
    if len(config.controls) and u not in config.controls.values:
        raise ValueError(f"constant control {u} is not in the declared control set {config.controls.values}")


def _simulate_group(config: ExperimentConfig, control, trials, keep: bool):
    model = config.build_model()
    d = model.dim
    B = len(trials)
    n = config.n_steps
    dt = config.dt
    theta = config.theta_true
    dynamic = isinstance(control, PolicyTable)
    obs = config.observation
    k_obs = obs.steps_per_observation(dt) if obs is not None else 1
    n_obs = n // k_obs if obs is not None else 0
    if obs is not None and n_obs * k_obs != n:
        raise ValueError("horizon must be a whole number of observation periods")

    truth_streams = np.array([stream_id(t, ROLE_TRUTH) for t in trials], dtype=np.uint64)
    obs_streams = np.array([stream_id(t, ROLE_OBSERVATION) for t in trials], dtype=np.uint64)
    X = np.tile(np.asarray(config.x0, dtype=float), (B, 1))
    states = np.empty((B, n + 1, d))
    states[:, 0] = X
    controls = np.empty((B, n))
    payoff = np.zeros(B)
    Y = np.empty((B, n_obs, obs.n_channels)) if obs is not None else None

    ctrl = None
    if dynamic and obs is not None:
        nc = config.n_control_particles or config.n_particles
        th_c = config.prior.midpoint if config.control_theta is None else config.control_theta
        ctrl = ParticleEnsemble(model, [th_c], X, nc, config.seed,
                                np.stack([stream_ids(t, ROLE_CONTROL_FILTER, nc) for t in trials]),
                                n_obs_channels=obs.n_channels, resample=config.resample)
    u = lookup_control(control, X, 0.0) if dynamic else np.full(B, float(control))
    u = np.broadcast_to(np.asarray(u, dtype=float), (B,)).copy()

    chunk = 256
    for i0 in range(0, n, chunk):
        m = min(chunk, n - i0)
        eps = standard_normals(config.seed, truth_streams, i0 * d, m * d).reshape(B, m, d)
        for s in range(m):
            i = i0 + s
            controls[:, i] = u
            payoff += fi_integrand(model, X, theta, u) * dt
            X = euler_step(model, X, theta, u, dt, eps[:, s])
            states[:, i + 1] = X
            t_next = (i + 1) * dt
            if obs is None:
                if dynamic:
                    u = lookup_control(control, X, t_next)
                continue
            if (i + 1) % k_obs == 0:
                j = (i + 1) // k_obs - 1
                eta = standard_normals(config.seed, obs_streams, j * obs.n_channels, obs.n_channels)
                Y[:, j] = X @ obs.H.T + np.sqrt(obs.R_diag) * eta
                if ctrl is not None:
                    ctrl.conditional_update(obs, Y[:, j], u, dt)
                    u = lookup_control(control, ctrl.mean(0), t_next)
            elif ctrl is not None:
                ctrl.propagate(u, dt)
        u = np.broadcast_to(np.asarray(u, dtype=float), (B,)).copy()

    thetas = config.prior.theta_array
    min_ess = np.full(B, np.nan)
    if obs is None:
        loglik = _loglik_arrays(model, states, controls, dt, thetas)
    else:
        est_streams = np.stack([stream_ids(t, ROLE_ESTIMATION_FILTER, config.n_particles) for t in trials])
        ref = int(np.argmin(np.abs(thetas - config.prior.midpoint)))
        ens, _ = filter_batch(model, obs, Y, thetas, controls, dt, config.n_particles,
                              np.asarray(config.x0), config.seed, streams=est_streams,
                              reference_theta=ref, resample=config.resample)
        loglik = ens.loglik
        if ens.ess:
            min_ess = np.min(np.array(ens.ess), axis=(0, 2))
    est, interior = grid_mle_batch(thetas, loglik)

    out = []
    for b, t in enumerate(trials):
        out.append(TrialResult(
            trial_index=int(t), seed=config.seed, estimate=float(est[b]), in_range=bool(interior[b]),
            payoff=float(payoff[b]), min_ess=float(min_ess[b]),
            trajectory=Trajectory(0.0, dt, states[b].copy(), controls[b].copy()) if keep else None,
            observations=Y[b].copy() if keep and Y is not None else None,
        ))
    return out


def run_trial(config: ExperimentConfig, control, trial_index: int, keep_records: bool = False) -> TrialResult:
    """One closed-loop experiment; ``control`` is a PolicyTable or a constant."""
    _check_control(config, control)
    try:
        return _simulate_group(config, control, [int(trial_index)], keep_records)[0]
    except FisherDesignError as err:
        raise type(err)(f"trial {trial_index}: {err}") from err


def _group_size(config: ExperimentConfig) -> int:
    if config.batch_size:
        return int(config.batch_size)
    per_trial = len(config.prior) * config.n_particles if config.observation is not None else 1
    return int(max(1, min(256, GROUP_ELEMENTS // per_trial)))


def run_batch(config: ExperimentConfig, control, trial_indices=None, keep_records: bool = False) -> BatchResult:
    """Run ``config.n_trials`` trials (or the given indices) and summarise them.

    Failing trials are excluded from the statistics and reported; more than
    1% failures raises ``BatchFailure``.
    """
    _check_control(config, control)
    trials = list(range(config.n_trials)) if trial_indices is None else [int(t) for t in trial_indices]
    if len(trials) < 2:
        raise ValueError("a batch needs at least 2 trials")
    size = _group_size(config)
    results, failures = {}, {}
    for g in range(0, len(trials), size):
        group = trials[g:g + size]
        log.info("trials %d..%d of %d", group[0], group[-1], len(trials))
        try:
            for r in _simulate_group(config, control, group, keep_records):
                results[r.trial_index] = r
        except FisherDesignError:
            # isolate the failing trial(s); results are group-size independent
            for t in group:
                try:
                    results[t] = _simulate_group(config, control, [t], keep_records)[0]
                except FisherDesignError as err:
                    failures[t] = f"{type(err).__name__}: {err}"
                    log.warning("trial %d failed: %s", t, err)
    if len(failures) > MAX_FAILURE_FRACTION * len(trials):
        raise BatchFailure(f"{len(failures)} of {len(trials)} trials failed; first: "
                           f"{next(iter(failures.items()))}")
    ordered = [results[t] for t in trials if t in results]
    stats = SummaryStats.from_trials(ordered, config.theta_true, config.horizon,
                                     control_label(control), n_failed=len(failures))
    return BatchResult(stats=stats, trials=ordered, failures=failures)


TABLE_COLUMNS = ("Duration", "Control", "N", "In-range", "Mean", "Bias", "Std.Dev", "Std.Dev.Err")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.4g}"


def table_rows(stats_list):
    rows = []
    for s in stats_list:
        rows.append([_fmt(s.duration), s.control, _fmt(s.n_trials), f"{100 * s.in_range:.4g}%",
                     _fmt(s.mean), _fmt(s.bias), _fmt(s.std_dev), _fmt(s.std_dev_err)])
    return rows


def emit_table(stats_list, delimiter: str | None = None) -> str:
    """Comparison table; aligned text by default, delimited when ``delimiter`` is given."""
    rows = [list(TABLE_COLUMNS)] + table_rows(stats_list)
    if delimiter is not None:
        return "\n".join(delimiter.join(r) for r in rows) + "\n"
    widths = [max(len(r[c]) for r in rows) for c in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
