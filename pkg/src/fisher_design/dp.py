"""Backward induction for the prior-averaged Fisher-information-to-go."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .mca import Grid, MCAConfig, transition_matrix
from .sde import fi_integrand

log = logging.getLogger(__name__)

# Relative gap below which two control values count as tied (lowest index wins).
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ControlSet:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in np.atleast_1d(self.values))
        if not vals:
            raise ValueError("control set must not be empty")
        if len(set(vals)) != len(vals):
            raise ValueError(f"control values must be distinct: {vals}")
        if len(vals) > 256:
            raise ValueError("at most 256 control values are supported")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def index(self, value: float) -> int:
        return self.values.index(float(value))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values)


@dataclass(frozen=True)
class PriorGrid:
    thetas: tuple
    weights: tuple

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if th.size == 0 or th.shape != w.shape:
            raise ValueError("prior grid needs matching, non-empty theta and weight lists")
        if np.any(np.diff(th) <= 0):
            raise ValueError("prior theta values must be strictly increasing")
        if np.any(w < 0) or not w.sum() > 0:
            raise ValueError("prior weights must be non-negative with positive total")
        w = w / math.fsum(w)
        object.__setattr__(self, "thetas", tuple(th.tolist()))
        object.__setattr__(self, "weights", tuple(w.tolist()))

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "PriorGrid":
        if n < 1:
            raise ValueError("prior grid needs at least one point")
        th = np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])
        return cls(tuple(th), tuple(np.ones(n)))

    @property
    def theta_array(self) -> np.ndarray:
        return np.asarray(self.thetas)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.thetas[0] + self.thetas[-1])

    def __len__(self):
        return len(self.thetas)


@dataclass
class PolicyTable:
    model_name: str
    grid: Grid
    dt_h: float
    controls: ControlSet
    prior: PriorGrid
    indices: np.ndarray  # (n_t, cells) uint8, time index 0 = experiment start

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint8)
        if self.indices.ndim != 2 or self.indices.shape[1] != self.grid.size:
            raise ValueError("policy indices must have shape (n_t, grid cells)")
        if self.indices.size and self.indices.max() >= len(self.controls):
            raise ValueError("policy refers to a control index outside the control set")

    @property
    def n_t(self) -> int:
        return self.indices.shape[0]

    @property
    def horizon(self) -> float:
        return self.n_t * self.dt_h

    def slice_at(self, step: int) -> np.ndarray:
        return self.indices[step].reshape(self.grid.n)

    def control_values(self, step: int) -> np.ndarray:
        return self.controls.as_array()[self.indices[step]].reshape(self.grid.n)

    def time_index(self, t: float) -> int:
        if t < -1e-12 or t > self.horizon + 1e-9:
            warnings.warn(f"policy queried at t={t} outside [0, {self.horizon}]; using boundary slice",
                          RuntimeWarning, stacklevel=3)
        i = math.ceil(t / self.dt_h - 0.5)  # nearest step, ties toward the earlier one
        return min(max(i, 0), self.n_t - 1)

    def __eq__(self, other):
        return (isinstance(other, PolicyTable)
                and self.model_name == other.model_name
                and self.grid == other.grid
                and self.dt_h == other.dt_h
                and self.controls == other.controls
                and self.prior == other.prior
                and np.array_equal(self.indices, other.indices))

    __hash__ = None


def _pick(q_total):
    """Argmax over axis 0 with near-ties resolved toward the lowest index."""
    best = q_total.max(axis=0)
    tol = TIE_RTOL * np.maximum(np.abs(best), 1e-300)
    return np.argmax(q_total >= best - tol, axis=0)


def backward_induction(transitions, rewards, weights, n_steps: int, snapshots=()):
    """Generic finite-horizon solver shared over a prior.

    transitions[m][k]: (S, S) row-stochastic matrix (dense or sparse) for
    parameter m and control k.  rewards: (M, K, S) one-step rewards.
    weights: (M,) prior weights.  Returns ``(policy (n_steps, S), V0 (M, S),
    snap)`` where ``snap[j]`` is the value table with ``j`` steps to go for
    each ``j`` in ``snapshots``.
    """
    rewards = np.asarray(rewards, dtype=float)
    M, K, S = rewards.shape
    w = np.asarray(weights, dtype=float).reshape(M, 1, 1)
    V = np.zeros((M, S))
    policy = np.empty((n_steps, S), dtype=np.uint8 if K <= 256 else np.int64)
    snaps = {0: V.copy()} if 0 in snapshots else {}
    Q = np.empty((M, K, S))
    cols = np.arange(S)
    for i in range(n_steps - 1, -1, -1):
        for m in range(M):
            for k in range(K):
                Q[m, k] = rewards[m, k] + transitions[m][k] @ V[m]
        choice = _pick((w * Q).sum(axis=0))
        policy[i] = choice
        V = Q[:, choice, cols]
        togo = n_steps - i
        if togo in snapshots:
            snaps[togo] = V.copy()
    return policy, V, snaps


def reward_table(model, grid: Grid, dt_h: float, controls: ControlSet, prior: PriorGrid):
    x = grid.nodes()
    return np.stack([
        np.stack([fi_integrand(model, x, th, u) * dt_h for u in controls.values])
        for th in prior.thetas
    ])


def build_transitions(model, grid: Grid, cfg: MCAConfig, controls: ControlSet, prior: PriorGrid):
    sigma = model.diffusion_diag(grid.nodes())
    return [[transition_matrix(model, grid, cfg, th, u, sigma_nodes=sigma) for u in controls.values]
            for th in prior.thetas]


def n_steps_for(horizon: float, dt_h: float) -> int:
    n = int(round(horizon / dt_h))
    if n < 1:
        raise ValueError(f"horizon {horizon} shorter than one DP step of {dt_h}")
    if abs(n * dt_h - horizon) > 1e-6 * max(horizon, dt_h):
        warnings.warn(f"horizon {horizon} is not a multiple of dt_h={dt_h}; using {n} steps",
                      RuntimeWarning, stacklevel=2)
    return n


def solve_policy(model, grid: Grid, cfg: MCAConfig, controls: ControlSet, prior: PriorGrid,
                 horizon: float, payoff_horizons=()):
    """Optimal policy over ``[0, horizon]`` and the value table at t = 0.

    With ``payoff_horizons`` the third return value maps each requested
    horizon to its t = 0 value table (all obtained from the same sweep).
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    n_t = n_steps_for(horizon, cfg.dt_h)
    snap_steps = {h: n_steps_for(h, cfg.dt_h) for h in payoff_horizons}
    if any(s > n_t for s in snap_steps.values()):
        raise ValueError("payoff horizons must not exceed the solve horizon")
    log.info("building %d transition matrices on %d cells",
             len(prior) * len(controls), grid.size)
    P = build_transitions(model, grid, cfg, controls, prior)
    R = reward_table(model, grid, cfg.dt_h, controls, prior)
    log.info("backward sweep over %d steps", n_t)
    idx, V0, snaps = backward_induction(P, R, prior.weight_array, n_t,
                                        snapshots=set(snap_steps.values()))
    policy = PolicyTable(model_name=model.name, grid=grid, dt_h=cfg.dt_h,
                         controls=controls, prior=prior, indices=idx)
    if payoff_horizons:
        return policy, V0, {h: snaps[s] for h, s in snap_steps.items()}
    return policy, V0


def lookup_control(policy: PolicyTable, x, t: float):
    """Stored control for state(s) ``x`` (clamped to the grid) at time ``t``."""
    step = policy.time_index(t)
    x = np.asarray(x, dtype=float)
    flat = policy.grid.nearest_flat(x)
    vals = policy.controls.as_array()[policy.indices[step, flat]]
    return float(vals) if np.ndim(vals) == 0 else vals


def stationary_policy(policy: PolicyTable, tol: float = 0.0):
    """Longest run of slices from t = 0 that agree with slice 0.

    Returns ``(slice, t_stationary)``: the control-index slice and the last
    time up to which the policy has not changed.  ``tol`` is the fraction of
    cells allowed to differ.  ``policy.horizon - t_stationary`` is the
    remaining duration beyond which the policy stops changing.
    """
    first = policy.indices[0]
    last = 0
    for i in range(1, policy.n_t):
        if np.mean(policy.indices[i] != first) > tol:
            break
        last = i
    return policy.indices[last].reshape(policy.grid.n), last * policy.dt_h


def mean_payoff(value_at_0, initial_distribution, weights) -> float:
    """sum_cells p(cell) * sum_theta pi(theta) * V_0^theta(cell)."""
    V = np.asarray(value_at_0, dtype=float)
    p = np.asarray(initial_distribution, dtype=float).ravel()
    if not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError("initial distribution must sum to 1")
    w = np.asarray(weights, dtype=float)
    return float(w @ V.reshape(len(w), -1) @ p)


def point_mass(grid: Grid, x) -> np.ndarray:
    p = np.zeros(grid.size)
    p[grid.nearest_flat(np.asarray(x, dtype=float))] = 1.0
    return p


def payoff_curve(model, grid: Grid, cfg: MCAConfig, controls: ControlSet, prior: PriorGrid,
                 horizons, x0):
    """Optimal mean payoff from a point mass at ``x0`` for several horizons.

    One backward sweep to the longest horizon serves them all.  Returns a
    list of ``(T, payoff, payoff / T)``.
    """
    horizons = sorted(float(h) for h in horizons)
    if not horizons or horizons[0] <= 0:
        raise ValueError("horizons must be positive")
    _, _, tables = solve_policy(model, grid, cfg, controls, prior, horizons[-1], payoff_horizons=horizons)
    p = point_mass(grid, x0)
    out = []
    for h in horizons:
        pay = mean_payoff(tables[h], p, prior.weight_array)
        out.append((h, pay, pay / h))
    return out
