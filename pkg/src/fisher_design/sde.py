"""Controlled diffusions with diagonal noise: simulation, Fisher information
integrand and full-path log-likelihood.

All model callables are vectorised: states have shape ``(..., dim)`` and the
parameter ``theta`` and control ``u`` broadcast against ``x[..., 0]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .exceptions import NumericOverflowError, ZeroDiffusionError
from .noise import NoiseStream


class DiffusionModel:
    """dx = f(x, theta, u) dt + diag(Sigma(x))^(1/2) dW.

    Subclasses implement ``drift``, ``drift_dtheta`` and ``diffusion_diag``
    and set ``dim``, ``state_bounds`` and ``state_names``.
    """

    name = "diffusion"
    dim = 1
    state_names: tuple = ("x",)
    state_bounds: tuple = ((-np.inf, np.inf),)
    estimand = "theta"

    def drift(self, x, theta, u):
        raise NotImplementedError

    def drift_dtheta(self, x, theta, u):
        raise NotImplementedError

    def diffusion_diag(self, x):
        raise NotImplementedError

    def project(self, x):
        """Constraint applied after every Euler step (identity by default)."""
        return x

    def __repr__(self):
        return f"{type(self).__name__}()"


def _as_state(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != dim:
        raise ValueError(f"state has trailing dimension {x.shape[-1]}, model expects {dim}")
    return x


def euler_step(model: DiffusionModel, x, theta, u, dt: float, eps):
    """One Euler-Maruyama step; ``eps`` holds standard normals shaped like ``x``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = _as_state(x, model.dim)
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != model.dim:
        raise ValueError(f"noise has trailing dimension {eps.shape[-1]}, model expects {model.dim}")
    with np.errstate(over="ignore", invalid="ignore"):
        sd = np.sqrt(model.diffusion_diag(x))
        x_new = model.project(x + model.drift(x, theta, u) * dt + np.sqrt(dt) * sd * eps)
    if not np.all(np.isfinite(x_new)):
        bad = np.argwhere(~np.isfinite(x_new))[0]
        raise NumericOverflowError(
            f"non-finite state {x_new[tuple(bad[:-1])]!r} after Euler step from {x[tuple(bad[:-1])]!r}",
            state=x[tuple(bad[:-1])])
    return x_new


@dataclass
class Trajectory:
    t0: float
    dt: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.ndim != 2:
            raise ValueError("states must be a 2-D array (n_steps + 1, dim)")
        if len(self.controls) != len(self.states) - 1:
            raise ValueError(
                f"{len(self.controls)} controls for {len(self.states)} states; "
                "expected one control per step")

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))


ControlSource = Union[float, Sequence[float], Callable[[np.ndarray, int], float]]


def as_control_function(control_source: ControlSource) -> Callable[[np.ndarray, int], float]:
    """Normalise a constant, an open-loop schedule or a feedback callable."""
    if callable(control_source):
        return control_source
    arr = np.asarray(control_source, dtype=float)
    if arr.ndim == 0:
        value = float(arr)
        return lambda x, i: value
    return lambda x, i: float(arr[i])


def simulate_path(model: DiffusionModel, x0, theta, control_source: ControlSource,
                  dt: float, n_steps: int, noise: NoiseStream) -> Trajectory:
    """Euler-Maruyama path driven by ``noise`` (vector ``i`` drives step ``i``)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if noise.dim != model.dim:
        raise ValueError(f"noise stream dimension {noise.dim} != model dimension {model.dim}")
    control = as_control_function(control_source)
    states = np.empty((n_steps + 1, model.dim))
    controls = np.empty(n_steps)
    states[0] = _as_state(x0, model.dim).reshape(model.dim)
    eps = noise.block(n_steps)
    for i in range(n_steps):
        u = control(states[i], i)
        controls[i] = u
        try:
            states[i + 1] = euler_step(model, states[i], theta, u, dt, eps[i])
        except NumericOverflowError as err:
            raise NumericOverflowError(f"step {i}: {err}", state=err.state, step=i) from err
    return Trajectory(t0=0.0, dt=dt, states=states, controls=controls)


def fi_integrand(model: DiffusionModel, x, theta, u):
    """sum_k (df_k/dtheta)^2 / Sigma_kk(x): Fisher information per unit time."""
    x = _as_state(x, model.dim)
    sigma = np.asarray(model.diffusion_diag(x), dtype=float)
    zero = sigma <= 0
    if np.any(zero):
        dim = int(np.argwhere(zero)[0][-1])
        raise ZeroDiffusionError(
            f"diffusion variance is zero in dimension {dim} ({model.state_names[dim]})",
            dimension=dim)
    g = model.drift_dtheta(x, theta, u)
    return np.sum(g * g / sigma, axis=-1)


def path_log_likelihood(model: DiffusionModel, traj: Trajectory, theta, controls=None):
    """Discretised Girsanov log-likelihood of ``theta`` for a fully observed path.

    sum_i [ f_i' S_i^-1 dx_i - 0.5 f_i' S_i^-1 f_i dt ], f_i and S_i evaluated at
    the left end of each step.  Larger is better.  ``theta`` may be an array;
    the result then has the same shape.
    """
    controls = traj.controls if controls is None else np.asarray(controls, dtype=float)
    if len(controls) != len(traj.states) - 1:
        raise ValueError(
            f"{len(controls)} controls for {len(traj.states)} states; expected one per step")
    return _loglik_arrays(model, traj.states, controls, traj.dt, theta)


def _loglik_arrays(model, states, controls, dt, theta):
    """Vectorised core: states ``(..., n+1, d)``, controls ``(..., n)``.

    Returns shape ``batch + theta.shape``.
    """
    states = np.asarray(states, dtype=float)
    x = states[..., :-1, :]
    dx = np.diff(states, axis=-2)
    sigma = model.diffusion_diag(x)
    if np.any(sigma <= 0):
        dim = int(np.argwhere(sigma <= 0)[0][-1])
        raise ZeroDiffusionError(f"diffusion variance is zero in dimension {dim}", dimension=dim)
    inv = 1.0 / sigma
    thetas = np.asarray(theta, dtype=float)
    flat = thetas.reshape(-1)
    out = np.empty(states.shape[:-2] + (flat.size,))
    for j, th in enumerate(flat):
        f = model.drift(x, th, controls)
        out[..., j] = np.sum(f * inv * dx - 0.5 * f * inv * f * dt, axis=(-2, -1))
    return out.reshape(states.shape[:-2] + thetas.shape)
