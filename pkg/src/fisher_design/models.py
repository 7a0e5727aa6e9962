"""Concrete controlled diffusions and their observation models."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .exceptions import DomainError, NoFixedPointError
from .sde import DiffusionModel


# ---------------------------------------------------------------- double well

@dataclass(frozen=True)
class DoubleWellParams:
    A: float = 3.84
    w: float = 0.3
    sigma: float = 0.1

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("double-well bump width w must be positive")
        if not self.sigma > 0:
            raise ValueError("double-well noise sigma must be positive")


def double_well_potential(x, A, w):
    x = np.asarray(x, dtype=float)
    x2 = x * x
    return x2 * x2 - 2.0 * x2 + A * np.exp(-0.5 * x2 / (w * w))


def double_well_drift(x, A, w, u):
    """-V'(x) + u."""
    x = np.asarray(x, dtype=float)
    # integer powers via products: float pow is very slow for negative bases
    x2 = x * x
    bump = np.exp(-0.5 * x2 / (w * w))
    return -x * (4.0 * x2 - 4.0 - A / (w * w) * bump) + u


class DoubleWell(DiffusionModel):
    """Overdamped particle in x^4 - 2x^2 + A exp(-(x/w)^2/2); estimand is A."""

    name = "double_well"
    dim = 1
    state_names = ("x",)
    state_bounds = ((-5.0, 5.0),)
    estimand = "A"

    def __init__(self, params: DoubleWellParams | None = None):
        self.params = params or DoubleWellParams()

    def drift(self, x, theta, u):
        p = self.params
        return double_well_drift(x[..., 0], theta, p.w, u)[..., None]

    def drift_dtheta(self, x, theta, u):
        p = self.params
        x0 = x[..., 0]
        g = x0 / p.w**2 * np.exp(-0.5 * x0 * x0 / p.w**2)
        return np.broadcast_to(g, np.broadcast(x0, theta, u).shape)[..., None]

    def diffusion_diag(self, x):
        return np.full(np.shape(x), self.params.sigma**2)

    def __repr__(self):
        return f"DoubleWell({self.params})"


# ---------------------------------------------------------------- Morris-Lecar

@dataclass(frozen=True)
class MorrisLecarParams:
    C_m: float = 20.0
    g_K: float = 8.0
    g_Ca: float = 4.41498308
    g_leak: float = 2.0
    phi: float = 0.04
    v_K: float = -84.0
    v_leak: float = -60.0
    v_Ca: float = 120.0
    v1: float = -1.2
    v2: float = 18.0
    v3: float = 2.0
    v4: float = 30.0
    beta_v: float = 1.0
    beta_w: float = 0.1
    I0: float = 95.0  # listed with the canonical set; unused by the dynamics

    def __post_init__(self):
        if not self.C_m > 0:
            raise ValueError("membrane capacitance C_m must be positive")
        if min(self.g_K, self.g_Ca, self.g_leak) < 0:
            raise ValueError("conductances must be non-negative")
        if self.beta_v < 0 or self.beta_w < 0:
            raise ValueError("noise intensities must be non-negative")


def ml_aux(v, params: MorrisLecarParams):
    """(m_inf, tau_w, w_inf) at voltage ``v``."""
    v = np.asarray(v, dtype=float)
    p = params
    m_inf = 0.5 * (1.0 + np.tanh((v - p.v1) / p.v2))
    tau_w = 1.0 / np.cosh((v - p.v3) / (2.0 * p.v4))
    w_inf = 0.5 * (1.0 + np.tanh((v - p.v3) / p.v4))
    return m_inf, tau_w, w_inf


def ml_gamma_squared(v, w, params: MorrisLecarParams):
    _, tau_w, w_inf = ml_aux(v, params)
    rad = params.phi / tau_w * (w_inf * (1.0 - 2.0 * w) + w)
    if np.any(rad < -1e-12):
        raise DomainError("negative channel-noise radicand; gating variable outside [0, 1]")
    return np.maximum(rad, 0.0)


def ml_gamma(v, w, params: MorrisLecarParams):
    return np.sqrt(ml_gamma_squared(v, w, params))


def ml_drift(v, w, params: MorrisLecarParams, u, g_Ca=None):
    """(dv/dt, dw/dt) with control u = I / C_m."""
    p = params
    g_Ca = p.g_Ca if g_Ca is None else g_Ca
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    m_inf, tau_w, w_inf = ml_aux(v, p)
    current = p.g_K * w * (v - p.v_K) + g_Ca * m_inf * (v - p.v_Ca) + p.g_leak * (v - p.v_leak)
    dv = u - current / p.C_m
    dw = p.phi * (w_inf - w) / tau_w
    return np.stack(np.broadcast_arrays(dv, dw), axis=-1)


class MorrisLecar(DiffusionModel):
    """Planar Morris-Lecar neuron in (v [mV], w); estimand is g_Ca.

    The voltage channel carries additive noise of intensity beta_v per sqrt(ms)
    directly on dv; the gating channel carries beta_w * gamma(v, w).  The
    gating variable is clamped to [0, 1] after every step.
    """

    name = "morris_lecar"
    dim = 2
    state_names = ("v", "w")
    state_bounds = ((-80.0, 80.0), (0.0, 1.0))
    estimand = "g_Ca"

    def __init__(self, params: MorrisLecarParams | None = None):
        self.params = params or MorrisLecarParams()

    def drift(self, x, theta, u):
        return ml_drift(x[..., 0], x[..., 1], self.params, u, g_Ca=theta)

    def drift_dtheta(self, x, theta, u):
        p = self.params
        v = x[..., 0]
        m_inf, _, _ = ml_aux(v, p)
        gv = -m_inf * (v - p.v_Ca) / p.C_m
        gv = np.broadcast_to(gv, np.broadcast(v, theta, u).shape)
        return np.stack([gv, np.zeros_like(gv)], axis=-1)

    def diffusion_diag(self, x):
        p = self.params
        v = x[..., 0]
        g2 = ml_gamma_squared(v, np.clip(x[..., 1], 0.0, 1.0), p)
        return np.stack([np.full(np.shape(v), p.beta_v**2), p.beta_w**2 * g2], axis=-1)

    def project(self, x):
        w = x[..., 1]
        if np.any((w < 0.0) | (w > 1.0)):
            x = x.copy()
            np.clip(x[..., 1], 0.0, 1.0, out=x[..., 1])
        return x

    def __repr__(self):
        return f"MorrisLecar({self.params})"


# ---------------------------------------------------------------- chemostat

@dataclass(frozen=True)
class ChemostatParams:
    eta_I: float = 160.0
    rho: float = 270.0
    chi: float = 0.0027
    kappa: float = 4.4
    sigma1: float = 0.1  # on log nitrogen N*
    sigma2: float = 0.1  # on log algal density C*

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"chemostat parameter {f.name} must be positive")

    @property
    def critical_dilution(self) -> float:
        return self.chi * self.rho


def chemostat_drift(c_star, n_star, params: ChemostatParams, delta, kappa=None):
    """Log-scale drift, returned as (dC*/dt, dN*/dt)."""
    p = params
    kappa = p.kappa if kappa is None else kappa
    c_star = np.asarray(c_star, dtype=float)
    n_star = np.asarray(n_star, dtype=float)
    with np.errstate(over="ignore"):
        big_n = np.exp(n_star)
        big_c = np.exp(c_star)
        sat = 1.0 / (kappa + big_n)
        dc = p.chi * p.rho * big_n * sat - delta
        dn = delta * p.eta_I / big_n - p.rho * big_c * sat - delta
    return np.stack(np.broadcast_arrays(dc, dn), axis=-1)


def chemostat_fixed_point(params: ChemostatParams, delta: float, kappa: float | None = None):
    """Noise-free equilibrium (C*_0, N*_0) at dilution rate ``delta``."""
    p = params
    kappa = p.kappa if kappa is None else kappa
    if not 0 < delta < p.chi * p.rho:
        raise NoFixedPointError(
            f"no fixed point for dilution {delta}: need 0 < delta < chi*rho = {p.chi * p.rho:.6g}")
    n0 = np.log(kappa * delta / (p.chi * p.rho - delta))
    big_n = np.exp(n0)
    if big_n >= p.eta_I:
        raise NoFixedPointError(
            f"equilibrium nitrogen {big_n:.6g} exceeds input concentration {p.eta_I}")
    c0 = np.log(delta * (p.eta_I - big_n) * (kappa + big_n) / (p.rho * big_n))
    return float(c0), float(n0)


class Chemostat(DiffusionModel):
    """Algae/nitrogen chemostat on log scale, state (C*, N*); estimand kappa.

    The control is the dilution rate delta.
    """

    name = "chemostat"
    dim = 2
    state_names = ("C*", "N*")
    state_bounds = ((-6.0, 1.0), (-2.0, 6.0))
    estimand = "kappa"

    def __init__(self, params: ChemostatParams | None = None):
        self.params = params or ChemostatParams()

    def drift(self, x, theta, u):
        return chemostat_drift(x[..., 0], x[..., 1], self.params, u, kappa=theta)

    def drift_dtheta(self, x, theta, u):
        p = self.params
        with np.errstate(over="ignore"):
            big_c = np.exp(x[..., 0])
            big_n = np.exp(x[..., 1])
            sat = 1.0 / (theta + big_n)
            sat2 = sat * sat
            dc = -p.chi * p.rho * big_n * sat2
            dn = p.rho * big_c * sat2
        shape = np.broadcast(x[..., 0], theta, u).shape
        return np.stack([np.broadcast_to(dc, shape), np.broadcast_to(dn, shape)], axis=-1)

    def diffusion_diag(self, x):
        p = self.params
        out = np.empty(np.shape(x))
        out[..., 0] = p.sigma2**2
        out[..., 1] = p.sigma1**2
        return out

    def __repr__(self):
        return f"Chemostat({self.params})"


# ---------------------------------------------------------------- OU

@dataclass(frozen=True)
class OUParams:
    beta: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("OU sigma must be non-negative")


def ou_drift(x, beta, u):
    return -beta * np.asarray(x, dtype=float) + u


class OrnsteinUhlenbeck(DiffusionModel):
    """dx = (-beta x + u) dt + sigma dW; estimand is beta."""

    name = "ou"
    dim = 1
    state_names = ("x",)
    state_bounds = ((-3.0, 3.0),)
    estimand = "beta"

    def __init__(self, params: OUParams | None = None):
        self.params = params or OUParams()

    def drift(self, x, theta, u):
        return ou_drift(x[..., 0], theta, u)[..., None]

    def drift_dtheta(self, x, theta, u):
        g = -x[..., 0]
        return np.broadcast_to(g, np.broadcast(g, theta, u).shape)[..., None]

    def diffusion_diag(self, x):
        return np.full(np.shape(x), self.params.sigma**2)

    def __repr__(self):
        return f"OrnsteinUhlenbeck({self.params})"


MODELS = {
    "double_well": (DoubleWell, DoubleWellParams),
    "morris_lecar": (MorrisLecar, MorrisLecarParams),
    "chemostat": (Chemostat, ChemostatParams),
    "ou": (OrnsteinUhlenbeck, OUParams),
}

TRUE_PARAMETER_FIELD = {
    "double_well": "A",
    "morris_lecar": "g_Ca",
    "chemostat": "kappa",
    "ou": "beta",
}


def make_model(name: str, **overrides) -> DiffusionModel:
    try:
        cls, params_cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(params_cls(**overrides))


def true_parameter(model: DiffusionModel) -> float:
    return float(getattr(model.params, TRUE_PARAMETER_FIELD[model.name]))


def with_params(model: DiffusionModel, **changes) -> DiffusionModel:
    return type(model)(replace(model.params, **changes))


# ---------------------------------------------------------------- observations

@dataclass(frozen=True)
class ObservationModel:
    """y = H x + N(0, diag(R)), taken every ``period`` time units."""

    H: np.ndarray
    R_diag: np.ndarray
    period: float

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_1d(np.asarray(self.R_diag, dtype=float))
        if R.shape != (H.shape[0],):
            raise ValueError(f"R_diag has {R.size} entries for {H.shape[0]} observed channels")
        if np.any(R < 0):
            raise ValueError("observation noise variances must be non-negative")
        if not self.period > 0:
            raise ValueError("observation period must be positive")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R_diag", R)

    @property
    def n_channels(self) -> int:
        return self.H.shape[0]

    def steps_per_observation(self, dt: float) -> int:
        ratio = self.period / dt
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"observation period {self.period} is not a multiple of dt = {dt}")
        return k

    def __eq__(self, other):
        return (isinstance(other, ObservationModel)
                and np.array_equal(self.H, other.H)
                and np.array_equal(self.R_diag, other.R_diag)
                and self.period == other.period)

    __hash__ = None
