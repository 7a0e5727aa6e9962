"""scikit-learn style wrappers.

``PolicyDesigner`` solves for the optimal control policy in ``fit`` and
maps states to control values in ``predict``.  ``PathMLE`` estimates the
drift parameter from a fully observed path.  Both inherit ``get_params`` /
``set_params`` from ``BaseEstimator`` so they can be cloned and grid-searched.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dp import ControlSet, PriorGrid, lookup_control, solve_policy
from .filter import LikelihoodCurve, grid_mle
from .mca import Grid, MCAConfig
from .models import make_model
from .sde import Trajectory, path_log_likelihood


def _model(name, params):
    return make_model(name, **(params or {}))


class PolicyDesigner(BaseEstimator):
    """Fisher-information-optimal feedback policy for one of the built-in models."""

    def __init__(self, model="double_well", model_params=None, grid_lo=(-5.0,), grid_hi=(5.0,),
                 grid_n=(100,), dt_h=0.01, skip=None, controls=(0.0,), prior_lo=2.0, prior_hi=5.0,
                 prior_n=10, horizon=30.0):
        self.model = model
        self.model_params = model_params
        self.grid_lo = grid_lo
        self.grid_hi = grid_hi
        self.grid_n = grid_n
        self.dt_h = dt_h
        self.skip = skip
        self.controls = controls
        self.prior_lo = prior_lo
        self.prior_hi = prior_hi
        self.prior_n = prior_n
        self.horizon = horizon

    def fit(self, X=None, y=None):
        """Solve the dynamic program.  ``X`` and ``y`` are ignored."""
        model = _model(self.model, self.model_params)
        grid = Grid(tuple(self.grid_lo), tuple(self.grid_hi), tuple(int(n) for n in self.grid_n))
        cfg = (MCAConfig(self.dt_h, tuple(self.skip)) if self.skip is not None
               else MCAConfig.auto(model, grid, self.dt_h))
        prior = PriorGrid.uniform(self.prior_lo, self.prior_hi, int(self.prior_n))
        self.policy_, self.value_ = solve_policy(model, grid, cfg, ControlSet(tuple(self.controls)),
                                                 prior, self.horizon)
        self.n_features_in_ = model.dim
        return self

    def predict(self, X, t=0.0):
        """Control values for states ``X`` (n_samples, dim) at time ``t``."""
        check_is_fitted(self, "policy_")
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, policy expects {self.n_features_in_}")
        return np.atleast_1d(lookup_control(self.policy_, X, t))


class PathMLE(BaseEstimator):
    """Grid maximum likelihood from a fully observed, equally spaced path."""

    def __init__(self, model="double_well", model_params=None, thetas=None, dt=0.01):
        self.model = model
        self.model_params = model_params
        self.thetas = thetas
        self.dt = dt

    def _curve(self, X, controls):
        X = check_array(X, ensure_2d=True)
        if X.shape[0] < 2:
            raise ValueError("need at least two states")
        model = _model(self.model, self.model_params)
        u = np.zeros(X.shape[0] - 1) if controls is None else np.asarray(controls, dtype=float)
        thetas = np.asarray(self.thetas, dtype=float)
        traj = Trajectory(0.0, self.dt, X, u)
        return LikelihoodCurve(thetas, path_log_likelihood(model, traj, thetas))

    def fit(self, X, y=None, controls=None):
        """``X``: states (n_steps + 1, dim); ``controls``: per-step values (default 0)."""
        if self.thetas is None or len(self.thetas) < 3:
            raise ValueError("thetas must be a grid of at least 3 values")
        res = grid_mle(self._curve(X, controls))
        self.curve_ = res.curve
        self.theta_ = res.estimate
        self.in_range_ = res.in_range
        return self

    def score(self, X, y=None, controls=None):
        """Largest log-likelihood on the grid for path ``X``."""
        check_is_fitted(self, "theta_")
        return float(np.max(self._curve(X, controls).loglik))
