import numpy as np
import pytest
from scipy.optimize import fsolve

from fisher_design.exceptions import DomainError, NoFixedPointError
from fisher_design.models import (ChemostatParams, ObservationModel, chemostat_drift, chemostat_fixed_point,
                                  make_model, ml_drift, ml_gamma_squared, MorrisLecarParams, true_parameter,
                                  with_params)
from fisher_design.sde import fi_integrand

RNG = np.random.default_rng(0)

STATES = {
    "double_well": RNG.uniform(-2, 2, size=(20, 1)),
    "ou": RNG.uniform(-3, 3, size=(20, 1)),
    "morris_lecar": np.column_stack([RNG.uniform(-70, 40, 20), RNG.uniform(0.01, 0.9, 20)]),
    "chemostat": np.column_stack([RNG.uniform(-5, 0.5, 20), RNG.uniform(-1, 5, 20)]),
}
THETAS = {"double_well": 3.84, "ou": 1.0, "morris_lecar": 4.4, "chemostat": 4.4}
CONTROLS = {"double_well": 4.0, "ou": 0.5, "morris_lecar": 3.5, "chemostat": 0.3}


@pytest.mark.parametrize("name", sorted(STATES))
def test_analytic_gradient_matches_finite_difference(name):
    m = make_model(name)
    x, th, u = STATES[name], THETAS[name], CONTROLS[name]
    eps = 1e-6 * th
    fd = (m.drift(x, th + eps, u) - m.drift(x, th - eps, u)) / (2 * eps)
    g = m.drift_dtheta(x, th, u)
    # floor the scale: central differences carry ~1e-10 absolute roundoff
    scale = np.maximum(np.abs(g), 1e-4 * np.max(np.abs(g)))
    assert np.max(np.abs(fd - g) / scale) < 1e-5


@pytest.mark.parametrize("name", sorted(STATES))
def test_fi_integrand_matches_definition(name):
    m = make_model(name)
    x, th, u = STATES[name], THETAS[name], CONTROLS[name]
    expected = np.sum(m.drift_dtheta(x, th, u) ** 2 / m.diffusion_diag(x), axis=-1)
    np.testing.assert_allclose(fi_integrand(m, x, th, u), expected, rtol=1e-14)


def test_double_well_formulae():
    m = make_model("double_well")
    x = np.array([[-1.0], [0.3], [0.0]])
    A, w = 3.84, 0.3
    xs = x[:, 0]
    ref = -(4 * xs**3 - 4 * xs - A * xs / w**2 * np.exp(-xs**2 / (2 * w**2))) + 2.0
    np.testing.assert_allclose(m.drift(x, A, 2.0)[:, 0], ref, rtol=1e-14)
    assert m.drift(np.array([[0.0]]), A, 0.0)[0, 0] == 0.0
    np.testing.assert_allclose(m.diffusion_diag(x), 0.01)


def test_morris_lecar_rest_state_is_fixed_point():
    p = MorrisLecarParams()
    root = fsolve(lambda s: ml_drift(s[0], s[1], p, 0.0), [-60.0, 0.02], xtol=1e-13)
    np.testing.assert_allclose(root, [-60.854, 0.014917], atol=2e-3)
    m = make_model("morris_lecar")
    np.testing.assert_allclose(m.drift(root[None], p.g_Ca, 0.0), 0.0, atol=1e-9)


def test_morris_lecar_gating_noise_domain():
    p = MorrisLecarParams()
    assert np.all(ml_gamma_squared(np.linspace(-80, 80, 9), np.full(9, 0.5), p) >= 0)
    with pytest.raises(DomainError):
        ml_gamma_squared(np.array([-80.0]), np.array([-0.5]), p)


def test_morris_lecar_projection_clamps_gating():
    m = make_model("morris_lecar")
    out = m.project(np.array([[-50.0, 1.2], [-50.0, -0.1], [0.0, 0.5]]))
    assert np.array_equal(out[:, 1], [1.0, 0.0, 0.5])


@pytest.mark.parametrize("delta", [0.1, 0.3, 0.5, 0.68])
def test_chemostat_fixed_point_residual(delta):
    p = ChemostatParams()
    c0, n0 = chemostat_fixed_point(p, delta)
    assert np.max(np.abs(chemostat_drift(c0, n0, p, delta))) <= 1e-9


def test_chemostat_fixed_point_errors():
    p = ChemostatParams()
    with pytest.raises(NoFixedPointError):
        chemostat_fixed_point(p, p.critical_dilution)
    with pytest.raises(NoFixedPointError):
        chemostat_fixed_point(p, 0.0)


def test_chemostat_fisher_information_closed_form():
    # log-scale model: d(dC*)/dkappa = -chi rho N/(k+N)^2, d(dN*)/dkappa = rho C/(k+N)^2
    p = ChemostatParams()
    m = make_model("chemostat")
    x = STATES["chemostat"]
    C, N, k = np.exp(x[:, 0]), np.exp(x[:, 1]), p.kappa
    ref = (p.chi**2 * p.rho**2 * N**2 / p.sigma2**2 + p.rho**2 * C**2 / p.sigma1**2) / (k + N) ** 4
    np.testing.assert_allclose(fi_integrand(m, x, k, 0.3), ref, rtol=1e-12)


def test_registry_and_parameters():
    assert true_parameter(make_model("double_well")) == 3.84
    assert true_parameter(make_model("chemostat", kappa=8.4)) == 8.4
    m = with_params(make_model("ou"), sigma=0.2)
    assert m.params.sigma == 0.2
    with pytest.raises(ValueError):
        make_model("nope")
    with pytest.raises(ValueError):
        make_model("double_well", w=0.0)


def test_observation_model():
    obs = ObservationModel([[1.0, 0.0]], [0.25], 0.5)
    assert obs.n_channels == 1
    assert obs.steps_per_observation(0.01) == 50
    with pytest.raises(ValueError):
        obs.steps_per_observation(0.3)
    with pytest.raises(ValueError):
        ObservationModel([[1.0]], [0.1, 0.2], 1.0)
    assert obs == ObservationModel(np.array([[1.0, 0.0]]), np.array([0.25]), 0.5)
