import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fisher_design.estimators import PathMLE, PolicyDesigner
from fisher_design.models import make_model
from fisher_design.noise import NoiseStream
from fisher_design.sde import simulate_path


def test_policy_designer_fit_predict():
    est = PolicyDesigner(controls=tuple(range(-10, 11, 2)), horizon=1.0)
    with pytest.raises(NotFittedError):
        est.predict([[0.0]])
    est.fit()
    u = est.predict([[-1.0], [1.0]])
    assert u[0] > 0 and u[1] < 0
    with pytest.raises(ValueError):
        est.predict([[0.0, 1.0]])
    c = clone(est)
    assert c.get_params() == est.get_params() and not hasattr(c, "policy_")


def test_path_mle_recovers_ou_rate():
    m = make_model("ou", beta=1.3)
    traj = simulate_path(m, [1.0], 1.3, 0.0, 0.01, 20000, NoiseStream(2, 0, 1))
    est = PathMLE(model="ou", model_params={"beta": 1.3}, thetas=np.linspace(0.5, 2.5, 21), dt=0.01)
    est.fit(traj.states, controls=traj.controls)
    assert est.in_range_ and abs(est.theta_ - 1.3) < 0.3  # sd about sqrt(2 beta / T) = 0.11
    assert est.score(traj.states, controls=traj.controls) == pytest.approx(est.curve_.loglik.max())
    assert est.set_params(dt=0.02).dt == 0.02
    with pytest.raises(ValueError):
        PathMLE(thetas=[1.0, 2.0]).fit(traj.states)
