import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from fisher_design.exceptions import NumericOverflowError, SingularInnovationError
from fisher_design.filter import (LikelihoodCurve, ParticleEnsemble, filter_batch, gaussian_update, grid_mle,
                                  grid_mle_batch, kalman_posterior, run_filter)
from fisher_design.models import ObservationModel, make_model


def _linear_map(m, C, H, R, y):
    """Recover x_new = a + Bz z + Bv v from unit inputs."""
    d, k = len(m), len(R)
    a, lp = gaussian_update(m, C, H, R, y, np.zeros(d), np.zeros(k))
    Bz = np.stack([gaussian_update(m, C, H, R, y, e, np.zeros(k))[0] - a for e in np.eye(d)], 1)
    Bv = np.stack([gaussian_update(m, C, H, R, y, np.zeros(d), e)[0] - a for e in np.eye(k)], 1)
    return a, Bz, Bv, lp


@pytest.mark.parametrize("H,R,y", [([[1.0, 0.0]], [0.25], [0.3]),
                                   ([[1.0, 2.0], [0.5, -1.0]], [0.1, 0.4], [1.0, -2.0]),
                                   ([[0.0, 0.0]], [0.5], [3.0])])
def test_gaussian_update_is_exact_conditional(H, R, y):
    m, C = np.array([0.4, -1.2]), np.array([0.3, 0.8])
    H, R, y = np.array(H), np.array(R), np.array(y)
    a, Bz, Bv, lp = _linear_map(m, C, H, R, y)
    mean, cov = kalman_posterior(m, np.diag(C), H, np.diag(R), y)
    np.testing.assert_allclose(a, mean, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(Bz @ Bz.T + Bv @ Bv.T, cov, rtol=1e-12, atol=1e-14)
    ref = multivariate_normal(H @ m, H @ np.diag(C) @ H.T + np.diag(R)).logpdf(y)
    assert lp == pytest.approx(ref, rel=1e-12)


def test_zero_observation_matrix_leaves_prior_draw():
    m, C = np.array([1.0]), np.array([0.04])
    x, _ = gaussian_update(m, C, np.array([[0.0]]), np.array([1.0]), np.array([5.0]), np.array([0.7]), np.array([2.0]))
    assert x[0] == pytest.approx(1.0 + 0.2 * 0.7, rel=1e-15)


def test_large_and_tiny_observation_noise():
    m, C, H = np.array([1.0]), np.array([0.04]), np.array([[1.0]])
    z, v = np.array([0.7]), np.array([-0.3])
    loose, _ = gaussian_update(m, C, H, np.array([1e12]), np.array([5.0]), z, v)
    assert loose[0] == pytest.approx(1.0 + 0.2 * 0.7, abs=1e-7)  # gain term is O(C / sqrt(R))
    tight, _ = gaussian_update(m, C, H, np.array([1e-12]), np.array([5.0]), z, v)
    assert tight[0] == pytest.approx(5.0, abs=1e-5)
    with pytest.raises(SingularInnovationError):
        gaussian_update(m, np.array([0.0]), H, np.array([0.0]), np.array([5.0]), z, v)


def _ou_record(n_obs, beta=1.0, sigma=0.5, dt=0.1, R=0.04, seed=0):
    rng = np.random.default_rng(seed)
    x, Y = 1.0, []
    for _ in range(n_obs):
        x = x - beta * x * dt + np.sqrt(dt) * sigma * rng.standard_normal()
        Y.append(x + np.sqrt(R) * rng.standard_normal())
    return np.array(Y)[:, None]


def _kalman_loglik(Y, beta=1.0, sigma=0.5, dt=0.1, R=0.04):
    a, P, L = 1.0, 0.0, 0.0
    for y in Y[:, 0]:
        a, P = (1 - beta * dt) * a, (1 - beta * dt) ** 2 * P + sigma**2 * dt
        S = P + R
        L += -0.5 * (np.log(2 * np.pi * S) + (y - a) ** 2 / S)
        K = P / S
        a, P = a + K * (y - a), (1 - K) * P
    return L, a


def test_resampling_filter_matches_kalman_within_three_se():
    m = make_model("ou", beta=1.0, sigma=0.5)
    obs = ObservationModel([[1.0]], [0.04], 0.1)
    Y = _ou_record(30)
    L_ref, mean_ref = _kalman_loglik(Y)
    B, N = 200, 1000
    streams = (np.arange(B)[:, None] * (N + 1) + np.arange(N)[None]).astype(np.uint64)
    ens, est = filter_batch(m, obs, np.repeat(Y[None], B, 0), [1.0], 0.0, 0.1, N, [1.0], seed=3,
                            streams=streams, resample=True)
    L = ens.loglik[:, 0]
    assert abs(L.mean() - L_ref) <= 3 * L.std(ddof=1) / np.sqrt(B) + 1e-3
    final = est[:, -1, 0]
    assert abs(final.mean() - mean_ref) <= 3 * final.std(ddof=1) / np.sqrt(B) + 1e-3


def test_same_noise_coupling_gives_identical_clouds():
    m = make_model("ou")
    obs = ObservationModel([[1.0]], [0.04], 0.1)
    Y = _ou_record(10)
    res = run_filter(m, obs, Y, [1.0, 1.0, 1.0], 0.0, 0.05, 50, [1.0], seed=1)
    assert np.all(res.curve.loglik == res.curve.loglik[0])
    again = run_filter(m, obs, Y, [1.0, 1.0, 1.0], 0.0, 0.05, 50, [1.0], seed=1)
    assert np.array_equal(res.curve.loglik, again.curve.loglik)
    assert res.times[-1] == pytest.approx(1.0)
    assert 0 < res.min_ess <= 1


def test_curve_is_smooth_across_theta():
    m = make_model("ou")
    obs = ObservationModel([[1.0]], [0.01], 0.1)
    Y = _ou_record(100, R=0.01, seed=4)
    th = np.linspace(0.5, 1.5, 41)
    L = run_filter(m, obs, Y, th, 0.0, 0.05, 200, [1.0], seed=2).curve.loglik
    # second differences are small compared with the curve's range: no seed-induced jitter
    assert np.max(np.abs(np.diff(L, 2))) < 0.05 * (L.max() - L.min())


def test_noise_chunking_does_not_change_results():
    m = make_model("double_well")
    obs = ObservationModel([[1.0]], [0.0025], 0.05)
    Y = np.full((6, 1), -1.0)
    a = run_filter(m, obs, Y, [3.0, 4.0], 0.0, 0.01, 20, [-1.0], seed=5, chunk=1)
    b = run_filter(m, obs, Y, [3.0, 4.0], 0.0, 0.01, 20, [-1.0], seed=5, chunk=7)
    assert np.array_equal(a.curve.loglik, b.curve.loglik)
    assert np.array_equal(a.estimates, b.estimates)


def test_feedback_controls_are_called_after_each_observation():
    m = make_model("ou")
    obs = ObservationModel([[1.0]], [0.04], 0.1)
    calls = []

    def policy(est, t):
        calls.append(t)
        return np.zeros(est.shape[0])

    run_filter(m, obs, _ou_record(5), [1.0], policy, 0.05, 10, [1.0])
    np.testing.assert_allclose(calls, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])


def test_overflow_in_filter_is_reported():
    m = make_model("double_well")
    ens = ParticleEnsemble(m, [3.84], [1e120], 4, 0, np.arange(4))
    with pytest.raises(NumericOverflowError):
        ens.propagate(0.0, 0.01)


def test_grid_mle_examples():
    th = np.linspace(2.0, 5.0, 10)
    res = grid_mle(LikelihoodCurve(th, -(th - 3.84) ** 2))
    assert res.in_range and res.estimate == pytest.approx(3.84, rel=1e-12)
    edge = grid_mle(LikelihoodCurve(th, th))
    assert not edge.in_range and edge.estimate == 5.0
    flat = grid_mle(LikelihoodCurve(th, np.ones(10)))
    assert flat.estimate == 2.0 and not flat.in_range  # first index wins an exact tie
    with pytest.raises(ValueError):
        LikelihoodCurve(th, np.full(10, np.nan))
    with pytest.raises(ValueError):
        grid_mle(LikelihoodCurve(th[:2], th[:2]))


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.1, 100.0), c=st.floats(2.3, 4.7), off=st.floats(-1e3, 1e3))
def test_grid_mle_exact_on_quadratics(a, c, off):
    th = np.linspace(2.0, 5.0, 10)
    res = grid_mle(LikelihoodCurve(th, off - a * (th - c) ** 2))
    assert res.estimate == pytest.approx(c, abs=1e-9 * max(1.0, abs(off) / a))


def test_grid_mle_batch_matches_scalar():
    rng = np.random.default_rng(0)
    th = np.linspace(0.0, 1.0, 7)
    L = rng.standard_normal((5, 4, 7))
    est, inr = grid_mle_batch(th, L)
    for idx in np.ndindex(5, 4):
        r = grid_mle(LikelihoodCurve(th, L[idx]))
        assert est[idx] == r.estimate and inr[idx] == r.in_range
    perm = rng.permutation(5)
    est_p, _ = grid_mle_batch(th, L[perm])
    assert np.array_equal(est_p, est[perm])
