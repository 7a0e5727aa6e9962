import numpy as np
import pytest

import fisher_design.experiment as experiment
from fisher_design.dp import ControlSet, PriorGrid, solve_policy
from fisher_design.exceptions import BatchFailure, NumericOverflowError
from fisher_design.experiment import (ExperimentConfig, SummaryStats, TrialResult, emit_table, run_batch,
                                      run_trial, table_rows)
from fisher_design.filter import LikelihoodCurve, grid_mle
from fisher_design.mca import Grid, MCAConfig
from fisher_design.models import ObservationModel, make_model
from fisher_design.sde import fi_integrand, path_log_likelihood

CONTROLS = ControlSet(tuple(range(-10, 11, 2)))
PRIOR = PriorGrid.uniform(2.0, 5.0, 10)


def noisy_config(**kw):
    base = dict(model="double_well", prior=PRIOR, controls=CONTROLS, x0=(-1.0,), dt=0.01, horizon=1.0,
                observation=ObservationModel([[1.0]], [0.0025], 0.25), n_particles=40, n_trials=6, seed=11)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def dw_policy():
    m = make_model("double_well")
    g = Grid((-5.0,), (5.0,), (100,))
    pol, _ = solve_policy(m, g, MCAConfig.auto(m, g, 0.01), CONTROLS, PRIOR, 1.0)
    return pol


def _estimates(batch):
    return [(t.trial_index, t.estimate, t.in_range, t.payoff) for t in batch.trials]


def test_batch_is_bitwise_reproducible(dw_policy):
    cfg = noisy_config()
    assert _estimates(run_batch(cfg, dw_policy)) == _estimates(run_batch(cfg, dw_policy))


@pytest.mark.parametrize("control", ["dynamic", 0.0])
def test_results_do_not_depend_on_group_size_or_order(dw_policy, control):
    control = dw_policy if control == "dynamic" else control
    a = run_batch(noisy_config(batch_size=6), control)
    b = run_batch(noisy_config(batch_size=1), control)
    c = run_batch(noisy_config(batch_size=4), control, trial_indices=[5, 4, 3, 2, 1, 0])
    assert _estimates(a) == _estimates(b)
    assert sorted(_estimates(c)) == _estimates(a)
    single = run_trial(noisy_config(), control, 3)
    assert (single.estimate, single.payoff) == (a.trials[3].estimate, a.trials[3].payoff)


def test_seed_changes_results():
    a = run_batch(noisy_config(n_trials=3), 0.0)
    b = run_batch(noisy_config(n_trials=3, seed=12), 0.0)
    assert _estimates(a) != _estimates(b)


def test_full_observation_trial_matches_direct_likelihood(dw_policy):
    cfg = noisy_config(observation=None, horizon=1.0, n_trials=2)
    r = run_trial(cfg, dw_policy, 1, keep_records=True)
    m = make_model("double_well")
    traj = r.trajectory
    ref = grid_mle(LikelihoodCurve(PRIOR.theta_array, path_log_likelihood(m, traj, PRIOR.theta_array)))
    assert r.estimate == pytest.approx(ref.estimate, rel=1e-12) and r.in_range == ref.in_range
    # realised payoff is the FI integrand summed along the recorded path
    pay = np.sum(fi_integrand(m, traj.states[:-1], 3.84, traj.controls) * cfg.dt)
    assert r.payoff == pytest.approx(pay, rel=1e-12)
    assert set(np.unique(traj.controls)) <= set(CONTROLS.values)


def test_controls_are_held_between_observations(dw_policy):
    r = run_trial(noisy_config(), dw_policy, 0, keep_records=True)
    u = r.trajectory.controls.reshape(-1, 25)
    assert np.all(u == u[:, :1])
    assert r.observations.shape == (4, 1)


def test_std_dev_err_formula():
    trials = [TrialResult(i, 0, e, True, 0.0) for i, e in enumerate([1.0, 2.0, 3.0])]
    s = SummaryStats.from_trials(trials, 2.5, 4.0, "dynamic")
    assert s.std_dev == pytest.approx(1.0) and s.std_dev_err == pytest.approx(1 / np.sqrt(4))
    assert s.bias == pytest.approx(-0.5)
    # 256 estimates with sample sd 0.05947: error column about 0.002634 (0.05947 / sqrt(510))
    z = np.random.default_rng(0).standard_normal(256)
    z = 4.233 + 0.05947 * (z - z.mean()) / z.std(ddof=1)
    s = SummaryStats.from_trials([TrialResult(i, 0, e, True, 0.0) for i, e in enumerate(z)], 3.84, 4.0, "dynamic")
    assert s.std_dev == pytest.approx(0.05947, rel=1e-12)
    assert s.std_dev_err == pytest.approx(0.002634, abs=1e-6)


def test_zero_spread_gives_zero_error():
    trials = [TrialResult(i, 0, 3.84, True, 1.0) for i in range(5)]
    s = SummaryStats.from_trials(trials, 3.84, 30.0, "0")
    assert s.std_dev == 0.0 and s.std_dev_err == 0.0 and s.bias == 0.0 and s.in_range == 1.0


def test_in_range_fraction_and_table():
    trials = [TrialResult(i, 0, 3.0 + 0.1 * i, i % 4 != 0, 1.0) for i in range(8)]
    s = SummaryStats.from_trials(trials, 3.84, 30.0, "dynamic")
    assert s.in_range == 0.75
    row = table_rows([s])[0]
    assert row[:4] == ["30", "dynamic", "8", "75%"]
    text = emit_table([s, s])
    lines = text.splitlines()
    assert lines[0].split() == list(experiment.TABLE_COLUMNS) and set(lines[1]) <= {"-", " "}
    assert len({len(line) for line in lines}) == 1
    csv = emit_table([s], delimiter=",")
    assert csv.splitlines()[0] == ",".join(experiment.TABLE_COLUMNS)


def _failing(original, bad):
    def run(config, control, trials, keep):
        if any(t in bad for t in trials):
            raise NumericOverflowError("boom", step=3)
        return original(config, control, trials, keep)
    return run


def test_failed_trials_are_isolated(monkeypatch):
    monkeypatch.setattr(experiment, "_simulate_group", _failing(experiment._simulate_group, {7}))
    cfg = noisy_config(observation=None, n_trials=120, horizon=0.2)
    res = run_batch(cfg, 0.0)
    assert list(res.failures) == [7] and res.stats.n_failed == 1 and res.stats.n_trials == 119
    assert 7 not in [t.trial_index for t in res.trials]


def test_too_many_failures_abort(monkeypatch):
    monkeypatch.setattr(experiment, "_simulate_group", _failing(experiment._simulate_group, {1, 2}))
    with pytest.raises(BatchFailure):
        run_batch(noisy_config(observation=None, n_trials=10, horizon=0.2), 0.0)


def test_control_validation(dw_policy):
    with pytest.raises(ValueError):
        run_batch(noisy_config(), 3.0)  # not in the control set
    with pytest.raises(ValueError):
        run_batch(noisy_config(horizon=2.0), dw_policy)  # policy too short
    with pytest.raises(ValueError):
        run_batch(noisy_config(model="ou", x0=(0.0,)), dw_policy)
    with pytest.raises(ValueError):
        run_batch(noisy_config(horizon=1.1), 0.0)  # not a whole number of observation periods
