"""Command line interface: ``fisher-design <command> ...``.

Commands
    solve      compute an optimal policy and write a policy file
    simulate   run closed-loop trials with a policy or a constant control
    estimate   likelihood curve and MLE for an observation record
    report     comparison table from one or more result files
    payoff     optimal payoff / T for several horizons
    config     print preset configs or check a config file
    describe   print a policy file header

Errors end the process with a nonzero status and one JSON line on stderr,
``{"error": "<kind>", "message": "..."}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_defaults, parse_config
from .dp import lookup_control, payoff_curve, solve_policy
from .exceptions import ConfigError, FisherDesignError
from .experiment import SummaryStats, TrialResult, emit_table, run_batch
from .filter import LikelihoodCurve, grid_mle, run_filter
from .mca import validate
from .models import MODELS
from .policy_io import describe, load_policy, save_policy
from .sde import Trajectory, path_log_likelihood

log = logging.getLogger("fisher_design")

RESULT_FIELDS = ("trial_index", "seed", "estimate", "in_range", "payoff", "min_ess",
                 "duration", "control", "true_theta")
SUMMARY_FIELDS = ("duration", "control", "true_theta", "n_trials", "in_range", "mean", "bias",
                  "std_dev", "std_dev_err", "mean_payoff", "payoff_se", "n_failed")


def fmt(x) -> str:
    """17 significant digits: enough to round-trip any double."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _load_policy_for(cfg: RunConfig, path):
    return load_policy(path, expect_model=cfg.model, expect_grid=cfg.grid())


# commands ---------------------------------------------------------------------

def cmd_solve(args):
    cfg = parse_config(args.config)
    model = cfg.build_model()
    grid = cfg.grid()
    mca = cfg.mca_config(model)
    prior = cfg.prior()
    controls = cfg.control_set()
    report = validate(model, grid, mca, prior.thetas, controls.values)
    print(report)
    if not report.ok:
        raise FisherDesignError("Markov chain approximation is unstable for this grid and dt_h; see report")
    horizon = args.horizon if args.horizon is not None else cfg.policy_horizon
    policy, V0 = solve_policy(model, grid, mca, controls, prior, horizon)
    save_policy(policy, args.out)
    print(f"wrote {args.out}: {policy.n_t} steps x {grid.size} cells")
    return 0


def _control_for(cfg, args):
    if args.policy and args.constant is not None:
        raise ConfigError("give either --policy or --constant, not both")
    if args.policy:
        return _load_policy_for(cfg, args.policy)
    if args.constant is not None:
        return float(args.constant)
    raise ConfigError("simulate needs --policy P or --constant U")


def cmd_simulate(args):
    cfg = parse_config(args.config)
    control = _control_for(cfg, args)
    over = {}
    if args.trials is not None:
        over["n_trials"] = args.trials
    if args.seed is not None:
        over["seed"] = args.seed
    if args.horizon is not None:
        over["horizon"] = args.horizon
    exp = cfg.experiment_config(**over)
    res = run_batch(exp, control)
    s = res.stats
    rows = [(t.trial_index, t.seed, t.estimate, t.in_range, t.payoff, t.min_ess,
             s.duration, s.control, s.true_theta) for t in res.trials]
    write_csv(args.out, RESULT_FIELDS, rows)
    summary = Path(args.out).with_suffix(".summary.csv")
    write_csv(summary, SUMMARY_FIELDS, [[getattr(s, f) for f in SUMMARY_FIELDS]])
    for t, msg in sorted(res.failures.items()):
        print(f"trial {t} failed: {msg}", file=sys.stderr)
    print(emit_table([s]), end="")
    return 0


def read_results(path) -> SummaryStats:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = [f for f in ("estimate", "in_range", "duration", "control", "true_theta")
               if rows and f not in rows[0]]
    if not rows or missing:
        raise ConfigError(f"{path}: not a results file" + (f" (missing {missing})" if missing else " (no rows)"))
    trials = [TrialResult(int(r["trial_index"]), int(r["seed"]), float(r["estimate"]),
                          r["in_range"] == "1", float(r["payoff"])) for r in rows]
    first = rows[0]
    return SummaryStats.from_trials(trials, float(first["true_theta"]), float(first["duration"]),
                                    first["control"])


def cmd_report(args):
    stats = [read_results(p) for p in args.results]
    print(emit_table(stats, delimiter=args.delimiter), end="")
    return 0


def read_observations(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "time":
            raise ConfigError(f"{path}: first column must be 'time'", line=1)
        rows = []
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ConfigError(f"{path}: malformed number", line=no) from None
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != len(header):
        raise ConfigError(f"{path}: expected {len(header)} columns per row")
    return arr[:, 0], arr[:, 1:]


def cmd_estimate(args):
    cfg = parse_config(args.config)
    model = cfg.build_model()
    prior = cfg.prior()
    times, Y = read_observations(args.observations)
    policy = _load_policy_for(cfg, args.policy) if args.policy else None
    u_const = float(args.constant) if args.constant is not None else cfg.controls[0]
    obs = cfg.observation_model()
    if obs is None:
        # full observation: rows are states at 0, dt, 2 dt, ...
        dt = float(np.mean(np.diff(times))) if len(times) > 1 else cfg.dt
        if not np.allclose(np.diff(times), dt, rtol=1e-6, atol=1e-12):
            raise ConfigError("full-observation records must be equally spaced")
        if policy is not None:
            u = np.array([lookup_control(policy, Y[i], times[i] - times[0]) for i in range(len(Y) - 1)])
        else:
            u = np.full(len(Y) - 1, u_const)
        traj = Trajectory(times[0], dt, Y, u)
        curve = LikelihoodCurve(prior.theta_array, path_log_likelihood(model, traj, prior.theta_array))
    else:
        k = obs.steps_per_observation(cfg.dt)
        expected = obs.period * np.arange(1, len(times) + 1)
        if not np.allclose(times, expected, rtol=1e-9, atol=1e-9 * obs.period):
            raise ConfigError(f"observation times must be period, 2*period, ... with period {obs.period}")
        if policy is not None:
            controls = lambda est, t: lookup_control(policy, est, t)  # noqa: E731
        else:
            controls = np.full(len(times) * k, u_const)
        res = run_filter(model, obs, Y, prior.theta_array, controls, cfg.dt, cfg.particles,
                         np.asarray(cfg.x0), seed=cfg.seed, resample=cfg.resample)
        curve = res.curve
        print(f"min effective sample fraction {res.min_ess:.4g}")
    mle = grid_mle(curve)
    write_csv(args.out, ("theta", "loglik"), zip(curve.thetas, curve.loglik))
    print(f"estimate {fmt(mle.estimate)} in_range {int(mle.in_range)}")
    return 0


def cmd_payoff(args):
    cfg = parse_config(args.config)
    model = cfg.build_model()
    if args.policy:
        pol = _load_policy_for(cfg, args.policy)
        if pol.controls != cfg.control_set() or pol.prior.thetas != cfg.prior().thetas:
            raise ConfigError("policy file controls/prior differ from the config")
    horizons = [float(h) for h in args.horizons.split(",") if h.strip()]
    rows = payoff_curve(model, cfg.grid(), cfg.mca_config(model), cfg.control_set(), cfg.prior(),
                        horizons, cfg.x0)
    header = ("horizon", "payoff", "payoff_per_time")
    if args.out:
        write_csv(args.out, header, rows)
    print(",".join(header))
    for r in rows:
        print(",".join(fmt(v) for v in r))
    return 0


def cmd_config(args):
    if args.dump_defaults:
        names = [args.model] if args.model else sorted(MODELS)
        for n in names:
            if n not in MODELS:
                raise ConfigError(f"unknown model {n!r}")
            print(dump_defaults(n))
        return 0
    if args.check:
        cfg = parse_config(args.check)
        print(f"{args.check}: ok ({cfg.model}, grid {cfg.grid().n}, {len(cfg.controls)} controls)")
        return 0
    raise ConfigError("config needs --dump-defaults or --check FILE")


def cmd_describe(args):
    print(describe(load_policy(args.policy)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fisher-design", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="compute and save an optimal policy")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=float, help="override the policy horizon")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="run closed-loop trials")
    s.add_argument("--config", required=True)
    s.add_argument("--policy")
    s.add_argument("--constant", type=float)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--horizon", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="MLE from an observation record")
    s.add_argument("--config", required=True)
    s.add_argument("--observations", required=True)
    s.add_argument("--policy")
    s.add_argument("--constant", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("report", help="comparison table of result files")
    s.add_argument("--results", nargs="+", required=True)
    s.add_argument("--delimiter", help="emit delimited text instead of aligned columns")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("payoff", help="payoff / T for several horizons")
    s.add_argument("--config", required=True)
    s.add_argument("--policy")
    s.add_argument("--horizons", required=True, help="comma-separated, e.g. 4,7,15,30")
    s.add_argument("--out")
    s.set_defaults(func=cmd_payoff)

    s = sub.add_parser("config", help="print presets or check a config file")
    s.add_argument("--dump-defaults", action="store_true")
    s.add_argument("--model")
    s.add_argument("--check")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("describe", help="print a policy file header")
    s.add_argument("policy")
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as err:
        kind, status, message = type(err).__name__, 2, str(err)
    except (FisherDesignError, ValueError, ArithmeticError) as err:
        kind, status, message = type(err).__name__, 1, str(err)
    except OSError as err:
        kind, status = "OSError", 1
        message = f"{err.strerror}: {err.filename}" if err.filename else str(err)
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
