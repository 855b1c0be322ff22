"""Command line front end.

Two subcommands: ``run`` executes one experiment described by a YAML file
and writes its artifacts into an output directory; ``compare`` rolls several
controllers over the same disturbance draws (common random numbers) and
reports relative closed-loop cost. Exit codes: 0 on success, 2 for a
configuration problem, 3 for a runtime failure.

Every experiment is deterministic given the config file: the mandatory
``seed`` drives all randomness, and the CSV artifacts are byte-identical
across reruns of the same config.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
import yaml

from .envs import make_evaporation_like_env, make_lti_env, rollout
from .errors import ConfigError, QmpcError
from .learner import CondensedQFunction, LearnerConfig, MpcQFunction, enforce_pd, train
from .lqr import LqrTheta, gain_from, q1_exact, riccati_residual, solve_riccati, v0_exact, v1_exact, wrong_td_error
from .ocp import condense_lti
from .params import ThetaNonCondensed

EXPERIMENTS = ("lqr-validation", "wrong-model", "lqr-learning", "evaporation")


def load_config(path, seed=None):
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a mapping")
    if "experiment" not in cfg:
        raise ConfigError("missing required field 'experiment'")
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{cfg['experiment']}'; expected one of {', '.join(EXPERIMENTS)}")
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise ConfigError("missing required field 'seed'")
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
        raise ConfigError("field 'seed' must be an integer")
    return cfg


def _section(cfg, name):
    sub = cfg.get(name, {})
    if sub is None:
        sub = {}
    if not isinstance(sub, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    return sub


def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"missing required field '{where}{key}'")
    return d[key]


def _arr(value):
    return np.asarray(value, dtype=float)


def _build_lti_env(env_cfg):
    A = _arr(_require(env_cfg, "A", "env."))
    B = _arr(_require(env_cfg, "B", "env."))
    n, m = A.shape[0], B.shape[1] if B.ndim == 2 else 1
    B = B.reshape(n, m)
    T = _arr(env_cfg.get("T", np.eye(n)))
    S = _arr(env_cfg.get("S", np.zeros((n, m))))
    R = _arr(env_cfg.get("R", np.eye(m)))
    gamma = float(env_cfg.get("gamma", 0.95))
    noise_sigma = env_cfg.get("noise_sigma", 0.1)
    kwargs = {}
    for key in ("u_lo", "u_hi", "init_state"):
        if key in env_cfg:
            kwargs[key] = _arr(env_cfg[key])
    return make_lti_env(A, B, T, S, R, gamma, noise_sigma=noise_sigma, **kwargs)


def _build_env(cfg):
    env_cfg = _section(cfg, "env")
    if cfg["experiment"] == "evaporation":
        return make_evaporation_like_env(
            gamma=float(env_cfg.get("gamma", 0.95)),
            noise_on=bool(env_cfg.get("noise", True)),
            init_state=_arr(env_cfg["init_state"]) if "init_state" in env_cfg else None,
        )
    return _build_lti_env(env_cfg)


def naive_theta_structured(n_x, n_u, x_lo=None, x_hi=None, pd_eps=1e-6,
                           x_ref=None, u_ref=None, w_x=1.0, w_u=1.0):
    """Hand-tuned starting parameters: quadratic tracking cost plus bounds.

    The stage model is 0.5 (v - v_ref)' W (v - v_ref) over v = (x, u) with
    W = diag(w_x I, w_u I), the kind of setpoint tuning a practitioner would
    write down before any learning. Without references this reduces to an
    identity stage cost centered at the origin. Everything else starts at
    zero (the PD floor lifts the terminal block to pd_eps).
    """
    th = ThetaNonCondensed.zeros(n_x, n_u)
    wdiag = np.concatenate([np.full(n_x, float(w_x)), np.full(n_u, float(w_u))])
    v_ref = np.concatenate([
        np.zeros(n_x) if x_ref is None else _arr(x_ref),
        np.zeros(n_u) if u_ref is None else _arr(u_ref),
    ])
    th.H_l = np.diag(wdiag)
    th.h_l = -wdiag * v_ref
    th.c_l = 0.5 * float(wdiag @ v_ref ** 2)
    if x_lo is not None:
        th.x_lo = _arr(x_lo).copy()
    if x_hi is not None:
        th.x_hi = _arr(x_hi).copy()
    return enforce_pd(th, pd_eps)


def _learner_config(cfg):
    sec = _section(cfg, "learner")
    allowed = {"alpha", "epsilon", "explore_sigma", "mode", "n_upd", "pd_eps",
               "gn_tol", "gn_max_iter", "max_fail_frac"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown learner field(s): {', '.join(sorted(unknown))}")
    try:
        return LearnerConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad learner section: {exc}") from exc


def _build_qfun(cfg, env, pd_eps):
    mpc = _section(cfg, "mpc")
    N = int(mpc.get("N", 10))
    par = mpc.get("parametrization", "structured")
    spec = env.spec
    theta = naive_theta_structured(
        spec.n_s, spec.n_a, spec.x_lo, spec.x_hi, pd_eps,
        x_ref=_arr(mpc["x_ref"]) if "x_ref" in mpc else None,
        u_ref=_arr(mpc["u_ref"]) if "u_ref" in mpc else None,
        w_x=float(mpc.get("w_x", 1.0)),
        w_u=float(mpc.get("w_u", 1.0)),
    )
    if par == "structured":
        return MpcQFunction(theta, env.model(), N, spec.gamma, u_lo=spec.u_lo, u_hi=spec.u_hi,
                            W_s=float(mpc.get("W_s", 1.0)), w_s=float(mpc.get("w_s", 1.0)))
    if par == "condensed":
        model = env.model()
        if not getattr(model, "linear", False):
            raise ConfigError("the condensed parametrization needs a linear model")
        thetac = condense_lti(theta, model, N, spec.gamma, u_lo=spec.u_lo, u_hi=spec.u_hi)
        return CondensedQFunction(enforce_pd(thetac, pd_eps))
    raise ConfigError(f"unknown parametrization '{par}'")


def _write_summary(path, items):
    with open(path, "w") as fh:
        for key, val in items:
            if isinstance(val, float):
                fh.write(f"{key}: {val:.10g}\n")
            else:
                fh.write(f"{key}: {val}\n")


def _write_trajectory(path, hist, n_s, n_a):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"s{i}" for i in range(n_s)] + [f"a{i}" for i in range(n_a)] + ["cost"])
        for i in range(len(hist.t)):
            writer.writerow([hist.t[i]] + [f"{v:.17g}" for v in hist.state[i]]
                            + [f"{v:.17g}" for v in hist.action[i]] + [f"{hist.cost[i]:.17g}"])


def _violation_fraction(env, states):
    if env.spec.x_lo is None:
        return 0.0
    flags = [bool(np.any(env.violation(s) > 0.0)) for s in states]
    return float(np.mean(flags)) if flags else 0.0


def _run_lqr_validation(cfg, out):
    env = _build_lti_env(_section(cfg, "env"))
    cost = env.cost
    P = solve_riccati(env.A, env.B, cost)
    res = riccati_residual(P, env.A, env.B, cost)
    theta = LqrTheta(A_hat=env.A, B_hat=env.B, P_hat=P)
    K = gain_from(theta, cost)
    rng = np.random.default_rng(cfg["seed"])
    n, m = cost.n_s, cost.n_a
    td_max = 0.0
    fp_gap = 0.0
    min_gap = 0.0
    for _ in range(50):
        s = rng.standard_normal(n)
        a = rng.standard_normal(m)
        td_max = max(td_max, abs(wrong_td_error(theta, cost, env.A, env.B, s, a)))
        # at the Riccati fixed point the one-step value reproduces s'Ps,
        # and the closed-form gain attains it
        fp_gap = max(fp_gap, abs(v1_exact(theta, cost, s) - v0_exact(theta, s)))
        min_gap = max(min_gap, abs(q1_exact(theta, cost, s, -K @ s) - v1_exact(theta, cost, s)))
    _write_summary(os.path.join(out, "summary.txt"), [
        ("experiment", "lqr-validation"),
        ("riccati_residual", float(np.abs(res).max())),
        ("gain_spectral_norm", float(np.linalg.norm(K, 2))),
        ("td_exact_model_max", td_max),
        ("fixed_point_gap_max", fp_gap),
        ("minimizer_gap_max", min_gap),
    ])
    scale = 1.0 + float(np.abs(P).max())
    if np.abs(res).max() > 1e-10 * scale or td_max > 1e-8 * scale or fp_gap > 1e-8 * scale:
        raise QmpcError("validation identities failed; see summary.txt")


def _run_wrong_model(cfg, out):
    env_cfg = _section(cfg, "env")
    env = _build_lti_env(env_cfg)
    cost = env.cost
    n, m = cost.n_s, cost.n_a
    A_hat = _arr(env_cfg.get("A_hat", 1.1 * env.A))
    B_hat = _arr(env_cfg.get("B_hat", env.B))
    rng = np.random.default_rng(cfg["seed"])
    n_phat = int(_section(cfg, "run").get("n_phat", 10))
    n_grid = int(_section(cfg, "run").get("n_grid", 20))
    points = [(rng.standard_normal(n), rng.standard_normal(m)) for _ in range(n_grid)]
    rows = []
    wrong_by_phat = []
    exact_max = 0.0
    for i in range(n_phat):
        G = rng.standard_normal((n, n))
        P_hat = G @ G.T + np.eye(n)
        th_wrong = LqrTheta(A_hat=A_hat, B_hat=B_hat, P_hat=P_hat)
        th_exact = LqrTheta(A_hat=env.A, B_hat=env.B, P_hat=P_hat)
        worst = 0.0
        for s, a in points:
            d_wrong = wrong_td_error(th_wrong, cost, env.A, env.B, s, a)
            d_exact = wrong_td_error(th_exact, cost, env.A, env.B, s, a)
            worst = max(worst, abs(d_wrong))
            exact_max = max(exact_max, abs(d_exact))
            rows.append((i, s, a, d_wrong, d_exact))
        wrong_by_phat.append(worst)
    with open(os.path.join(out, "deltas.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phat"] + [f"s{i}" for i in range(n)] + [f"a{i}" for i in range(m)]
                        + ["delta_wrong_model", "delta_exact_model"])
        for i, s, a, dw, de in rows:
            writer.writerow([i] + [f"{v:.17g}" for v in s] + [f"{v:.17g}" for v in a]
                            + [f"{dw:.17g}", f"{de:.17g}"])
    _write_summary(os.path.join(out, "summary.txt"), [
        ("experiment", "wrong-model"),
        ("exact_model_max_abs_td", exact_max),
        ("wrong_model_min_over_phat_max_abs_td", float(min(wrong_by_phat))),
        ("wrong_model_max_abs_td", float(max(wrong_by_phat))),
    ])


def _evaluate_controllers(env, policies, steps, episodes, seed):
    """Mean closed-loop cost and violation fraction per controller.

    Every controller replays the same disturbance streams (one substream per
    episode), so cost differences come from the policies alone.
    """
    results = {name: [] for name, _ in policies}
    for e in range(episodes):
        for name, qfun in policies:
            rng = np.random.default_rng([seed, e])
            trs = rollout(env, qfun.policy, env.init_state, steps, rng)
            mean_cost = float(np.mean([tr.cost for tr in trs]))
            viol = _violation_fraction(env, [tr.s_next for tr in trs])
            results[name].append((mean_cost, viol))
    return results


def _run_learning(cfg, out):
    env = _build_env(cfg)
    lcfg = _learner_config(cfg)
    qfun = _build_qfun(cfg, env, lcfg.pd_eps)
    run_sec = _section(cfg, "run")
    steps = int(_require(run_sec, "steps", "run."))
    episodes = int(run_sec.get("episodes", 3))
    rng = np.random.default_rng(cfg["seed"])
    failure = None
    try:
        hist = train(env, qfun, steps, lcfg, rng)
    except QmpcError as exc:
        hist = getattr(exc, "history", None)
        if hist is None:
            raise
        failure = exc
    hist.to_td_csv(os.path.join(out, "td.csv"))
    hist.to_theta_csv(os.path.join(out, "theta.csv"))
    _write_trajectory(os.path.join(out, "trajectory.csv"), hist, env.spec.n_s, env.spec.n_a)
    done = len(hist.t)
    k = min(1000, max(done, 1))
    items = [
        ("experiment", cfg["experiment"]),
        ("seed", cfg["seed"]),
        ("steps", steps),
        ("steps_completed", done),
        ("mode", lcfg.mode),
        ("initial_abs_td", hist.initial_abs_td(k)),
        ("final_abs_td", hist.final_abs_td(k)),
        ("mean_cost_first", float(np.mean(hist.cost[:k])) if done else float("nan")),
        ("mean_cost_last", float(np.mean(hist.cost[-k:])) if done else float("nan")),
        ("violation_fraction", _violation_fraction(env, hist.state)),
        ("pd_min_eig", qfun.theta.pd_min_eig()),
        ("fail_pairs", hist.fail_pairs),
        ("fail_updates", hist.fail_updates),
    ]
    if failure is None and episodes > 0:
        naive = _build_qfun(cfg, env, lcfg.pd_eps)
        policies = [("naive", naive), ("learned", qfun)]
        results = _evaluate_controllers(env, policies, min(steps, 1000), episodes, cfg["seed"])
        means = {name: float(np.mean([mc for mc, _ in results[name]])) for name, _ in policies}
        items.append(("eval_episodes", episodes))
        for name, _ in policies:
            items.append((f"{name}.mean_cost", means[name]))
            items.append((f"{name}.violation_fraction",
                          float(np.mean([vf for _, vf in results[name]]))))
        gain = 100.0 * (means["naive"] - means["learned"]) / max(abs(means["naive"]), 1e-300)
        items.append(("learned.gain_vs_naive_pct", gain))
    if failure is not None:
        items.append(("aborted", f"{failure}"))
    _write_summary(os.path.join(out, "summary.txt"), items)
    if failure is not None:
        raise failure


def _load_theta_csv(path, template):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    names = template.names()
    if header[1:] != names:
        raise ConfigError(f"theta file {path} does not match this parametrization")
    if not rows:
        raise ConfigError(f"theta file {path} has no snapshots")
    flat = np.array([float(v) for v in rows[-1][1:]])
    return template.unflatten(flat)


def _run_compare(cfg, out, only=None):
    sec = _section(cfg, "compare")
    controllers = _require(sec, "controllers", "compare.")
    if not isinstance(controllers, list) or not controllers:
        raise ConfigError("compare.controllers must be a non-empty list")
    for i, ctrl in enumerate(controllers):
        if not isinstance(ctrl, dict) or "name" not in ctrl or "kind" not in ctrl:
            raise ConfigError(f"compare.controllers[{i}] needs 'name' and 'kind'")
    if only is not None:
        wanted = [w.strip() for w in only.split(",") if w.strip()]
        by_name = {ctrl["name"]: ctrl for ctrl in controllers}
        missing = [w for w in wanted if w not in by_name]
        if missing:
            raise ConfigError(f"unknown controller name(s): {', '.join(missing)}")
        if not wanted:
            raise ConfigError("--controllers selected an empty set")
        controllers = [by_name[w] for w in wanted]
    run_sec = _section(cfg, "run")
    steps = int(run_sec.get("steps", 1000))
    episodes = int(run_sec.get("episodes", 5))
    env = _build_env(cfg)
    lcfg = _learner_config(cfg)
    policies = []
    for i, ctrl in enumerate(controllers):
        qfun = _build_qfun(cfg, env, lcfg.pd_eps)
        if ctrl["kind"] == "theta-csv":
            theta = _load_theta_csv(_require(ctrl, "path", f"compare.controllers[{i}]."), qfun.theta)
            qfun.set_theta(theta)
        elif ctrl["kind"] != "naive":
            raise ConfigError(f"unknown controller kind '{ctrl['kind']}'")
        policies.append((ctrl["name"], qfun))
    results = _evaluate_controllers(env, policies, steps, episodes, cfg["seed"])
    with open(os.path.join(out, "compare.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["controller", "episode", "mean_cost", "violation_fraction"])
        for name, _ in policies:
            for e, (mc, vf) in enumerate(results[name]):
                writer.writerow([name, e, f"{mc:.17g}", f"{vf:.17g}"])
    base_name = policies[0][0]
    base_mean = float(np.mean([mc for mc, _ in results[base_name]]))
    items = [("experiment", cfg["experiment"]), ("episodes", episodes), ("steps", steps),
             ("baseline", base_name)]
    for name, _ in policies:
        mean_cost = float(np.mean([mc for mc, _ in results[name]]))
        viol = float(np.mean([vf for _, vf in results[name]]))
        gain = 100.0 * (base_mean - mean_cost) / max(abs(base_mean), 1e-300)
        items.append((f"{name}.mean_cost", mean_cost))
        items.append((f"{name}.violation_fraction", viol))
        items.append((f"{name}.gain_vs_baseline_pct", gain))
    _write_summary(os.path.join(out, "summary.txt"), items)


def run_experiment(cfg, out):
    os.makedirs(out, exist_ok=True)
    name = cfg["experiment"]
    if name == "lqr-validation":
        _run_lqr_validation(cfg, out)
    elif name == "wrong-model":
        _run_wrong_model(cfg, out)
    else:
        _run_learning(cfg, out)


def run_compare(cfg, out, only=None):
    os.makedirs(out, exist_ok=True)
    _run_compare(cfg, out, only=only)


def _resolve_out(args, cfg):
    if args.out is not None:
        return args.out
    run_sec = _section(cfg, "run")
    return str(run_sec.get("out_dir", "out"))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="qmpc", description="Q-learning with controller-shaped value functions")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a YAML config")
    p_cmp = sub.add_parser("compare", help="roll controllers on common random numbers")
    for p in (p_run, p_cmp):
        p.add_argument("config")
        p.add_argument("--out", default=None, help="output directory (default: run.out_dir or 'out')")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_cmp.add_argument("--controllers", default=None,
                       help="comma-separated subset of compare.controllers; first is the baseline")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = _resolve_out(args, cfg)
        if args.command == "run":
            run_experiment(cfg, out)
        else:
            run_compare(cfg, out, only=args.controllers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (QmpcError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
