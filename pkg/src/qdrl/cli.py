"""Command-line entry point: ``qdrl gridworld-eval | train-qrdqn | verify``.

Exit codes: 0 success, 1 verification violation, 2 argument error, 3 I/O error.

Seeding: gridworld-eval and the bias check draw from
``np.random.SeedSequence(seed, spawn_key=(stream,))`` where ``seed`` is one of
the ``--seed`` values and ``stream`` identifies the stage (see ``STREAMS``).
A QR-DQN run seeds its generator with the run seed.
Verification harnesses use the trial index as the spawn key instead.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import biased_gradient_demo
from .mdp import (
    build_chain_mdp,
    build_windy_gridworld,
    exact_value,
    expected_steps,
    policy_iteration,
    state_values,
)
from .network import mlp_forward
from .oracle import monte_carlo_returns
from .distributions import FiniteDistribution, tau_hat
from .qrdqn import AgentConfig, greedy_action, train_qrdqn
from .qrtd import ALGOS, EvalConfig, run_policy_evaluation
from .verification import (
    Report,
    verify_non_expansion_counterexample,
    verify_projected_contraction,
    verify_single_dirac_case,
    verify_winf_identity,
    worker_count,
)

EXIT_OK, EXIT_VIOLATION, EXIT_ARGS, EXIT_IO = 0, 1, 2, 3

STREAMS = {"mc": 0, "td0": 1, "qrtd": 2, "qrtd_all_pairs": 3, "bias": 4}

ENVS = {"chain": build_chain_mdp, "gridworld": build_windy_gridworld}

# Reaching the goal by uniform exploration from the fixed start takes about
# 1.7e4 steps on average, so gridworld training starts episodes anywhere.
ENV_AGENT_DEFAULTS = {
    "chain": {"total_steps": 3000, "epsilon_decay_steps": 1500},
    "gridworld": {"total_steps": 20_000, "epsilon_decay_steps": 10_000, "lr": 1e-3,
                  "exploring_starts": True, "max_episode_steps": 200, "eval_every": 2000},
}

VERIFY_DEFAULT_TRIALS = {"contraction": 10_000, "dirac": 10_000, "winf-identity": 1000,
                         "bias": 10_000}
BIAS_MIN_TRIALS = 10_000


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str
    config_path: Path | None
    out: Path
    seeds: tuple = ()
    overrides: dict = field(default_factory=dict)

    def resolve_seeds(self, doc: dict) -> tuple:
        """--seed wins over the config file; seed 0 when neither gives one."""
        seeds = tuple(self.seeds) or tuple(doc.get("seeds", ())) or (0,)
        if not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise UsageError(f"seeds must be non-negative integers, got {list(seeds)}")
        return seeds


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[stream],)))


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("need at least one non-negative seed")
    return seeds


def _parse_override(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=_parse_seeds, help="seed or comma-separated seeds")
    common.add_argument("--set", dest="overrides", type=_parse_override, action="append",
                        default=[], metavar="KEY=VALUE", help="override a config field")

    parser = argparse.ArgumentParser(prog="qdrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gridworld-eval", parents=[common],
                       help="TD(0) and QRTD policy evaluation on the windy gridworld")
    g.add_argument("--episodes", type=_non_negative)

    t = sub.add_parser("train-qrdqn", parents=[common], help="train QR-DQN on a toy MDP")
    t.add_argument("--env", default="chain")
    t.add_argument("--kappa", type=float, help="train a single kappa instead of 0 and 1")
    t.add_argument("--steps", type=_non_negative, help="environment steps per run")
    t.add_argument("--episodes", type=_non_negative, help=argparse.SUPPRESS)

    v = sub.add_parser("verify", parents=[common], help="run a verification harness")
    v.add_argument("which", choices=["contraction", "dirac", "counterexample", "bias",
                                     "winf-identity", "all"])
    v.add_argument("--trials", type=_non_negative, help="number of randomized trials")
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror}") from e
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _dump_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _map(fn, jobs: list) -> list:
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# gridworld-eval ------------------------------------------------------------

def _eval_job(job):
    cfg, seed, algo, gt_pairs = job
    mdp = build_windy_gridworld()
    policy = policy_iteration(mdp)
    truth = FiniteDistribution.from_pairs(gt_pairs)
    snaps = range(cfg.dump_every, cfg.episodes + 1, cfg.dump_every) if cfg.dump_every else ()
    run = run_policy_evaluation(mdp, policy, algo, cfg.episodes, cfg, stream_rng(seed, algo),
                                truth, snapshot_episodes=[1, 100, *snaps])
    return seed, algo, run.records, run.snapshots


def cmd_gridworld_eval(exp: ExperimentConfig, episodes: int | None = None) -> int:
    doc = _load_config(exp.config_path)
    doc.update(exp.overrides)
    if episodes is not None:
        doc["episodes"] = episodes
    doc["seeds"] = list(exp.resolve_seeds(doc))
    try:
        cfg = EvalConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    out = _prepare_out(exp.out)

    mdp = build_windy_gridworld()
    policy = policy_iteration(mdp)
    x0 = mdp.start_state
    base = cfg.seeds[0]
    returns = monte_carlo_returns(mdp, policy, x0, cfg.mc_rollouts, stream_rng(base, "mc"))
    truth = FiniteDistribution.empirical(returns)
    ground = {
        "state": int(x0),
        "rollouts": cfg.mc_rollouts,
        "seed": base,
        "mc_mean": truth.mean(),
        "exact_value": float(state_values(mdp, policy)[x0]),
        "expected_steps": float(expected_steps(mdp, policy)[x0]),
        "distribution": truth.to_pairs(),
        "config": {**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                   "seeds": list(cfg.seeds), "algos": list(cfg.algos)},
    }
    jobs = [(cfg, s, a, truth.to_pairs()) for s in cfg.seeds for a in cfg.algos]
    results = _map(_eval_job, jobs)

    curve_rows, z_rows = [], []
    taus = tau_hat(cfg.N)
    for seed, algo, records, snaps in results:
        curve_rows += [(r.episode, algo, seed, r.sq_mean_err, r.w1_err) for r in records]
        for ep in sorted(snaps):
            if algo == "qrtd":
                z_rows += [(ep, seed, i + 1, taus[i], th) for i, th in enumerate(snaps[ep])]
    curve_rows.sort(key=lambda r: (r[0], ALGOS.index(r[1]), r[2]))
    z_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    _write_csv(out / "curves.csv", ["episode", "algo", "seed", "sq_mean_err", "w1_err"],
               curve_rows)
    _write_csv(out / "zdist.csv", ["episode", "seed", "i", "tau_hat", "theta"], z_rows)
    _dump_json(out / "ground_truth.json", ground)
    print(f"gridworld-eval: {len(curve_rows)} curve rows, MC mean {truth.mean():.6f} "
          f"(exact {ground['exact_value']:.6f}) -> {out}")
    return EXIT_OK


# train-qrdqn ---------------------------------------------------------------

def _train_job(job):
    env_name, cfg_doc = job
    env = ENVS[env_name]()
    cfg = AgentConfig.from_dict(cfg_doc)
    res = train_qrdqn(env, cfg)
    pi = policy_iteration(env)
    q_star = exact_value(env, pi)
    live = ~env.terminal
    x0 = env.start_state
    theta0 = mlp_forward(res.params, np.eye(env.n_states)[x0])
    a0 = greedy_action(theta0)
    summary = {
        "seed": cfg.seed,
        "kappa": cfg.kappa,
        "greedy_actions": res.policy.greedy_actions().tolist(),
        "optimal_actions": pi.greedy_actions().tolist(),
        "matches_optimal": bool(np.array_equal(res.policy.greedy_actions()[live],
                                               pi.greedy_actions()[live])),
        "start_action": int(a0),
        "start_theta_mean": float(theta0[a0].mean()),
        "start_q_star": float(q_star[x0, a0]),
        "greedy_return": float(state_values(env, res.policy)[x0]),
        "optimal_return": float(state_values(env, pi)[x0]),
        "expected_steps": float(expected_steps(env, res.policy)[x0]),
        "optimal_expected_steps": float(expected_steps(env, pi)[x0]),
    }
    return cfg.kappa, cfg.seed, res.records, summary, res.params.to_dict()


def cmd_train_qrdqn(exp: ExperimentConfig, env_name: str, kappa: float | None,
                    steps: int | None) -> int:
    if env_name not in ENVS:
        raise UsageError(f"unknown env {env_name!r}; valid names: {', '.join(sorted(ENVS))}")
    doc = dict(ENV_AGENT_DEFAULTS[env_name])
    doc.update(_load_config(exp.config_path))
    doc.update(exp.overrides)
    seeds = exp.resolve_seeds(doc)
    doc.pop("seeds", None)
    if steps is not None:
        doc["total_steps"] = steps
    kappas = (float(kappa),) if kappa is not None else (0.0, 1.0)
    doc.pop("seed", None)
    doc.pop("kappa", None)
    try:
        AgentConfig.from_dict({**doc, "kappa": kappas[0]})
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    out = _prepare_out(exp.out)
    jobs = [(env_name, {**doc, "kappa": k, "seed": s}) for k in kappas for s in seeds]
    results = _map(_train_job, jobs)
    for k in kappas:
        tag = _kappa_tag(k)
        rows, summaries = [], []
        for kk, seed, records, summary, params in results:
            if kk != k:
                continue
            rows += [(r.step, seed, k, r.greedy_return, r.loss) for r in records]
            summaries.append(summary)
            _dump_json(out / f"params_{tag}_seed{seed}.json", params)
        _write_csv(out / f"curves_{tag}.csv", ["step", "seed", "kappa", "greedy_return", "loss"],
                   rows)
        _dump_json(out / f"final_policy_{tag}.json",
                   {"env": env_name, "kappa": k, "config": {**doc, "kappa": k},
                    "runs": summaries})
        hits = sum(s["matches_optimal"] for s in summaries)
        print(f"train-qrdqn {env_name} kappa={k:g}: greedy policy optimal on "
              f"{hits}/{len(summaries)} seeds")
    return EXIT_OK


def _kappa_tag(k: float) -> str:
    return f"kappa{int(k)}" if float(k).is_integer() else f"kappa{k:g}"


# verify --------------------------------------------------------------------

def _bias_report(trials: int, seed: int) -> tuple[Report, str]:
    trials = max(trials, BIAS_MIN_TRIALS)
    b = biased_gradient_demo(3, 3, 1.0, trials, stream_rng(seed, "bias"))
    rep = Report("bias", trials)
    if not (b.wass_biased and b.qr_unbiased):
        rep.violations = 1
    rep.details.update({"N": b.n, "m": b.m, "p": b.p,
                        "wass_grad_mean": b.wass_grad_mean,
                        "wass_grad_stderr": b.wass_grad_stderr,
                        "qr_grad_mean": b.qr_grad_mean, "qr_grad_stderr": b.qr_grad_stderr,
                        "wass_biased": b.wass_biased, "qr_unbiased": b.qr_unbiased})
    return rep, b.to_csv()


def cmd_verify(exp: ExperimentConfig, which: str, trials: int | None) -> int:
    doc = _load_config(exp.config_path)
    doc.update(exp.overrides)
    unknown = set(doc) - {"trials", "seeds"}
    if unknown:
        raise UsageError(f"unknown verify config keys: {sorted(unknown)}")
    if trials is None:
        trials = doc.get("trials")
    out = _prepare_out(exp.out)
    seed = exp.resolve_seeds(doc)[0]
    names = ["counterexample", "contraction", "dirac", "winf-identity", "bias"] \
        if which == "all" else [which]

    def n(name):
        return VERIFY_DEFAULT_TRIALS[name] if trials is None else int(trials)

    status = EXIT_OK
    for name in names:
        extra = None
        if name == "counterexample":
            rep = verify_non_expansion_counterexample()
        elif name == "contraction":
            rep = verify_projected_contraction(n(name), seed)
        elif name == "dirac":
            rep = verify_single_dirac_case(n(name), seed)
        elif name == "winf-identity":
            rep = verify_winf_identity(n(name), seed)
        else:
            rep, extra = _bias_report(n(name), seed)
        _write_text(out / f"{name}.json", rep.to_json() + "\n")
        if extra is not None:
            _write_text(out / "bias.csv", extra)
        print(_summary_line(rep))
        if not rep.ok:
            status = EXIT_VIOLATION
    return status


def _summary_line(rep: Report) -> str:
    head = f"{rep.name}: {'PASS' if rep.ok else 'FAIL'} trials={rep.trials} " \
           f"violations={rep.violations}"
    if rep.name == "counterexample":
        parts = [f"p={r['p']:g} d_before={r['d_before']:.12g} d_after={r['d_after']:.12g} "
                 f"factor={r['factor']:.12g}" for r in rep.details["rows"]]
        return head + "\n  " + "\n  ".join(parts)
    if rep.name == "bias":
        d = rep.details
        return head + (f" wass_grad={d['wass_grad_mean']:.5f}+-{d['wass_grad_stderr']:.5f}"
                       f" qr_grad={d['qr_grad_mean']:.5f}+-{d['qr_grad_stderr']:.5f}")
    if rep.name == "contraction":
        return head + f" max_ratio={rep.max_ratio:.6f}"
    return head


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_ARGS
    try:
        exp = ExperimentConfig(args.command, args.config, args.out,
                               args.seed or (), dict(args.overrides))
        if args.command == "gridworld-eval":
            return cmd_gridworld_eval(exp, args.episodes)
        if args.command == "train-qrdqn":
            steps = args.steps if args.steps is not None else args.episodes
            return cmd_train_qrdqn(exp, args.env, args.kappa, steps)
        return cmd_verify(exp, args.which, args.trials)
    except UsageError as e:
        print(f"qdrl: error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as e:
        print(f"qdrl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
