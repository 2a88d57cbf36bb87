"""Randomised harnesses checking the contraction and projection results on finite MDPs.

Every trial draws from its own generator, seeded by ``(seed, trial index)``,
so a failing instance can be replayed alone with :func:`trial_rng`.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    FiniteDistribution,
    ValueDistributionTable,
    interval_l1,
    inverse_cdf,
    maximal_wasserstein,
    project_table,
    projection_winf_identity,
    quantile_projection,
    wasserstein_p,
)
from .mdp import FiniteMdp, Policy, build_counterexample_mdp, random_mdp, random_policy
from .oracle import apply_distributional_bellman

CONTRACTION_SLACK = 1e-9
EXACT_TOL = 1e-12
QUANTILE_COUNTS = (1, 2, 4, 8)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("QDRL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Report:
    name: str
    trials: int
    violations: int = 0
    max_ratio: float = 0.0
    failing_instances: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials, "violations": self.violations,
                "max_ratio": self.max_ratio, "failing_instances": self.failing_instances,
                **self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)


def _merge(name: str, trials: int, results) -> Report:
    rep = Report(name, trials)
    for ratio, failure in results:
        if ratio is not None and ratio > rep.max_ratio:
            rep.max_ratio = ratio
        if failure is not None:
            rep.violations += 1
            if len(rep.failing_instances) < 20:
                rep.failing_instances.append(failure)
    return rep


def _run_chunk(args):
    fn, seed, lo, hi = args
    return [fn(seed, i) for i in range(lo, hi)]


def _run_trials(fn, trials: int, seed: int, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or trials < 2 * workers:
        return [fn(seed, i) for i in range(trials)]
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    chunks = [(fn, seed, int(lo), int(hi)) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for part in pool.map(_run_chunk, chunks) for r in part]


def _quantile_table(theta: np.ndarray) -> ValueDistributionTable:
    return ValueDistributionTable.from_quantile_array(theta)


def _random_pair(rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
    z1 = rng.normal(0.0, rng.uniform(0.1, 3.0), size=shape)
    kind = rng.integers(4)
    if kind == 0:
        z2 = z1.copy()
    elif kind == 1:
        z2 = z1 + rng.normal(0.0, 1e-3, size=shape)
    elif kind == 2:
        z2 = z1 + rng.uniform(-1, 1)  # rigid shift
    else:
        z2 = rng.normal(0.0, rng.uniform(0.1, 3.0), size=shape)
    return z1, z2


def _instance(mdp: FiniteMdp, policy, **arrays) -> dict:
    doc = {"mdp": mdp.to_dict(), "policy": policy.action_probs.tolist()}
    doc.update({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in arrays.items()})
    return doc


def contraction_trial(seed: int, trial: int):
    rng = trial_rng(seed, trial)
    mdp = random_mdp(rng)
    policy = random_policy(rng, mdp.n_states, mdp.n_actions)
    n = int(rng.choice(QUANTILE_COUNTS))
    z1, z2 = _random_pair(rng, (mdp.n_states, mdp.n_actions, n))
    t1, t2 = _quantile_table(z1), _quantile_table(z2)
    rhs = maximal_wasserstein(t1, t2, math.inf)
    b1 = project_table(apply_distributional_bellman(mdp, policy, t1, merge_tol=0.0), n)
    b2 = project_table(apply_distributional_bellman(mdp, policy, t2, merge_tol=0.0), n)
    lhs = maximal_wasserstein(b1, b2, math.inf)
    ratio = lhs / rhs if rhs > 0 else None
    failure = None
    if lhs > mdp.gamma * rhs + CONTRACTION_SLACK:
        failure = {"trial": trial, "seed": seed, "lhs": lhs, "rhs": rhs, "gamma": mdp.gamma,
                   "N": n, **_instance(mdp, policy, z1=z1, z2=z2)}
    return ratio, failure


def verify_projected_contraction(trials: int, seed: int = 0) -> Report:
    """Check d_inf(Pi T Z1, Pi T Z2) <= gamma * d_inf(Z1, Z2) on random MDPs and quantile tables.

    ``max_ratio`` is the largest observed lhs / rhs.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    rep = _merge("contraction", trials, _run_trials(contraction_trial, trials, seed))
    return rep


def _tau_projection(d: FiniteDistribution, tau: float) -> float:
    return inverse_cdf(d, tau)


def dirac_trial(seed: int, trial: int):
    rng = trial_rng(seed, trial)
    base = random_mdp(rng)
    mdp = FiniteMdp(base.transition, np.zeros_like(base.reward), 1.0,
                    np.zeros(base.n_states, dtype=bool), name="dirac")
    policy = random_policy(rng, mdp.n_states, mdp.n_actions)
    z, y = _random_pair(rng, (mdp.n_states, mdp.n_actions, 1))
    # extreme quantiles reduce the projection to min / max over successors
    kind = rng.integers(10)
    tau = {0: 1e-15, 1: 1.0}.get(int(kind), float(1.0 - rng.random()))
    tz = apply_distributional_bellman(mdp, policy, _quantile_table(z), merge_tol=0.0)
    ty = apply_distributional_bellman(mdp, policy, _quantile_table(y), merge_tol=0.0)
    lhs = max(abs(_tau_projection(tz[k], tau) - _tau_projection(ty[k], tau)) for k in tz)
    rhs = float(np.max(np.abs(z - y)))
    ratio = lhs / rhs if rhs > 0 else None
    failure = None
    if lhs > rhs + CONTRACTION_SLACK:
        failure = {"trial": trial, "seed": seed, "tau": tau, "lhs": lhs, "rhs": rhs,
                   **_instance(mdp, policy, z=z, y=y)}
    return ratio, failure


def verify_single_dirac_case(trials: int, seed: int = 0) -> Report:
    """Non-expansion of the tau-quantile Dirac projection after a zero-reward, gamma = 1 backup."""
    if trials < 1:
        raise ValueError("need at least one trial")
    return _merge("dirac", trials, _run_trials(dirac_trial, trials, seed))


def verify_non_expansion_counterexample(p_values=(1.0, 1.5, 2.0, 4.0)) -> Report:
    """Evaluate the three-state construction where the projected backup expands d_p."""
    mdp, z, y = build_counterexample_mdp()
    policy = Policy(np.ones((mdp.n_states, mdp.n_actions)))
    bz = project_table(apply_distributional_bellman(mdp, policy, z, merge_tol=0.0), 2)
    by = project_table(apply_distributional_bellman(mdp, policy, y, merge_tol=0.0), 2)
    rep = Report("counterexample", len(p_values))
    rows = []
    for p in p_values:
        if not (p >= 1 and math.isfinite(p)):
            raise ValueError(f"p must lie in [1, inf), got {p!r}")
        before = maximal_wasserstein(z, y, p)
        after = maximal_wasserstein(bz, by, p)
        factor = after / before
        rows.append({"p": p, "d_before": before, "d_after": after, "factor": factor})
        rep.max_ratio = max(rep.max_ratio, factor)
        if abs(before - 2.0 ** (-1.0 / p)) > EXACT_TOL or abs(after - 1.0) > EXACT_TOL:
            rep.violations += 1
            rep.failing_instances.append(rows[-1])
    rep.details["rows"] = rows
    rep.details["projected_backup_x"] = {"Z": bz[(0, 0)].to_pairs(), "Y": by[(0, 0)].to_pairs()}
    return rep


def random_finite_distribution(rng: np.random.Generator, n_atoms: int | None = None,
                               integer_locs: bool = False) -> FiniteDistribution:
    k = int(rng.integers(1, 12)) if n_atoms is None else n_atoms
    locs = rng.integers(-5, 6, size=k).astype(float) if integer_locs else rng.normal(0, 2, k)
    return FiniteDistribution.from_atoms(locs, rng.dirichlet(np.ones(k)))


def winf_trial(seed: int, trial: int):
    rng = trial_rng(seed, trial)
    # integer atoms exercise ties and shared CDF breakpoints
    integer = bool(rng.integers(2))
    nu1 = random_finite_distribution(rng, integer_locs=integer)
    nu2 = random_finite_distribution(rng, integer_locs=integer)
    n = int(rng.integers(1, 17))
    lhs, rhs = projection_winf_identity(nu1, nu2, n)
    failure = None
    if abs(lhs - rhs) > EXACT_TOL:
        failure = {"trial": trial, "seed": seed, "N": n, "lhs": lhs, "rhs": rhs,
                   "nu1": nu1.to_pairs(), "nu2": nu2.to_pairs()}
    return None, failure


def verify_winf_identity(trials: int, seed: int = 0) -> Report:
    """W_inf between N-quantile projections equals the largest midpoint-quantile gap."""
    return _merge("winf-identity", trials, _run_trials(winf_trial, trials, seed))


def midpoint_minimizer_gap(d: FiniteDistribution, tau: float, tau2: float,
                           resolution: float = 1e-4) -> float:
    """How far a grid search over theta beats F^-1((tau + tau2) / 2) on the interval L1 objective.

    The grid spans the support with spacing ``resolution`` times its width.
    Returns best-grid-objective minus midpoint objective (<= 0 means the grid
    found something at least as good).
    """
    mid = 0.5 * (tau + tau2)
    theta_star = inverse_cdf(d, mid) if mid > 0 else float(d.locs[0])
    best_mid = interval_l1(d, tau, tau2, theta_star)
    lo, hi = float(d.locs[0]), float(d.locs[-1])
    span = hi - lo
    if span == 0:
        return 0.0
    grid = np.linspace(lo, hi, int(round(1.0 / resolution)) + 1)
    cum = d.cum
    left = np.concatenate(([0.0], cum[:-1]))
    w = np.clip(cum, tau, tau2) - np.clip(left, tau, tau2)
    obj = np.abs(d.locs[None, :] - grid[:, None]) @ w
    return best_mid - float(obj.min())


def minimizer_trial(seed: int, trial: int):
    rng = trial_rng(seed, trial)
    d = random_finite_distribution(rng, integer_locs=bool(rng.integers(2)))
    a, b = np.sort(rng.random(2))
    if rng.integers(5) == 0:
        a = 0.0
    gap = midpoint_minimizer_gap(d, float(a), float(b))
    failure = None
    if gap > 1e-6:
        failure = {"trial": trial, "seed": seed, "tau": a, "tau2": b, "gap": gap,
                   "F": d.to_pairs()}
    return None, failure


def verify_midpoint_minimizer(trials: int, seed: int = 0) -> Report:
    return _merge("midpoint-minimizer", trials, _run_trials(minimizer_trial, trials, seed))


def brute_force_projection_gap(y: FiniteDistribution, n: int, rng: np.random.Generator,
                               candidates: int = 1000, refine: int = 5) -> float:
    """Smallest W1(y, candidate) - W1(y, projection) over random and refined candidates."""
    proj = wasserstein_p(y, quantile_projection(y, n).to_finite(), 1.0)
    lo, hi = float(y.locs[0]), float(y.locs[-1])
    pad = 0.1 * (hi - lo) + 1e-3
    best = math.inf

    def w1(theta):
        return wasserstein_p(y, FiniteDistribution.from_atoms(theta), 1.0)

    for _ in range(candidates):
        theta = rng.uniform(lo - pad, hi + pad, n)
        if rng.random() < 0.5:
            theta = rng.choice(y.locs, n)
        best = min(best, w1(theta))
    # coordinate descent over atom positions, restricted to support points and midpoints
    grid = np.unique(np.concatenate([y.locs, 0.5 * (y.locs[1:] + y.locs[:-1])]))
    for _ in range(refine):
        theta = np.sort(rng.choice(y.locs, n))
        val = w1(theta)
        for _sweep in range(5):
            improved = False
            for k in range(n):
                for g in grid:
                    trial = theta.copy()
                    trial[k] = g
                    v = w1(trial)
                    if v < val - 1e-15:
                        theta, val, improved = trial, v, True
            if not improved:
                break
        best = min(best, val)
    return best - proj
