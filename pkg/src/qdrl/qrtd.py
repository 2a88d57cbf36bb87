"""Tabular policy evaluation: quantile-regression TD (QRTD) and the TD(0) baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .distributions import FiniteDistribution, tau_hat, wasserstein_p
from .mdp import FiniteMdp, Policy

ALGOS = ("td0", "qrtd", "qrtd_all_pairs")


@dataclass
class QuantileTable:
    """theta[x, i] estimates the tau_hat_i quantile of the return from state x."""

    theta: np.ndarray
    gamma: float
    taus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2 or not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be a finite (states x N) array")
        self.taus = tau_hat(self.theta.shape[1])

    @classmethod
    def zeros(cls, n_states: int, n: int, gamma: float) -> QuantileTable:
        return cls(np.zeros((n_states, n)), gamma)

    @property
    def n(self) -> int:
        return self.theta.shape[1]

    def distribution(self, x: int) -> FiniteDistribution:
        return FiniteDistribution.from_atoms(self.theta[x])

    def _check(self, *states):
        for s in states:
            if not (isinstance(s, (int, np.integer)) and 0 <= s < self.theta.shape[0]):
                raise ValueError(f"invalid state index {s!r}")


@dataclass
class ValueTable:
    v: np.ndarray
    gamma: float

    @classmethod
    def zeros(cls, n_states: int, gamma: float) -> ValueTable:
        return cls(np.zeros(n_states), gamma)


def qrtd_update(table: QuantileTable, x: int, r: float, x_next: int, z_next: float,
                alpha: float, done: bool) -> QuantileTable:
    """theta_i(x) += alpha * (tau_hat_i - 1[g < theta_i(x)]), g = r + gamma * z'.

    ``z_next`` is a draw from the next-state quantile distribution; it is
    ignored on terminal transitions, where g = r. Updates in place.
    """
    table._check(x, x_next)
    g = r if done else r + table.gamma * z_next
    row = table.theta[x]
    row += alpha * (table.taus - (g < row))
    return table


def qrtd_all_pairs_update(table: QuantileTable, x: int, r: float, x_next: int,
                          alpha: float, done: bool) -> QuantileTable:
    """QRTD update averaged over every next-state atom theta_j(x')."""
    table._check(x, x_next)
    row = table.theta[x]
    if done:
        below = (r < row).astype(float)
    else:
        g = r + table.gamma * table.theta[x_next]
        below = (g[None, :] < row[:, None]).mean(axis=1)
    row += alpha * (table.taus - below)
    return table


def td0_update(vt: ValueTable, x: int, r: float, x_next: int, alpha: float,
               done: bool) -> ValueTable:
    n = vt.v.shape[0]
    for s in (x, x_next):
        if not (isinstance(s, (int, np.integer)) and 0 <= s < n):
            raise ValueError(f"invalid state index {s!r}")
    target = r if done else r + vt.gamma * vt.v[x_next]
    vt.v[x] += alpha * (target - vt.v[x])
    return vt


@dataclass(frozen=True)
class EvalConfig:
    N: int = 32
    alpha0: float = 0.1
    halve_every: int = 2000
    episodes: int = 10_000
    seeds: tuple = (0,)
    max_steps: int = 5000
    mc_rollouts: int = 1000
    algos: tuple = ("td0", "qrtd")
    dump_every: int = 1000

    @classmethod
    def from_dict(cls, doc: dict) -> EvalConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("seeds", "algos"):
            if key in doc:
                doc[key] = tuple(doc[key])
        cfg = cls(**doc)
        for a in cfg.algos:
            if a not in ALGOS:
                raise ValueError(f"unknown algorithm {a!r}; choose from {ALGOS}")
        return cfg

    def alpha(self, episode: int) -> float:
        """Step size for a 0-based episode index."""
        return self.alpha0 * 0.5 ** (episode // self.halve_every)


class CurveRecord(NamedTuple):
    episode: int
    sq_mean_err: float
    w1_err: float


@dataclass
class EvalRun:
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    table: object = None


def run_policy_evaluation(mdp: FiniteMdp, policy: Policy, algo: str, episodes: int,
                          config: EvalConfig, rng: np.random.Generator,
                          ground_truth: FiniteDistribution,
                          snapshot_episodes=()) -> EvalRun:
    """Follow ``policy`` from the start state for ``episodes`` episodes.

    After every episode records the squared error of the start-state mean
    estimate against the ground-truth mean and, for the QRTD variants, the
    W1 distance between the start-state quantile distribution and the
    ground truth. ``snapshot_episodes`` (1-based) select start-state quantile
    vectors to keep.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGOS}")
    x0 = mdp.start_state
    true_mean = ground_truth.mean()
    snap = set(snapshot_episodes)
    run = EvalRun()
    if algo == "td0":
        table = ValueTable.zeros(mdp.n_states, mdp.gamma)
    else:
        table = QuantileTable.zeros(mdp.n_states, config.N, mdp.gamma)
    run.table = table
    # per-state successor CDFs under the policy's actions are drawn on the fly
    pi_cdf = np.cumsum(policy.action_probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    n = config.N
    for ep in range(episodes):
        alpha = config.alpha(ep)
        x = x0
        for _ in range(config.max_steps):
            a = min(int(np.searchsorted(pi_cdf[x], rng.random() * pi_cdf[x, -1], side="right")),
                    mdp.n_actions - 1)
            row = p_cdf[x, a]
            y = min(int(np.searchsorted(row, rng.random() * row[-1], side="right")),
                    mdp.n_states - 1)
            r = mdp.reward[x, a, y]
            done = bool(mdp.terminal[y])
            if algo == "td0":
                td0_update(table, x, r, y, alpha, done)
            elif algo == "qrtd":
                z = table.theta[y, rng.integers(n)]
                qrtd_update(table, x, r, y, z, alpha, done)
            else:
                qrtd_all_pairs_update(table, x, r, y, alpha, done)
            x = y
            if done:
                break
        if algo == "td0":
            est = table.v[x0]
            w1 = float("nan")
        else:
            est = table.theta[x0].mean()
            w1 = wasserstein_p(ground_truth, table.distribution(x0), 1.0)
        run.records.append(CurveRecord(ep + 1, float((true_mean - est) ** 2), w1))
        if algo != "td0" and (ep + 1) in snap:
            run.snapshots[ep + 1] = table.theta[x0].copy()
    return run
