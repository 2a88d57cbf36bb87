"""Ground truth: Monte-Carlo return distributions and exact distributional dynamic programming."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    LOC_TOL,
    FiniteDistribution,
    ValueDistributionTable,
    _merge_sorted,
    maximal_wasserstein,
)
from .mdp import FiniteMdp, Policy, sample_actions, sample_next_states

MERGE_TOL = 1e-9
ATOM_CAP = 100_000
MC_MAX_STEPS = 5000


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def monte_carlo_returns(mdp: FiniteMdp, policy: Policy, x: int, rollouts: int,
                        rng: np.random.Generator, max_steps: int = MC_MAX_STEPS) -> np.ndarray:
    """Discounted returns of ``rollouts`` independent episodes started in ``x``."""
    if rollouts < 1:
        raise ValueError("need at least one rollout")
    mdp.check_state_action(x)
    states = np.full(rollouts, x, dtype=int)
    returns = np.zeros(rollouts)
    discount = np.ones(rollouts)
    live = ~mdp.terminal[states]
    for _ in range(max_steps):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        s = states[idx]
        a = sample_actions(policy, s, rng)
        y = sample_next_states(mdp, s, a, rng)
        returns[idx] += discount[idx] * mdp.reward[s, a, y]
        discount[idx] *= mdp.gamma
        states[idx] = y
        live[idx] = ~mdp.terminal[y]
    return returns


def monte_carlo_distribution(mdp: FiniteMdp, policy: Policy, x: int, rollouts: int,
                             rng: np.random.Generator,
                             max_steps: int = MC_MAX_STEPS) -> FiniteDistribution:
    """Empirical law of the discounted return from ``x``; episodes truncated at ``max_steps``."""
    return FiniteDistribution.empirical(monte_carlo_returns(mdp, policy, x, rollouts, rng,
                                                            max_steps))


def _cap_atoms(locs: np.ndarray, probs: np.ndarray, cap: int):
    """Merge closest neighbouring atoms (weight-averaged) until at most ``cap`` remain."""
    while len(locs) > cap:
        excess = len(locs) - cap
        used = np.zeros(len(locs), dtype=bool)
        starts = np.ones(len(locs), dtype=bool)
        taken = 0
        for i in np.argsort(np.diff(locs), kind="stable"):
            if used[i] or used[i + 1]:
                continue
            used[i] = used[i + 1] = True
            starts[i + 1] = False
            taken += 1
            if taken == excess:
                break
        idx = np.flatnonzero(starts)
        p = np.add.reduceat(probs, idx)
        locs = np.add.reduceat(locs * probs, idx) / p
        probs = p
    return locs, probs


def _finite(locs, probs, merge_tol: float, average: bool) -> FiniteDistribution:
    order = np.argsort(locs, kind="stable")
    locs, probs = _merge_sorted(locs[order], probs[order], merge_tol, average)
    if len(locs) > ATOM_CAP:
        locs, probs = _cap_atoms(locs, probs, ATOM_CAP)
    probs = probs / probs.sum()
    locs = np.ascontiguousarray(locs)
    probs = np.ascontiguousarray(probs)
    locs.setflags(write=False)
    probs.setflags(write=False)
    return FiniteDistribution(locs, probs)


def _is_state_keyed(table: ValueDistributionTable) -> bool:
    key = next(iter(table))
    return not isinstance(key, tuple)


def apply_distributional_bellman(mdp: FiniteMdp, policy: Policy, table: ValueDistributionTable,
                                 merge_tol: float = MERGE_TOL) -> ValueDistributionTable:
    """Exact pushforward of the distributional Bellman operator for ``policy``.

    For (state, action) keys: (TZ)(x, a) is the law of r(x, a, x') + gamma * Z(x', a')
    with x' ~ P(.|x, a), a' ~ pi(.|x'). For state keys the action at x is also
    drawn from pi. Atoms closer than ``merge_tol`` are merged, weight-averaged.
    """
    state_keyed = _is_state_keyed(table)
    s_n, a_n, gamma = mdp.n_states, mdp.n_actions, mdp.gamma
    pi = policy.action_probs
    expected = set(range(s_n)) if state_keyed else {(x, a) for x in range(s_n)
                                                     for a in range(a_n)}
    if set(table.keys()) != expected:
        raise ValueError("table is not indexed like the MDP")
    average = merge_tol > LOC_TOL
    out = {}
    if state_keyed:
        succ = {y: table[y] for y in range(s_n)}
        for x in range(s_n):
            locs, probs = [], []
            for a in np.flatnonzero(pi[x]):
                for y in np.flatnonzero(mdp.transition[x, a]):
                    w = pi[x, a] * mdp.transition[x, a, y]
                    d = succ[y]
                    locs.append(mdp.reward[x, a, y] + gamma * d.locs)
                    probs.append(w * d.probs)
            out[x] = _finite(np.concatenate(locs), np.concatenate(probs), merge_tol, average)
        return ValueDistributionTable(out)
    # mixture over next actions first: M(y) = sum_b pi(b|y) Z(y, b), then shift per (x, a, y)
    succ = {}
    for y in range(s_n):
        acts = np.flatnonzero(pi[y])
        succ[y] = (np.concatenate([table[(y, b)].locs for b in acts]),
                   np.concatenate([pi[y, b] * table[(y, b)].probs for b in acts]))
    for x in range(s_n):
        for a in range(a_n):
            ys = np.flatnonzero(mdp.transition[x, a])
            locs = np.concatenate([mdp.reward[x, a, y] + gamma * succ[y][0] for y in ys])
            probs = np.concatenate([mdp.transition[x, a, y] * succ[y][1] for y in ys])
            out[(x, a)] = _finite(locs, probs, merge_tol, average)
    return ValueDistributionTable(out)


def dirac_table(mdp: FiniteMdp, by_state: bool = False, loc: float = 0.0) -> ValueDistributionTable:
    d = FiniteDistribution.dirac(loc)
    if by_state:
        return ValueDistributionTable({x: d for x in range(mdp.n_states)})
    return ValueDistributionTable({(x, a): d for x in range(mdp.n_states)
                                   for a in range(mdp.n_actions)})


@dataclass
class FixedPoint:
    table: ValueDistributionTable
    state_table: ValueDistributionTable
    residuals: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.residuals)


def exact_distributional_fixed_point(mdp: FiniteMdp, policy: Policy, iterations: int = 5000,
                                     merge_tol: float = MERGE_TOL, tol: float = 1e-6,
                                     init: ValueDistributionTable | None = None) -> FixedPoint:
    """Iterate the distributional Bellman operator to its fixed point Z^pi.

    Iterates on state-keyed distributions (the policy mixture over actions),
    starting from Dirac-at-zero tables unless ``init`` is given, until the
    maximal W_inf between successive iterates drops below ``tol``. The
    (state, action) table is one further backup of the converged state table.
    Raises :class:`ConvergenceError` if ``iterations`` backups do not suffice.
    """
    if mdp.gamma >= 1.0:
        raise ValueError("the fixed-point iteration needs gamma < 1")
    z = dirac_table(mdp, by_state=True) if init is None else init
    residuals = []
    for _ in range(iterations):
        nxt = apply_distributional_bellman(mdp, policy, z, merge_tol)
        res = maximal_wasserstein(z, nxt, np.inf)
        residuals.append(res)
        z = nxt
        if res < tol:
            break
    else:
        raise ConvergenceError(f"no convergence within {iterations} iterations", residuals[-1])
    average = merge_tol > LOC_TOL
    sa = {}
    for x in range(mdp.n_states):
        for a in range(mdp.n_actions):
            ys = np.flatnonzero(mdp.transition[x, a])
            locs = np.concatenate([mdp.reward[x, a, y] + mdp.gamma * z[y].locs for y in ys])
            probs = np.concatenate([mdp.transition[x, a, y] * z[y].probs for y in ys])
            sa[(x, a)] = _finite(locs, probs, merge_tol, average)
    return FixedPoint(ValueDistributionTable(sa), z, residuals)
