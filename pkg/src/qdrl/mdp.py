"""Finite Markov decision processes, policies, exact solvers and benchmark environments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

PROB_TOL = 1e-12


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP with deterministic rewards per (x, a, x').

    ``transition[x, a, y]`` is P(y | x, a) and ``reward[x, a, y]`` the reward
    collected on that transition. Terminal states self-loop with reward 0.

    ``gamma`` may equal 1 for the hand-built counterexample constructions; solvers
    that need a contraction reject it.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: np.ndarray
    start_state: int = 0
    name: str = "mdp"

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        term = np.array(self.terminal, dtype=bool)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape:
            raise ValueError(f"reward shape {r.shape} does not match transition {p.shape}")
        if term.shape != (p.shape[0],):
            raise ValueError("terminal flags must have one entry per state")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if np.any(p < -PROB_TOL) or np.any(p > 1 + PROB_TOL):
            raise ValueError("transition probabilities must lie in [0, 1]")
        sums = p.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROB_TOL):
            bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)[0]
            raise ValueError(f"transition row {tuple(bad)} sums to {sums[tuple(bad)]!r}")
        for x in np.flatnonzero(term):
            if np.any(p[x, :, x] != 1.0) or np.any(r[x, :, x] != 0.0):
                raise ValueError(f"terminal state {x} must self-loop with reward 0")
        if not 0 <= self.start_state < p.shape[0]:
            raise ValueError("start_state out of range")
        for arr in (p, r, term):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """E[R | x, a] as an (S, A) array."""
        return np.einsum("xay,xay->xa", self.transition, self.reward)

    def check_state_action(self, x: int, a: int | None = None) -> None:
        if not (isinstance(x, (int, np.integer)) and 0 <= x < self.n_states):
            raise ValueError(f"invalid state {x!r}")
        if a is not None and not (isinstance(a, (int, np.integer)) and 0 <= a < self.n_actions):
            raise ValueError(f"invalid action {a!r}")

    # -- JSON -------------------------------------------------------------

    def to_dict(self) -> dict:
        rows = []
        for x, a, y in zip(*np.nonzero(self.transition)):
            rows.append([int(x), int(a), int(y), float(self.transition[x, a, y]),
                         float(self.reward[x, a, y])])
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": float(self.gamma),
            "terminal": [bool(t) for t in self.terminal],
            "start_state": int(self.start_state),
            "transitions": rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> FiniteMdp:
        s, a = int(doc["n_states"]), int(doc["n_actions"])
        p = np.zeros((s, a, s))
        r = np.zeros((s, a, s))
        for x, act, y, prob, rew in doc["transitions"]:
            p[x, act, y] += prob
            r[x, act, y] = rew
        return cls(p, r, float(doc["gamma"]), np.array(doc["terminal"], dtype=bool),
                   start_state=int(doc.get("start_state", 0)))

    @classmethod
    def from_json(cls, text: str) -> FiniteMdp:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Policy:
    """Stochastic policy as an (S, A) table of action probabilities."""

    action_probs: np.ndarray

    def __post_init__(self):
        pi = np.array(self.action_probs, dtype=float)
        if pi.ndim != 2:
            raise ValueError("action_probs must be 2-D (states x actions)")
        if np.any(pi < 0) or np.any(pi > 1):
            raise ValueError("action probabilities must lie in [0, 1]")
        if np.any(np.abs(pi.sum(axis=1) - 1.0) > PROB_TOL):
            raise ValueError("policy rows must sum to 1")
        pi.setflags(write=False)
        object.__setattr__(self, "action_probs", pi)

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> Policy:
        actions = np.asarray(actions, dtype=int)
        pi = np.zeros((len(actions), n_actions))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> Policy:
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.action_probs, axis=1)


class TransitionSample(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


def sample_transition(mdp: FiniteMdp, x: int, a: int, rng: np.random.Generator) -> TransitionSample:
    mdp.check_state_action(x, a)
    if mdp.terminal[x]:
        raise ValueError(f"cannot sample from terminal state {x}")
    row = mdp.transition[x, a]
    y = int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right"))
    y = min(y, mdp.n_states - 1)
    # guard against landing on a zero-probability tail entry through rounding
    while row[y] == 0.0:
        y -= 1
    return TransitionSample(int(x), int(a), float(mdp.reward[x, a, y]), y, bool(mdp.terminal[y]))


def sample_next_states(mdp: FiniteMdp, states: np.ndarray, actions: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """Vectorised successor draws for many (state, action) pairs at once."""
    cdf = np.cumsum(mdp.transition[states, actions], axis=1)
    u = rng.random(len(states)) * cdf[:, -1]
    nxt = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, mdp.n_states - 1)


def sample_actions(policy: Policy, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(policy.action_probs[states], axis=1)
    u = rng.random(len(states)) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), policy.action_probs.shape[1] - 1)


# -- exact solvers ----------------------------------------------------------


def _policy_matrices(mdp: FiniteMdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    pi = policy.action_probs
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")
    p_pi = np.einsum("xa,xay->xy", pi, mdp.transition)
    r_pi = np.einsum("xa,xa->x", pi, mdp.expected_reward())
    return p_pi, r_pi


def state_values(mdp: FiniteMdp, policy: Policy, tol: float = 1e-10) -> np.ndarray:
    """V^pi solving (I - gamma P_pi) V = r_pi, refined until the residual is below ``tol``."""
    if mdp.gamma >= 1.0:
        raise ValueError("exact evaluation requires gamma < 1")
    p_pi, r_pi = _policy_matrices(mdp, policy)
    a = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(a, r_pi)
    for _ in range(20):
        resid = r_pi - a @ v
        if np.max(np.abs(resid)) < tol:
            break
        v = v + np.linalg.solve(a, resid)
    v[mdp.terminal] = 0.0
    return v


def exact_value(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """Q^pi(x, a) for every state-action pair.

    V^pi is available through :func:`state_values` or as
    ``(policy.action_probs * q).sum(axis=1)``.
    """
    v = state_values(mdp, policy)
    q = mdp.expected_reward() + mdp.gamma * mdp.transition @ v
    q[mdp.terminal] = 0.0
    return q


def greedy(q: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Argmax per row, lowest index among actions within ``tol`` of the max."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tol, axis=1)


def policy_iteration(mdp: FiniteMdp, max_iter: int = 1000) -> Policy:
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iter):
        policy = Policy.deterministic(actions, mdp.n_actions)
        new = greedy(exact_value(mdp, policy))
        if np.array_equal(new, actions):
            return policy
        actions = new
    raise RuntimeError("policy iteration did not stabilise")


def expected_steps(mdp: FiniteMdp, policy: Policy, max_steps: float = 1e9) -> np.ndarray:
    """Expected number of steps to termination from each state (inf if unreachable)."""
    p_pi, _ = _policy_matrices(mdp, policy)
    live = ~mdp.terminal
    steps = np.zeros(mdp.n_states)
    # states that cannot reach a terminal have infinite hitting time
    reach = mdp.terminal.copy()
    for _ in range(mdp.n_states):
        reach = reach | ((p_pi[:, reach].sum(axis=1) > 0) & live)
    solve = live & reach
    if solve.any():
        idx = np.flatnonzero(solve)
        sub = p_pi[np.ix_(idx, idx)]
        steps[idx] = np.linalg.solve(np.eye(len(idx)) - sub, np.ones(len(idx)))
    steps[live & ~reach] = np.inf
    return np.where(steps > max_steps, np.inf, steps)


# -- environments -----------------------------------------------------------

GRID_COLS = 12
GRID_ROWS = 8
WALL_COL = 6
DOOR_ROW = 4
WIND = (0, 0, 0, 1, 1, 1, 0, 1, 2, 2, 1, 0)
GRID_START = (0, 0)
GRID_GOAL = (9, 5)
# north, east, south, west; rows count upwards from the bottom edge
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


@dataclass(frozen=True)
class GridLayout:
    cells: tuple[tuple[int, int], ...]
    index: dict

    def state_of(self, col: int, row: int) -> int:
        return self.index[(col, row)]


def windy_grid_layout() -> GridLayout:
    cells = tuple((c, r) for r in range(GRID_ROWS) for c in range(GRID_COLS)
                  if c != WALL_COL or r == DOOR_ROW)
    return GridLayout(cells, {cell: i for i, cell in enumerate(cells)})


def _grid_step(cell, move, index, wind: int):
    c, r = cell
    nc = min(max(c + move[0], 0), GRID_COLS - 1)
    nr = min(max(r + move[1], 0), GRID_ROWS - 1)
    if (nc, nr) in index:
        c, r = nc, nr
    for _ in range(wind):
        if r + 1 < GRID_ROWS and (c, r + 1) in index:
            r += 1
    return c, r


def build_windy_gridworld(random_move_prob: float = 0.1, gamma: float = 0.99) -> FiniteMdp:
    """Two-room windy gridworld.

    12x8 cells with a wall at column 6 broken by a doorway at row 4. Wind of
    the column the agent leaves pushes it north after the intended move; with
    probability ``random_move_prob`` the agent instead moves in a uniformly
    random compass direction and the wind is ignored. Entering the goal pays
    1.0 and ends the episode.
    """
    layout = windy_grid_layout()
    n = len(layout.cells)
    p = np.zeros((n, 4, n))
    r = np.zeros((n, 4, n))
    goal = layout.state_of(*GRID_GOAL)
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    for s, cell in enumerate(layout.cells):
        if s == goal:
            p[s, :, s] = 1.0
            continue
        for a, move in enumerate(MOVES):
            dest = _grid_step(cell, move, layout.index, WIND[cell[0]])
            p[s, a, layout.index[dest]] += 1.0 - random_move_prob
            for other in MOVES:
                dest = _grid_step(cell, other, layout.index, 0)
                p[s, a, layout.index[dest]] += random_move_prob / len(MOVES)
        r[s, :, goal] = 1.0
    return FiniteMdp(p, r, gamma, terminal, start_state=layout.state_of(*GRID_START),
                     name="gridworld")


def build_chain_mdp(n_states: int = 5, slip: float = 0.1, gamma: float = 0.9) -> FiniteMdp:
    """Corridor of ``n_states`` cells; action 1 moves right, action 0 left.

    The rightmost cell is a terminal goal paying 1.0 on entry. Each move
    goes the opposite way with probability ``slip``.
    """
    if n_states < 2:
        raise ValueError("chain needs at least 2 states")
    goal = n_states - 1
    p = np.zeros((n_states, 2, n_states))
    r = np.zeros_like(p)
    for s in range(goal):
        left, right = max(s - 1, 0), s + 1
        p[s, 1, right] += 1.0 - slip
        p[s, 1, left] += slip
        p[s, 0, left] += 1.0 - slip
        p[s, 0, right] += slip
        r[s, :, goal] = 1.0
    p[goal, :, goal] = 1.0
    terminal = np.zeros(n_states, dtype=bool)
    terminal[goal] = True
    return FiniteMdp(p, r, gamma, terminal, start_state=0, name="chain")


def build_counterexample_mdp():
    """Three-state construction showing the projected operator expands d_p for p < inf.

    State 0 moves to terminal 1 w.p. 2/3 and terminal 2 w.p. 1/3, all rewards
    zero, gamma = 1. Returns the MDP and the two value distribution tables.
    """
    from .distributions import FiniteDistribution, ValueDistributionTable

    p = np.zeros((3, 1, 3))
    p[0, 0, 1] = 2.0 / 3.0
    p[0, 0, 2] = 1.0 / 3.0
    p[1, 0, 1] = 1.0
    p[2, 0, 2] = 1.0
    mdp = FiniteMdp(p, np.zeros_like(p), 1.0, np.array([False, True, True]),
                    name="counterexample")
    half = lambda a, b: FiniteDistribution.from_atoms([a, b], [0.5, 0.5])  # noqa: E731
    z = ValueDistributionTable({(0, 0): FiniteDistribution.dirac(0.0), (1, 0): half(0, 2),
                                (2, 0): half(3, 5)})
    y = ValueDistributionTable({(0, 0): FiniteDistribution.dirac(0.0), (1, 0): half(1, 2),
                                (2, 0): half(4, 5)})
    return mdp, z, y


def random_mdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 3,
               gamma_range=(0.5, 0.99)) -> FiniteMdp:
    """Random MDP: flat-Dirichlet transition rows, rewards uniform in [-1, 1]."""
    s = int(rng.integers(1, max_states + 1))
    a = int(rng.integers(1, max_actions + 1))
    p = rng.dirichlet(np.ones(s), size=(s, a))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(s, a, s))
    gamma = float(rng.uniform(*gamma_range))
    return FiniteMdp(p, r, gamma, np.zeros(s, dtype=bool), name="random")


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> Policy:
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    pi /= pi.sum(axis=1, keepdims=True)
    return Policy(pi)
