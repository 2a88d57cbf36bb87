"""QR-DQN at desk scale: one-hot states, a dense quantile network, replay and a target network."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .distributions import tau_hat
from .mdp import FiniteMdp, Policy, greedy, state_values
from .network import (
    AdamState,
    MlpParams,
    adam_step,
    backward_from_cache,
    forward_with_cache,
    mlp_forward,
)


@dataclass(frozen=True)
class AgentConfig:
    N: int = 32
    kappa: float = 1.0
    lr: float = 5e-4
    adam_eps: float = 0.01 / 32
    gamma: float | None = None
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay_steps: int = 5000
    target_sync: int = 200
    batch_size: int = 32
    buffer_capacity: int = 10_000
    hidden_sizes: tuple = (64, 64)
    seed: int = 0
    total_steps: int = 20_000
    learning_starts: int = 500
    train_every: int = 1
    eval_every: int = 1000
    max_episode_steps: int = 500
    # start training episodes in a uniformly drawn non-terminal state
    exploring_starts: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        for name in ("lr", "adam_eps", "target_sync", "batch_size", "buffer_capacity",
                     "train_every", "eval_every", "max_episode_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @classmethod
    def from_dict(cls, doc: dict) -> AgentConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown AgentConfig fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    def epsilon(self, step: int) -> float:
        frac = min(step / self.epsilon_decay_steps, 1.0) if self.epsilon_decay_steps > 0 else 1.0
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of tabular transitions with uniform sampling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=int)
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros(capacity, dtype=int)
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward, next_state, done) -> None:
        i = self._next
        self.states[i], self.actions[i], self.rewards[i] = state, action, reward
        self.next_states[i], self.dones[i] = next_state, done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(self.size, size=batch_size)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


def greedy_action(theta: np.ndarray) -> int | np.ndarray:
    """Action maximising the quantile mean; lowest index on ties. Batched on leading axes."""
    q = np.asarray(theta, dtype=float).mean(axis=-1)
    return int(np.argmax(q)) if q.ndim == 1 else np.argmax(q, axis=-1)


def epsilon_greedy(theta: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(theta.shape[0]))
    return greedy_action(theta)


def bellman_target(theta_next: np.ndarray, reward, done, gamma: float) -> np.ndarray:
    """r + gamma * theta_j(x', a*) with a* greedy on the target net; r alone when done.

    ``theta_next`` is (n_actions, N) for one transition or (B, n_actions, N) for a batch.
    """
    theta_next = np.asarray(theta_next, dtype=float)
    a_star = greedy_action(theta_next)
    if theta_next.ndim == 2:
        nxt = theta_next[a_star]
        return np.full_like(nxt, reward) if done else reward + gamma * nxt
    nxt = theta_next[np.arange(len(theta_next)), a_star]
    reward = np.asarray(reward, dtype=float)[:, None]
    live = ~np.asarray(done, dtype=bool)[:, None]
    return reward + gamma * nxt * live


def qrdqn_loss(theta_pred, targets, kappa: float) -> tuple[float, np.ndarray]:
    """sum_i mean_j rho^kappa_{tau_hat_i}(T theta_j - theta_i) and its gradient in theta_pred.

    Accepts one N-vector pair or (B, N) batches; batches are averaged.
    """
    theta_pred = np.asarray(theta_pred, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if theta_pred.shape != targets.shape:
        raise ValueError(f"prediction {theta_pred.shape} and target {targets.shape} differ")
    single = theta_pred.ndim == 1
    tp = theta_pred[None] if single else theta_pred
    tt = targets[None] if single else targets
    n = tp.shape[1]
    taus = tau_hat(n)[None, :, None]
    u = tt[:, None, :] - tp[:, :, None]  # (B, i, j)
    neg = u < 0
    w = np.abs(taus - neg)
    if kappa == 0:
        loss = (w * np.abs(u)).sum(axis=(1, 2)) / n
        grad = (neg - taus).sum(axis=2) / n
    else:
        # same values as quantile_huber / qr_grad, fused to share the intermediates
        a = np.abs(u)
        c = np.minimum(a, kappa)
        loss = (w * c * (a - 0.5 * c)).sum(axis=(1, 2)) / n
        grad = -(w * np.clip(u, -kappa, kappa)).sum(axis=2) / n
    if single:
        return float(loss[0]), grad[0]
    b = len(tp)
    return float(loss.mean()), grad / b


class DqnRecord(NamedTuple):
    step: int
    greedy_return: float
    loss: float


class TrainResult(NamedTuple):
    params: MlpParams
    records: list
    policy: Policy


def network_policy(params: MlpParams, n_states: int) -> tuple[Policy, np.ndarray]:
    theta = mlp_forward(params, np.eye(n_states))
    q = theta.mean(axis=2)
    return Policy.deterministic(greedy(q, tol=0.0), params.n_actions), theta


def train_qrdqn(env: FiniteMdp, config: AgentConfig,
                rng: np.random.Generator | None = None) -> TrainResult:
    """Epsilon-greedy QR-DQN with uniform replay, Adam and a periodically synced target net.

    Evaluation points every ``eval_every`` steps record the exact expected
    return of the current greedy policy from the start state and the mean
    training loss since the previous evaluation point.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    gamma = env.gamma if config.gamma is None else config.gamma
    s_n, a_n = env.n_states, env.n_actions
    eye = np.eye(s_n)
    params = MlpParams.init(s_n, config.hidden_sizes, a_n, config.N, rng)
    target = params.copy()
    adam = AdamState.zeros_like(params.arrays())
    buffer = ReplayBuffer(config.buffer_capacity)
    p_cdf = np.cumsum(env.transition, axis=2)
    records = []
    losses = []
    starts = np.flatnonzero(~env.terminal)

    def reset() -> int:
        return int(rng.choice(starts)) if config.exploring_starts else env.start_state

    x = reset()
    ep_steps = 0
    rows = np.arange(config.batch_size)
    for step in range(1, config.total_steps + 1):
        eps = config.epsilon(step - 1)
        if rng.random() < eps:
            a = int(rng.integers(a_n))
        else:
            a = greedy_action(mlp_forward(params, eye[x]))
        cdf = p_cdf[x, a]
        y = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), s_n - 1)
        r = env.reward[x, a, y]
        done = bool(env.terminal[y])
        buffer.add(x, a, r, y, done)
        ep_steps += 1
        x = y
        if done or ep_steps >= config.max_episode_steps:
            x, ep_steps = reset(), 0

        if len(buffer) >= max(config.batch_size, config.learning_starts) \
                and step % config.train_every == 0:
            b = buffer.sample(config.batch_size, rng)
            out, acts = forward_with_cache(params, eye[b.states])
            pred = out[rows, b.actions]
            nxt = mlp_forward(target, eye[b.next_states])
            tgt = bellman_target(nxt, b.rewards, b.dones, gamma)
            loss, g = qrdqn_loss(pred, tgt, config.kappa)
            out_grad = np.zeros_like(out)
            out_grad[rows, b.actions] = g
            grads = backward_from_cache(params, acts, out_grad)
            new, adam = adam_step(params.arrays(), grads.arrays(), adam, config.lr,
                                  adam_eps=config.adam_eps)
            params = params.with_arrays(new)
            losses.append(loss)

        if step % config.target_sync == 0:
            target = params.copy()
        if step % config.eval_every == 0 or step == config.total_steps:
            pol, _ = network_policy(params, s_n)
            ret = _greedy_return(env, pol, gamma)
            mean_loss = float(np.mean(losses)) if losses else math.nan
            records.append(DqnRecord(step, ret, mean_loss))
            losses = []
    pol, _ = network_policy(params, s_n)
    return TrainResult(params, records, pol)


def _greedy_return(env: FiniteMdp, policy: Policy, gamma: float) -> float:
    if gamma >= 1.0:
        return math.nan
    if gamma != env.gamma:
        env = FiniteMdp(env.transition, env.reward, gamma, env.terminal, env.start_state)
    return float(state_values(env, policy)[env.start_state])
