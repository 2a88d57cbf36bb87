"""Small dense network with ReLU hidden layers, exact backprop, and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    """Dense layers mapping features to n_actions * n_quantiles outputs.

    ``weights[k]`` has shape (fan_in, fan_out); the flat output is reshaped to
    (n_actions, n_quantiles).
    """

    weights: list
    biases: list
    n_actions: int
    n_quantiles: int

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("weight/bias shapes do not line up")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("consecutive layers have mismatched widths")
        if self.weights[-1].shape[1] != self.n_actions * self.n_quantiles:
            raise ValueError("output layer must have n_actions * n_quantiles units")

    @classmethod
    def init(cls, n_in: int, hidden, n_actions: int, n_quantiles: int,
             rng: np.random.Generator) -> MlpParams:
        sizes = [n_in, *hidden, n_actions * n_quantiles]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
            # He init for ReLU layers, smaller scale for the linear head
            scale = np.sqrt(2.0 / a) if k < len(sizes) - 2 else np.sqrt(1.0 / a)
            weights.append(rng.normal(0.0, scale, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, n_actions, n_quantiles)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def with_arrays(self, arrays) -> MlpParams:
        k = len(self.weights)
        return MlpParams(list(arrays[:k]), list(arrays[k:]), self.n_actions, self.n_quantiles)

    def copy(self) -> MlpParams:
        return self.with_arrays([a.copy() for a in self.arrays()])

    def to_dict(self) -> dict:
        return {
            "n_actions": self.n_actions,
            "n_quantiles": self.n_quantiles,
            "layers": [{"W": w.tolist(), "b": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> MlpParams:
        return cls([np.asarray(l["W"], dtype=float) for l in doc["layers"]],
                   [np.asarray(l["b"], dtype=float) for l in doc["layers"]],
                   int(doc["n_actions"]), int(doc["n_quantiles"]))


def _forward(params: MlpParams, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.n_in:
        raise ValueError(f"expected features of length {params.n_in}, got shape {x.shape}")
    return xb, single


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Quantile matrix (n_actions, N) for one feature vector, or (B, n_actions, N) for a batch."""
    xb, single = _as_batch(params, x)
    out = _forward(params, xb)[-1].reshape(len(xb), params.n_actions, params.n_quantiles)
    return out[0] if single else out


def mlp_backward(params: MlpParams, x, out_grad) -> MlpParams:
    """Gradients of sum(output * out_grad) with respect to every weight and bias.

    Returned as an :class:`MlpParams` holding gradient arrays; batch inputs
    sum their contributions.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(out_grad, dtype=float)
    want = (params.n_actions, params.n_quantiles)
    if single:
        if g.shape != want:
            raise ValueError(f"out_grad must have shape {want}, got {g.shape}")
        g = g[None]
    elif g.shape != (len(xb), *want):
        raise ValueError(f"out_grad must have shape {(len(xb), *want)}, got {g.shape}")
    acts = _forward(params, xb)
    return _backward(params, acts, g.reshape(len(xb), -1))


def _backward(params: MlpParams, acts: list, delta: np.ndarray) -> MlpParams:
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return MlpParams(gw, gb, params.n_actions, params.n_quantiles)


def forward_with_cache(params: MlpParams, xb: np.ndarray):
    acts = _forward(params, xb)
    return acts[-1].reshape(len(xb), params.n_actions, params.n_quantiles), acts


def backward_from_cache(params: MlpParams, acts: list, out_grad: np.ndarray) -> MlpParams:
    return _backward(params, acts, out_grad.reshape(len(acts[0]), -1))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> AdamState:
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params: list, grads: list, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, adam_eps: float = 1e-8) -> tuple[list, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and moment state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moment state must have equal length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)
