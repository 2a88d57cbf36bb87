"""Quantile regression and quantile-Huber losses, their gradients, and SGD quantile estimation.

Residuals are ``u = z - theta``: the loss sees a target sample ``z`` and an
estimate ``theta``. Gradients are taken with respect to ``theta``, so a
descent step is ``theta -= lr * qr_grad(z - theta, tau, kappa)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distributions import FiniteDistribution, QuantileDistribution, tau_hat, wasserstein_p


@dataclass(frozen=True)
class LossConfig:
    tau: float
    kappa: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly inside (0, 1), got {self.tau}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


def _check_tau(tau):
    t = np.asarray(tau)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("tau must lie strictly inside (0, 1)")


def qr_loss(u, tau):
    """rho_tau(u) = u * (tau - 1[u < 0])."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def huber(u, kappa: float):
    if kappa <= 0:
        raise ValueError("huber needs kappa > 0; use qr_loss for the kappa = 0 case")
    a = np.abs(np.asarray(u, dtype=float))
    out = np.where(a <= kappa, 0.5 * a * a, kappa * (a - 0.5 * kappa))
    return float(out) if out.ndim == 0 else out


def quantile_huber(u, tau, kappa: float = 0.0):
    """|tau - 1[u < 0]| * huber(u, kappa); reduces to qr_loss when kappa == 0."""
    if kappa == 0:
        return qr_loss(u, tau)
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = np.abs(tau - (u < 0)) * huber(u, kappa)
    return float(out) if np.ndim(out) == 0 else out


def qr_grad(u, tau, kappa: float = 0.0):
    """d/dtheta of quantile_huber(z - theta); at u == 0 the 1[u < 0] = 0 branch is used."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    neg = u < 0
    if kappa == 0:
        out = neg - np.asarray(tau, dtype=float)
    else:
        dh = np.where(np.abs(u) <= kappa, u, kappa * np.sign(u))
        out = -np.abs(tau - neg) * dh
    out = out + 0.0
    return float(out) if out.ndim == 0 else out


def qr_grad_tie_averaged(u, tau):
    """Quantile subgradient with ties resolved to the subdifferential midpoint.

    Equal to :func:`qr_grad` (kappa = 0) away from u == 0; at u == 0 it returns
    1/2 - tau, the average of the two one-sided derivatives.
    """
    u = np.asarray(u, dtype=float)
    g = qr_grad(u, tau, 0.0)
    out = np.where(u == 0, 0.5 - np.asarray(tau, dtype=float), g)
    return float(out) if out.ndim == 0 else out


def inv_sqrt_schedule(scale: float = 1.0) -> Callable[[int], float]:
    return lambda t: scale / math.sqrt(t)


def sgd_quantile(sampler: Callable, tau: float, steps: int,
                 lr_schedule: Callable[[int], float] | None = None,
                 rng: np.random.Generator | None = None, init: float = 0.0) -> float:
    """Estimate F^-1(tau) by stochastic (sub)gradient descent on the quantile loss.

    ``sampler(rng, size)`` must return ``size`` i.i.d. draws. The step size at
    step t (1-based) is ``lr_schedule(t)``, by default 1/sqrt(t).
    """
    _check_tau(tau)
    if lr_schedule is None:
        lr_schedule = inv_sqrt_schedule()
    rng = np.random.default_rng() if rng is None else rng
    theta = float(init)
    if steps <= 0:
        return theta
    draws = np.asarray(sampler(rng, steps), dtype=float)
    for t, z in enumerate(draws, start=1):
        theta -= lr_schedule(t) * ((z < theta) - tau)
    return theta


@dataclass(frozen=True)
class BiasReport:
    n: int
    m: int
    p: float
    trials: int
    wass_grad_mean: float
    wass_grad_stderr: float
    qr_grad_mean: float
    qr_grad_stderr: float

    @property
    def wass_biased(self) -> bool:
        return self.wass_grad_mean < 0 and abs(self.wass_grad_mean) > 3 * self.wass_grad_stderr

    @property
    def qr_unbiased(self) -> bool:
        return abs(self.qr_grad_mean) <= 3 * self.qr_grad_stderr

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "m", "p", "trials", "wass_grad_mean", "wass_grad_stderr",
                    "qr_grad_mean", "qr_grad_stderr"])
        w.writerow([self.n, self.m, repr(float(self.p)), self.trials,
                    repr(self.wass_grad_mean), repr(self.wass_grad_stderr),
                    repr(self.qr_grad_mean), repr(self.qr_grad_stderr)])
        return buf.getvalue()


def wasserstein_grad_theta1(samples: np.ndarray, theta: np.ndarray, p: float) -> np.ndarray:
    """d/dtheta_1 of W_p(empirical(samples), uniform(theta)) for equal sample and atom counts.

    Rows of ``samples`` are independent draws of m = N values; ``theta`` is
    sorted. The optimal coupling pairs order statistics, so only the smallest
    sample moves with theta_1. A coincident pair contributes zero.
    """
    n = theta.shape[-1]
    zs = np.sort(samples, axis=-1)
    d = theta[None, :] - zs
    cost = np.mean(np.abs(d) ** p, axis=-1)
    d1 = d[:, 0]
    inner = np.abs(d1) ** (p - 1) * np.sign(d1) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = np.where(cost > 0, cost ** (1.0 / p - 1.0), 0.0)
    return np.where(d1 == 0, 0.0, outer * inner)


def biased_gradient_demo(n: int = 3, m: int | None = None, p: float = 1.0,
                         trials: int = 10_000,
                         rng: np.random.Generator | None = None) -> BiasReport:
    """Monte-Carlo gradients at theta_1 for Z uniform on {1..N}, Z_theta = Z, m = N samples.

    Compares the sample Wasserstein gradient (biased: negative in expectation)
    with the sample quantile-regression gradient at tau_hat_1 (mean zero).
    """
    m = n if m is None else m
    if m != n:
        raise ValueError("the construction needs m == N")
    rng = np.random.default_rng() if rng is None else rng
    theta = np.arange(1, n + 1, dtype=float)
    samples = rng.integers(1, n + 1, size=(trials, m)).astype(float)
    wg = wasserstein_grad_theta1(samples, theta, p)
    tau1 = tau_hat(n)[0]
    qg = qr_grad_tie_averaged(samples - theta[0], tau1).mean(axis=1)

    def stats(x):
        se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(x.mean()), se

    wm, ws = stats(wg)
    qm, qs = stats(qg)
    return BiasReport(n, m, p, trials, wm, ws, qm, qs)


def wasserstein_sample_loss(samples, theta, p: float) -> float:
    """W_p(empirical(samples), uniform(theta)) through the general metric code."""
    return wasserstein_p(FiniteDistribution.empirical(samples),
                         QuantileDistribution(theta).to_finite(), p)
