"""Finite distributions on the real line and 1-D Wasserstein machinery.

All inverse CDFs follow the ``inf {y : omega <= F(y)}`` convention with a
right-continuous F, so at an exact cumulative-weight boundary the left atom
is returned.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

LOC_TOL = 1e-12
CUM_TOL = 1e-12
MASS_TOL = 1e-9


def _merge_sorted(locs: np.ndarray, probs: np.ndarray, tol: float, average: bool):
    """Merge runs of sorted atoms whose consecutive gaps are <= tol."""
    if len(locs) <= 1:
        return locs, probs
    starts = np.empty(len(locs), dtype=bool)
    starts[0] = True
    np.greater(locs[1:] - locs[:-1], tol, out=starts[1:])
    if starts.all():
        return locs, probs
    idx = np.flatnonzero(starts)
    merged_p = np.add.reduceat(probs, idx)
    if average:
        num = np.add.reduceat(locs * probs, idx)
        with np.errstate(invalid="ignore", divide="ignore"):
            merged_l = np.where(merged_p > 0, num / merged_p, locs[idx])
    else:
        merged_l = locs[idx]
    return merged_l, merged_p


@dataclass(frozen=True, eq=False)
class FiniteDistribution:
    """Weighted atoms with strictly increasing locations and weights summing to 1.

    Build instances with :meth:`from_atoms`, which sorts, drops zero weights,
    merges atoms closer than ``LOC_TOL`` and renormalises.
    """

    locs: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_atoms(cls, locs, probs=None, merge_tol: float = LOC_TOL,
                   average: bool = False) -> FiniteDistribution:
        locs = np.asarray(locs, dtype=float).ravel()
        if probs is None:
            probs = np.full(len(locs), 1.0 / max(len(locs), 1))
        probs = np.asarray(probs, dtype=float).ravel()
        if len(locs) == 0 or len(locs) != len(probs):
            raise ValueError("need a non-empty set of atoms with one weight each")
        if not np.isfinite(locs).all():
            raise ValueError("atom locations must be finite")
        if probs.min() < 0:
            raise ValueError("weights must be non-negative")
        total = probs.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1")
        keep = probs > 0
        if not keep.all():
            locs, probs = locs[keep], probs[keep]
        order = np.argsort(locs, kind="stable")
        locs, probs = _merge_sorted(locs[order], probs[order], merge_tol, average)
        probs = probs / probs.sum()
        locs.setflags(write=False)
        probs.setflags(write=False)
        return cls(locs, probs)

    @classmethod
    def dirac(cls, loc: float) -> FiniteDistribution:
        return cls.from_atoms([loc], [1.0])

    @classmethod
    def empirical(cls, samples) -> FiniteDistribution:
        return cls.from_atoms(samples)

    def __len__(self) -> int:
        return len(self.locs)

    def __repr__(self) -> str:
        atoms = ", ".join(f"{l:g}:{p:.4g}" for l, p in zip(self.locs[:6], self.probs[:6]))
        more = ", ..." if len(self) > 6 else ""
        return f"FiniteDistribution({atoms}{more})"

    @cached_property
    def cum(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        c.setflags(write=False)
        return c

    def mean(self) -> float:
        return float(self.locs @ self.probs)

    def quantiles(self, omegas) -> np.ndarray:
        """Vectorised inverse CDF; ``omegas`` must lie in (0, 1]."""
        omegas = np.asarray(omegas, dtype=float)
        idx = np.searchsorted(self.cum, omegas - CUM_TOL, side="left")
        return self.locs[np.minimum(idx, len(self.locs) - 1)]

    def cdf(self, y: float) -> float:
        return float(self.probs[self.locs <= y].sum())

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(self.locs, size=size, p=self.probs)

    def affine(self, shift: float, scale: float) -> FiniteDistribution:
        """Law of ``shift + scale * Z``."""
        return FiniteDistribution.from_atoms(shift + scale * self.locs, self.probs)

    def same_as(self, other: FiniteDistribution, tol: float = 0.0) -> bool:
        return (len(self) == len(other) and np.allclose(self.locs, other.locs, rtol=0, atol=tol)
                and np.allclose(self.probs, other.probs, rtol=0, atol=max(tol, 1e-12)))

    def to_pairs(self) -> list:
        return [[float(l), float(p)] for l, p in zip(self.locs, self.probs)]

    def to_json(self) -> str:
        return json.dumps(self.to_pairs())

    @classmethod
    def from_pairs(cls, pairs) -> FiniteDistribution:
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls.from_atoms(arr[:, 0], arr[:, 1])

    @classmethod
    def from_json(cls, text: str) -> FiniteDistribution:
        return cls.from_pairs(json.loads(text))


def mixture(components, weights, merge_tol: float = LOC_TOL,
            average: bool = False) -> FiniteDistribution:
    """Weighted mixture of finite distributions."""
    locs = np.concatenate([c.locs for c in components])
    probs = np.concatenate([w * c.probs for c, w in zip(components, weights)])
    return FiniteDistribution.from_atoms(locs, probs, merge_tol=merge_tol, average=average)


@dataclass(frozen=True, eq=False)
class QuantileDistribution:
    """N atoms of weight 1/N each, stored sorted."""

    locations: np.ndarray

    def __post_init__(self):
        locs = np.sort(np.asarray(self.locations, dtype=float).ravel())
        if len(locs) < 1:
            raise ValueError("a quantile distribution needs N >= 1 atoms")
        if not np.all(np.isfinite(locs)):
            raise ValueError("quantile locations must be finite")
        locs.setflags(write=False)
        object.__setattr__(self, "locations", locs)

    @property
    def n(self) -> int:
        return len(self.locations)

    def to_finite(self) -> FiniteDistribution:
        return FiniteDistribution.from_atoms(self.locations)

    def mean(self) -> float:
        return float(self.locations.mean())


@dataclass(frozen=True, eq=False)
class QuantileTargets:
    midpoints: np.ndarray


@lru_cache(maxsize=256)
def quantile_midpoints(n: int) -> QuantileTargets:
    if int(n) != n or n < 1:
        raise ValueError(f"number of quantiles must be a positive integer, got {n!r}")
    i = np.arange(1, n + 1)
    taus = (2 * i - 1) / (2 * n)
    taus.setflags(write=False)
    return QuantileTargets(taus)


def tau_hat(n: int) -> np.ndarray:
    return quantile_midpoints(n).midpoints


def inverse_cdf(d: FiniteDistribution, omega: float) -> float:
    if not 0.0 < omega <= 1.0:
        raise ValueError(f"omega must lie in (0, 1], got {omega!r}")
    return float(d.quantiles(omega))


def _segments(u: FiniteDistribution, y: FiniteDistribution):
    """Widths and inverse-CDF values of both distributions on merged CDF breakpoints."""
    breaks = np.sort(np.concatenate((u.cum, y.cum)))
    keep = np.empty(len(breaks), dtype=bool)
    keep[0] = breaks[0] > CUM_TOL
    np.greater(breaks[1:] - breaks[:-1], CUM_TOL, out=keep[1:])
    breaks = breaks[keep]
    breaks[-1] = 1.0
    widths = np.diff(breaks, prepend=0.0)
    return widths, u.quantiles(breaks), y.quantiles(breaks)


def wasserstein_p(u: FiniteDistribution, y: FiniteDistribution, p: float) -> float:
    """Exact W_p by integrating the piecewise-constant inverse CDFs."""
    if not (p >= 1 and math.isfinite(p)):
        raise ValueError(f"p must be a finite real >= 1, got {p!r}")
    widths, qu, qy = _segments(u, y)
    total = float(widths @ np.abs(qu - qy) ** p)
    return total ** (1.0 / p)


def wasserstein_inf(u: FiniteDistribution, y: FiniteDistribution) -> float:
    _, qu, qy = _segments(u, y)
    return float(np.max(np.abs(qu - qy)))


def wasserstein(u: FiniteDistribution, y: FiniteDistribution, p: float) -> float:
    return wasserstein_inf(u, y) if math.isinf(p) else wasserstein_p(u, y, p)


class ValueDistributionTable(Mapping):
    """Mapping from (state, action) or state keys to finite distributions."""

    def __init__(self, entries: Mapping):
        self._entries = {k: _as_finite(v) for k, v in entries.items()}

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ValueDistributionTable({len(self)} entries)"

    def means(self) -> dict:
        return {k: d.mean() for k, d in self._entries.items()}

    def to_dict(self) -> dict:
        return {json.dumps(list(k) if isinstance(k, tuple) else k): d.to_pairs()
                for k, d in self._entries.items()}

    @classmethod
    def from_quantile_array(cls, theta: np.ndarray) -> ValueDistributionTable:
        """Table from an (S, A, N) array of quantile locations."""
        s, a, _ = theta.shape
        return cls({(x, b): FiniteDistribution.from_atoms(theta[x, b])
                    for x in range(s) for b in range(a)})


def _as_finite(d) -> FiniteDistribution:
    if isinstance(d, QuantileDistribution):
        return d.to_finite()
    return d


def maximal_wasserstein(z1: ValueDistributionTable, z2: ValueDistributionTable,
                        p: float) -> float:
    """Supremum over entries of W_p between corresponding distributions."""
    if set(z1.keys()) != set(z2.keys()):
        raise ValueError("tables are indexed by different (state, action) sets")
    return max((wasserstein(z1[k], z2[k], p) for k in z1), default=0.0)


def quantile_projection(y: FiniteDistribution, n: int) -> QuantileDistribution:
    """W1-closest distribution with n equally weighted atoms: quantiles at the midpoints."""
    return QuantileDistribution(y.quantiles(tau_hat(n)))


def project_table(table: ValueDistributionTable, n: int) -> ValueDistributionTable:
    return ValueDistributionTable({k: quantile_projection(d, n) for k, d in table.items()})


def c51_projection(y: FiniteDistribution, support) -> FiniteDistribution:
    """Categorical projection onto a fixed support comb.

    Each atom splits its weight between the two neighbouring support points,
    linearly in distance; atoms outside the comb are clipped to the nearest end.
    """
    z = np.asarray(support, dtype=float)
    if z.ndim != 1 or len(z) < 2:
        raise ValueError("support needs at least two points")
    if np.any(np.diff(z) <= 0):
        raise ValueError("support must be strictly increasing")
    v = np.clip(y.locs, z[0], z[-1])
    hi = np.clip(np.searchsorted(z, v, side="right"), 1, len(z) - 1)
    lo = hi - 1
    frac = (v - z[lo]) / (z[hi] - z[lo])
    mass = np.zeros(len(z))
    np.add.at(mass, lo, y.probs * (1.0 - frac))
    np.add.at(mass, hi, y.probs * frac)
    return FiniteDistribution.from_atoms(z, mass / mass.sum(), merge_tol=0.0)


def projection_winf_identity(nu1: FiniteDistribution, nu2: FiniteDistribution,
                             n: int) -> tuple[float, float]:
    """(W_inf between the two n-quantile projections, max midpoint-quantile gap)."""
    lhs = wasserstein_inf(quantile_projection(nu1, n).to_finite(),
                          quantile_projection(nu2, n).to_finite())
    taus = tau_hat(n)
    rhs = float(np.max(np.abs(nu1.quantiles(taus) - nu2.quantiles(taus))))
    return lhs, rhs


def interval_l1(d: FiniteDistribution, lo: float, hi: float, theta: float) -> float:
    """Exact value of the integral of |F^-1(w) - theta| over w in [lo, hi]."""
    cum = d.cum
    left = np.concatenate(([0.0], cum[:-1]))
    a = np.clip(left, lo, hi)
    b = np.clip(cum, lo, hi)
    return float(np.sum((b - a) * np.abs(d.locs - theta)))
