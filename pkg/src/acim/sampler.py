"""Random numbers from a decreasing density via a conjugated chaotic map.

For a target with density ``g`` and distribution function ``h`` the map
``F = h^{-1} o tau_k o h`` (``tau_k(u) = k u mod 1``) preserves ``g``, so its
orbits are samples from the target.  When ``g`` is decreasing the branches
of ``F`` are increasing and convex.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .maps import Branch, MapError, PiecewiseMap
from .ergodics import JITTER, orbit


class CdfNotInvertible(MapError):
    pass


class EmptySamples(ValueError):
    pass


def _bisect(cdf: Callable, tol: float = 1e-12) -> Callable:
    def inverse(u):
        u = np.asarray(u, dtype=float)
        lo, hi = np.zeros(u.shape), np.ones(u.shape)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = cdf(mid) < u
            lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
            if np.all(hi - lo <= tol):
                break
        out = 0.5 * (lo + hi)
        return out if out.ndim else float(out)

    return inverse


@dataclass(frozen=True)
class TargetDistribution:
    """Density ``g``, distribution function ``h`` and its inverse on ``[0, 1]``.

    Without a closed-form ``inverse_cdf`` a bisection inverse (to ``1e-12``) is
    used.  ``uniform`` marks the Lebesgue target, whose conjugated map is
    built with exact affine branches.
    """

    density: Callable
    cdf: Callable
    inverse_cdf: Callable | None = None
    name: str = "target"
    uniform: bool = False

    def __post_init__(self):
        if self.inverse_cdf is None:
            if not (abs(float(self.cdf(0.0))) < 1e-12 and abs(float(self.cdf(1.0)) - 1) < 1e-12):
                raise CdfNotInvertible("cdf-not-invertible: need h(0) = 0 and h(1) = 1")
            object.__setattr__(self, "inverse_cdf", _bisect(self.cdf))


def exponential_target() -> TargetDistribution:
    """``g(x) = e^{1-x}/(e-1)`` on ``[0, 1]``."""
    e = math.e
    c = e / (e - 1)
    r = (e - 1) / e

    def density(x):
        if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
            return math.exp(1.0 - x) / (e - 1)
        return np.exp(1.0 - np.asarray(x, dtype=float)) / (e - 1)

    def cdf(x):
        if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
            return -c * math.expm1(-x)
        return -c * np.expm1(-np.asarray(x, dtype=float))

    def inverse_cdf(u):
        if np.ndim(u) == 0 and not isinstance(u, np.ndarray):
            return -math.log1p(-u * r)
        return -np.log1p(-np.asarray(u, dtype=float) * r)

    return TargetDistribution(density, cdf, inverse_cdf, "exponential")


def uniform_target() -> TargetDistribution:
    def density(x):
        return 1.0 if np.ndim(x) == 0 and not isinstance(x, np.ndarray) else np.ones(np.shape(x))

    def ident(x):
        return x

    return TargetDistribution(density, ident, ident, "uniform", uniform=True)


def _conjugated_branch(target: TargetDistribution, k: int, j: int, a: float, b: float) -> Branch:
    g, h, hinv = target.density, target.cdf, target.inverse_cdf
    shift = j - 1

    def forward(x):
        if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
            if x >= b:
                return 1.0
            if x <= a:
                return 0.0
            u = k * h(x) - shift
            return min(max(hinv(min(max(u, 0.0), 1.0)), 0.0), 1.0)
        x = np.asarray(x, dtype=float)
        u = np.clip(k * h(x) - shift, 0.0, 1.0)
        y = np.clip(hinv(u), 0.0, 1.0)
        return np.where(x >= b, 1.0, np.where(x <= a, 0.0, y))

    def derivative(x):
        return k * g(x) / g(forward(x))

    def inverse(y):
        return np.clip(hinv((h(y) + shift) / k), a, b)

    return Branch(a, b, forward, derivative, inverse)


def conjugated_map(target: TargetDistribution, k: int = 5) -> PiecewiseMap:
    """``h^{-1}(k h(x) mod 1)`` with branches on ``[h^{-1}((j-1)/k), h^{-1}(j/k))``."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if target.uniform:
        brs = [Branch.affine(Fraction(j - 1, k), Fraction(j, k), k, -(j - 1)) for j in range(1, k + 1)]
        return PiecewiseMap(brs, name=f"conjugated_{target.name}_{k}")
    ends = [0.0] + [float(target.inverse_cdf(j / k)) for j in range(1, k)] + [1.0]
    if any(not p < q for p, q in zip(ends, ends[1:])):
        raise CdfNotInvertible("cdf-not-invertible: branch ends are not increasing")
    brs = [_conjugated_branch(target, k, j, ends[j - 1], ends[j]) for j in range(1, k + 1)]
    return PiecewiseMap(brs, name=f"conjugated_{target.name}_{k}")


def pf_fixed_point_check(target: TargetDistribution, k: int = 5, points: int = 101,
                         tail_tol: float = 1e-8) -> float:
    """``max |P_F g - g|`` over ``points`` uniform points of ``[0, 1]``."""
    from .transfer import fp_pointwise

    F = conjugated_map(target, k)
    x = np.linspace(0.0, 1.0, points)
    pg = fp_pointwise(F, target.density, x, tail_tol)
    return float(np.max(np.abs(pg - target.density(x))))


def sample(tau: PiecewiseMap, x0: float, count: int, burn_in: int = 1000,
           jitter_seed: int | None = 0, jitter: float = JITTER) -> np.ndarray:
    """``tau^{burn_in+1}(x0), ..., tau^{burn_in+count}(x0)`` with orbit jitter."""
    if count < 0:
        raise ValueError("count must be non-negative")
    return orbit(tau, x0, count, burn_in, jitter, jitter_seed)


def ks_distance(samples, cdf: Callable) -> float:
    """Two-sided Kolmogorov-Smirnov statistic ``sup |F_n - F|``."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise EmptySamples("empty-samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n), 0.0))


def lag1_autocorrelation(samples) -> float:
    x = np.asarray(samples, dtype=float)
    if x.size < 3:
        return 0.0
    x = x - x.mean()
    den = float(np.dot(x, x))
    return float(np.dot(x[:-1], x[1:]) / den) if den > 0 else 0.0


def write_samples(samples, path, summary_path=None, ks: float | None = None,
                  burn_in: int = 0, seed: int | None = 0) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for v in samples:
            fh.write(format(float(v), ".17g") + "\n")
    if summary_path is not None:
        with open(summary_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["count", "ks", "burn_in", "seed"])
            w.writerow([len(samples), "" if ks is None else format(ks, ".17g"), burn_in, seed])
