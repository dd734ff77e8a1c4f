"""Orbit statistics: correlations, decay rates, Birkhoff sums and CLT variance.

Orbits of maps with dyadic slopes collapse onto 0 in binary floating point
(each doubling shifts one bit out of the mantissa).  Every orbit step
therefore adds a uniform jitter of size ``jitter`` (default ``1e-13``),
reflected back into ``[0, 1]``.  All randomness comes from one seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .maps import MapError, PiecewiseMap
from .transfer import StepFunction, fp_step

JITTER = 1e-13
ESCAPE_TOL = 1e-9
FLOOR = 1e-14


class OrbitEscape(RuntimeError):
    pass


class MethodUnavailable(MapError):
    pass


class NotCentered(ValueError):
    pass


def _reflect(y: float) -> float:
    if y < 0.0:
        return -y
    if y > 1.0:
        return 2.0 - y
    return y


def trajectory(tau: PiecewiseMap, x0: float, steps: int, jitter: float = JITTER,
               seed: int | None = 0) -> np.ndarray:
    """``x_0, ..., x_steps`` with ``x_{k+1} = tau(x_k) + jitter noise``."""
    step = tau.stepper()
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-jitter, jitter, steps).tolist() if jitter > 0 else [0.0] * steps
    out = np.empty(steps + 1)
    x = float(x0)
    out[0] = x
    lo, hi = -ESCAPE_TOL, 1.0 + ESCAPE_TOL
    for k in range(steps):
        y = step(x)
        if not lo <= y <= hi:
            raise OrbitEscape(f"orbit-escape: iterate {k + 1} left [0, 1] (value {y!r})")
        x = _reflect(y + noise[k])
        out[k + 1] = x
    return out


def orbit(tau: PiecewiseMap, x0: float, count: int, burn_in: int = 0,
          jitter: float = JITTER, seed: int | None = 0) -> np.ndarray:
    """``tau^{burn_in+1}(x0), ..., tau^{burn_in+count}(x0)`` (jittered)."""
    if count <= 0:
        return np.empty(0)
    return trajectory(tau, x0, burn_in + count, jitter, seed)[burn_in + 1:]


def _as_callable(f) -> Callable:
    if callable(f):
        return f
    c = float(f)
    return lambda x: np.full(np.shape(x), c)


def birkhoff(tau: PiecewiseMap, f, x0: float, n: int, burn_in: int = 1000,
             jitter: float = JITTER, seed: int | None = 0) -> float:
    """``(1/n) sum_{k=burn_in}^{burn_in+n-1} f(tau^k x0)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    xs = trajectory(tau, x0, burn_in + n - 1, jitter, seed)[burn_in:]
    return float(np.mean(_as_callable(f)(xs)))


def integrate(f, mu: StepFunction, nodes: int = 8) -> float:
    """``integral of f dmu`` for a step density ``mu`` (Gauss-Legendre per step)."""
    if isinstance(f, StepFunction):
        return float(f.integral_product(mu))
    x, w = np.polynomial.legendre.leggauss(nodes)
    lo, hi = mu.t[:-1], mu.t[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pts = mid[:, None] + half[:, None] * x[None, :]
    vals = _as_callable(f)(pts) @ w
    return float(math.fsum(vals * half * mu.v))


def sample_density(mu: StepFunction, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws from a step density."""
    w = np.diff(mu.t)
    mass = mu.v * w
    keep = mass > 0
    lo, width, mass = mu.t[:-1][keep], w[keep], mass[keep]
    cum = np.cumsum(mass)
    u = rng.uniform(0.0, cum[-1], size)
    j = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
    prev = np.concatenate([[0.0], cum[:-1]])[j]
    return lo[j] + width[j] * np.clip((u - prev) / mass[j], 0.0, 1.0)


# -- decay fitting -----------------------------------------------------------------


@dataclass
class DecayFit:
    q: float
    prefactor: float
    flagged: bool
    used: int = 0


def fit_decay(values, n_range: tuple | None = None, floor: float = FLOOR) -> DecayFit:
    """Least-squares fit ``|C_n| ~ H q^n`` on the entries above ``floor``.

    ``n_range = (lo, hi)`` restricts to ``lo <= n <= hi`` (default: all n >= 1).
    With fewer than two usable entries the fit is flagged and ``q = 0``.
    """
    c = np.abs(np.asarray(values, dtype=float))
    n = np.arange(len(c))
    lo, hi = n_range if n_range is not None else (1, len(c) - 1)
    sel = (n >= lo) & (n <= hi) & (c > floor)
    if sel.sum() < 2:
        return DecayFit(0.0, 0.0, True, int(sel.sum()))
    slope, icpt = np.polyfit(n[sel], np.log(c[sel]), 1)
    return DecayFit(float(np.exp(slope)), float(np.exp(icpt)), False, int(sel.sum()))


# -- correlations -------------------------------------------------------------------


@dataclass
class CorrelationReport:
    values: np.ndarray
    method: str
    q: float
    C_prefactor: float
    stderr: np.ndarray | None = None
    flagged: bool = False
    truncation_bound: float = 0.0


def correlations(tau: PiecewiseMap, mu: StepFunction, f, g, n_max: int,
                 method: str = "exact-matrix", tail_tol: float = 1e-8,
                 orbit_length: int = 10**6, burn_in: int = 1000, seed: int | None = 0,
                 jitter: float = JITTER, batches: int = 50) -> CorrelationReport:
    """``C_n = integral f (g o tau^n) dmu - integral f dmu * integral g dmu``.

    ``exact-matrix`` pushes ``f * mu`` through the exact step operator and
    pairs with ``g`` (``f``, ``g`` step functions, affine maps only).
    ``orbit-average`` uses one jittered orbit and batch-means standard errors.
    """
    if method == "exact-matrix":
        if not tau.is_affine:
            raise MethodUnavailable("method-unavailable: exact-matrix needs affine branches")
        if not (isinstance(f, StepFunction) and isinstance(g, StepFunction)):
            raise MethodUnavailable("method-unavailable: exact-matrix needs step observables")
        w = f * mu
        mf, mg = float(w.total), float(g.integral_product(mu))
        vals, bound = [], 0.0
        for n in range(n_max + 1):
            if n:
                w, b = fp_step(tau, w, tail_tol, return_bound=True)
                bound += b
            vals.append(float(g.integral_product(w)) - mf * mg)
        vals = np.array(vals)
        fit = fit_decay(vals, (1, n_max))
        return CorrelationReport(vals, method, fit.q, fit.prefactor, None, fit.flagged,
                                 bound * float(g.sup()))
    if method != "orbit-average":
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    x0 = float(sample_density(mu, 1, rng)[0])
    xs = trajectory(tau, x0, burn_in + orbit_length + n_max, jitter, seed)[burn_in:]
    fx, gx = _as_callable(f)(xs), _as_callable(g)(xs)
    L = orbit_length
    size = L // batches
    vals = np.empty(n_max + 1)
    err = np.empty(n_max + 1)
    for n in range(n_max + 1):
        a, b = fx[:L], gx[n:n + L]
        vals[n] = np.mean(a * b) - np.mean(a) * np.mean(b)
        per = [np.mean(a[k:k + size] * b[k:k + size]) - np.mean(a[k:k + size]) * np.mean(b[k:k + size])
               for k in range(0, size * batches, size)]
        err[n] = np.std(per, ddof=1) / math.sqrt(batches)
    fit = fit_decay(vals, (1, n_max))
    return CorrelationReport(vals, method, fit.q, fit.prefactor, err, fit.flagged)


# -- central limit theorem ----------------------------------------------------------


@dataclass
class CltReport:
    sigma2: float
    n: int
    samples: int
    normal_distance: float
    green_kubo: float | None
    degenerate: bool = False
    sums: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)


def green_kubo(tau: PiecewiseMap, mu: StepFunction, f, terms: int = 64, n_bins: int = 256,
               tail_tol: float = 1e-8, seed: int | None = 0) -> float:
    """``C_0 + 2 sum_{k=1}^{terms} C_k`` for the autocorrelations of ``f``."""
    if tau.is_affine:
        fs = f if isinstance(f, StepFunction) else StepFunction.from_callable(f, n_bins)
        rep = correlations(tau, mu.on_bins(n_bins) if len(mu) > n_bins else mu, fs, fs,
                           terms, "exact-matrix", tail_tol)
    else:
        rep = correlations(tau, mu, f, f, terms, "orbit-average", tail_tol, seed=seed)
    c = rep.values
    return float(c[0] + 2 * np.sum(c[1:]))


def clt_probe(tau: PiecewiseMap, mu: StepFunction, f, n: int = 10**4, samples: int = 10**4,
              seed: int | None = 0, jitter: float = JITTER, tail_tol: float = 1e-8,
              gk_terms: int = 64, center_tol: float = 1e-6) -> CltReport:
    """Distribution of ``S_n / sqrt(n)`` over starting points drawn from ``mu``.

    ``f`` must have zero mean under ``mu``.  ``sigma2`` is the mean of
    ``(S_n/sqrt(n))^2`` over the ensemble and ``normal_distance`` the
    Kolmogorov-Smirnov distance to ``N(0, sigma2)``.
    """
    from scipy.stats import norm

    from .sampler import ks_distance

    if n < 1 or samples < 1:
        raise ValueError("n and samples must be positive")
    fc = _as_callable(f)
    mean = integrate(f, mu)
    if abs(mean) > center_tol:
        raise NotCentered(f"not-centered: integral of f dmu = {mean:.3g}")
    rng = np.random.default_rng(seed)
    x = sample_density(mu, samples, rng)
    S = np.zeros(samples)
    for _ in range(n):
        S += fc(x)
        y = tau.forward_array(x)
        if np.any((y < -ESCAPE_TOL) | (y > 1 + ESCAPE_TOL)):
            raise OrbitEscape("orbit-escape: ensemble left [0, 1]")
        y = y + rng.uniform(-jitter, jitter, samples)
        x = np.where(y < 0, -y, np.where(y > 1, 2 - y, y))
    z = S / math.sqrt(n)
    sigma2 = float(np.mean(z * z))
    degenerate = sigma2 <= FLOOR
    if degenerate:
        dist = 0.0
    else:
        dist = ks_distance(z, lambda v: norm.cdf(v, scale=math.sqrt(sigma2)))
    gk = green_kubo(tau, mu, f, gk_terms, tail_tol=tail_tol, seed=seed) if gk_terms else None
    return CltReport(sigma2, n, samples, float(dist), gk, degenerate, z)


# -- export -------------------------------------------------------------------------


def _g17(x) -> str:
    return format(float(x), ".17g")


def write_correlations(report: CorrelationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "C_n"])
        for k, c in enumerate(report.values):
            w.writerow([k, _g17(c)])


def write_clt(report: CltReport, sums_path, summary_path) -> None:
    with open(sums_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z"])
        for z in report.sums:
            w.writerow([_g17(z)])
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma2", "normal_distance", "green_kubo"])
        gk = "" if report.green_kubo is None else _g17(report.green_kubo)
        w.writerow([_g17(report.sigma2), _g17(report.normal_distance), gk])
