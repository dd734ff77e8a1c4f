"""Transfer (Frobenius-Perron) operator on step functions.

For maps whose branches are affine the operator sends step functions to
step functions, so it can be applied exactly.  With rational inputs the
result is rational; with float inputs every output value is a sum of
non-negative float terms, which keeps positivity and monotonicity exact.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .maps import (
    DEFAULT_MAX_BRANCHES,
    MapError,
    PiecewiseMap,
    TailPlan,
    contraction_at_zero,
    is_exact,
)

# image points closer than this are merged in float mode
_MERGE_TOL = 1e-14
_POINTWISE_CHUNK = 1 << 22
_POINTWISE_CAP = 1 << 28


class NonAffineBranch(MapError):
    pass


class InputNotMonotone(ValueError):
    pass


class AlphaNotContractive(MapError):
    pass


def _all_exact(seq) -> bool:
    return all(is_exact(v) for v in seq)


class StepFunction:
    """Right-continuous step function on ``[0, 1]``.

    ``values[j]`` is the value on ``[breakpoints[j], breakpoints[j+1])``; the
    last value also holds at 1.  Breakpoints and values that are all ``int`` or
    ``Fraction`` are kept exactly; float copies are always available as ``t``
    and ``v``.
    """

    def __init__(self, breakpoints, values, check: bool = True):
        if isinstance(breakpoints, np.ndarray) or not _all_exact(breakpoints):
            self._t_exact = None
            self.t = np.asarray(breakpoints, dtype=float)
        else:
            self._t_exact = tuple(breakpoints)
            self.t = np.array([float(x) for x in self._t_exact])
        if isinstance(values, np.ndarray) or not _all_exact(values):
            self._v_exact = None
            self.v = np.asarray(values, dtype=float)
        else:
            self._v_exact = tuple(values)
            self.v = np.array([float(x) for x in self._v_exact])
        if check:
            self._check()

    def _check(self):
        t = self._t_exact if self._t_exact is not None else self.t
        if len(t) < 2 or len(self.v) != len(t) - 1:
            raise ValueError("need m + 1 breakpoints for m values")
        if t[0] != 0 or t[-1] != 1:
            raise ValueError("breakpoints must start at 0 and end at 1")
        if self._t_exact is not None:
            if any(not p < q for p, q in zip(t, t[1:])):
                raise ValueError("breakpoints must be strictly increasing")
        elif not np.all(np.diff(self.t) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(self.v)):
            raise ValueError("values must be finite")

    # -- constructors ----------------------------------------------------------

    @classmethod
    def constant(cls, c=1):
        return cls((0, 1), (c,))

    @classmethod
    def indicator(cls, lo, hi, value=1):
        """``value`` on ``[lo, hi)``, zero elsewhere."""
        pts, vals = [0], []
        if lo > 0:
            pts.append(lo)
            vals.append(0)
        vals.append(value)
        if hi < 1:
            pts.append(hi)
            vals.append(0)
        pts.append(1)
        return cls(pts, vals)

    @classmethod
    def from_bins(cls, values):
        """Step function on ``len(values)`` uniform bins."""
        n = len(values)
        if isinstance(values, np.ndarray):
            return cls(np.linspace(0.0, 1.0, n + 1), values)
        return cls([Fraction(j, n) for j in range(n + 1)], list(values))

    @classmethod
    def from_callable(cls, fn: Callable, n_bins: int, nodes: int = 8):
        """Bin averages of ``fn`` on uniform bins (Gauss-Legendre per bin)."""
        x, w = np.polynomial.legendre.leggauss(nodes)
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 / n_bins
        pts = mid[:, None] + half * x[None, :]
        vals = np.asarray(fn(pts), dtype=float) @ w / 2
        return cls(edges, vals)

    # -- basic properties --------------------------------------------------------

    @property
    def exact(self) -> bool:
        return self._t_exact is not None and self._v_exact is not None

    @property
    def breakpoints(self) -> tuple:
        return self._t_exact if self._t_exact is not None else tuple(self.t.tolist())

    @property
    def values(self) -> tuple:
        return self._v_exact if self._v_exact is not None else tuple(self.v.tolist())

    @property
    def widths(self):
        if self._t_exact is not None:
            t = self._t_exact
            return [q - p for p, q in zip(t, t[1:])]
        return np.diff(self.t)

    def __len__(self) -> int:
        return len(self.v)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} steps, total={float(self.total):.6g})"

    @property
    def total(self):
        """Integral over ``[0, 1]``."""
        if self.exact:
            return sum(v * w for v, w in zip(self._v_exact, self.widths))
        return math.fsum(self.v * np.diff(self.t))

    def l1(self):
        if self.exact:
            return sum(abs(v) * w for v, w in zip(self._v_exact, self.widths))
        return math.fsum(np.abs(self.v) * np.diff(self.t))

    def sup(self):
        """Supremum of ``|f|``."""
        if self._v_exact is not None:
            return max(abs(v) for v in self._v_exact)
        return float(np.max(np.abs(self.v)))

    def variation(self):
        """Sum of jump sizes at interior breakpoints."""
        if self._v_exact is not None:
            vs = self._v_exact
            return sum((abs(q - p) for p, q in zip(vs, vs[1:])), 0)
        return float(np.sum(np.abs(np.diff(self.v))))

    def is_nonincreasing(self, atol: float = 0.0) -> bool:
        if self._v_exact is not None and atol == 0:
            vs = self._v_exact
            return all(q <= p for p, q in zip(vs, vs[1:]))
        return bool(np.all(np.diff(self.v) <= atol))

    def first_increase(self, atol: float = 0.0):
        """``(j, v_j, v_{j+1})`` for the first upward jump above ``atol``, or None."""
        d = np.diff(self.v)
        bad = np.nonzero(d > atol)[0]
        if self._v_exact is not None and atol == 0:
            vs = self._v_exact
            bad = [j for j in range(len(vs) - 1) if vs[j + 1] > vs[j]]
        if len(bad) == 0:
            return None
        j = int(bad[0])
        return j, self.values[j], self.values[j + 1]

    # -- evaluation ----------------------------------------------------------------

    def __call__(self, x):
        if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
            if self._t_exact is not None and is_exact(x):
                j = bisect.bisect_right(self._t_exact, x) - 1
            else:
                j = int(np.searchsorted(self.t, float(x), side="right")) - 1
            j = min(max(j, 0), len(self.v) - 1)
            return self.values[j]
        j = np.searchsorted(self.t, np.asarray(x, dtype=float), side="right") - 1
        return self.v[np.clip(j, 0, len(self.v) - 1)]

    def cumulative(self, x):
        """``F(x) = integral of f over [0, x]`` for float ``x`` (array-friendly)."""
        c = np.concatenate([[0.0], np.cumsum(self.v * np.diff(self.t))])
        return np.interp(x, self.t, c)

    # -- arithmetic ------------------------------------------------------------------

    def _merged(self, other: "StepFunction"):
        if self._t_exact is not None and other._t_exact is not None:
            pts = sorted(set(self._t_exact) | set(other._t_exact))
            mids = [(p + q) / 2 for p, q in zip(pts, pts[1:])]
            return pts, [self(m) for m in mids], [other(m) for m in mids]
        pts = np.union1d(self.t, other.t)
        mids = 0.5 * (pts[:-1] + pts[1:])
        return pts, self(mids), other(mids)

    def _combine(self, other, op):
        if isinstance(other, StepFunction):
            pts, a, b = self._merged(other)
            if isinstance(a, list) and _all_exact(a) and _all_exact(b):
                return make_step(pts, [op(p, q) for p, q in zip(a, b)])
            return make_step(pts, op(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))
        if self._v_exact is not None and is_exact(other):
            return make_step(self.breakpoints, [op(v, other) for v in self._v_exact])
        return make_step(self._t_exact or self.t, op(self.v, float(other)))

    def __add__(self, other):
        return self._combine(other, lambda p, q: p + q)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, lambda p, q: p - q)

    def __mul__(self, other):
        return self._combine(other, lambda p, q: p * q)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if self._v_exact is not None and is_exact(c):
            return make_step(self.breakpoints, [Fraction(v) / c for v in self._v_exact])
        return make_step(self._t_exact or self.t, self.v / float(c))

    def __neg__(self):
        return self * -1

    def integral_product(self, other: "StepFunction"):
        """``integral of f * g`` over ``[0, 1]``."""
        return (self * other).total

    def simplify(self) -> "StepFunction":
        """Merge neighbouring steps with equal values."""
        vals = self.values
        keep = [0] + [j for j in range(1, len(vals)) if vals[j] != vals[j - 1]]
        if len(keep) == len(vals):
            return self
        pts = self.breakpoints
        new_t = [pts[j] for j in keep] + [pts[-1]]
        new_v = [vals[j] for j in keep]
        if self._t_exact is None:
            new_t = np.array(new_t)
        if self._v_exact is None:
            new_v = np.array(new_v)
        return type(self)(new_t, new_v, check=False)

    def on_bins(self, n_bins: int) -> "StepFunction":
        """Averages over ``n_bins`` uniform bins."""
        if self.exact:
            t, v = self._t_exact, self._v_exact
            cum = [0]
            for j, w in enumerate(self.widths):
                cum.append(cum[-1] + v[j] * w)

            def integral(x):
                j = min(bisect.bisect_right(t, x) - 1, len(v) - 1)
                return cum[j] + v[j] * (x - t[j])

            edges = [Fraction(j, n_bins) for j in range(n_bins + 1)]
            ints = [integral(e) for e in edges]
            return make_step(edges, [(q - p) * n_bins for p, q in zip(ints, ints[1:])])
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        return make_step(edges, np.diff(self.cumulative(edges)) * n_bins)

    def to_density(self) -> "StepDensity":
        return StepDensity(self._t_exact or self.t, self._v_exact or self.v)

    # -- serialization ---------------------------------------------------------------

    def to_csv(self, path) -> None:
        t, v = self.t, self.v
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["left", "right", "value"])
            for j in range(len(v)):
                w.writerow([_g17(t[j]), _g17(t[j + 1]), _g17(v[j])])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no rows")
        t = [float(rows[0]["left"])] + [float(r["right"]) for r in rows]
        return cls(np.array(t), np.array([float(r["value"]) for r in rows]))


def _g17(x) -> str:
    return format(float(x), ".17g")


class StepDensity(StepFunction):
    """A step function with non-negative values."""

    def _check(self):
        super()._check()
        if np.any(self.v < 0):
            raise ValueError("density values must be non-negative")


def make_step(breakpoints, values) -> StepFunction:
    """StepDensity when every value is non-negative, else StepFunction."""
    v = np.asarray(values, dtype=float) if not isinstance(values, np.ndarray) else values
    cls = StepDensity if np.all(v >= 0) else StepFunction
    return cls(breakpoints, values, check=False)


def random_monotone_density(rng: np.random.Generator, pieces: int | None = None,
                            exact: bool = False) -> StepDensity:
    """Random non-increasing step density with unit integral.

    Breakpoints are uniform on (0, 1); the jumps are exponential, and a few
    densities get a large jump near 0 so the family includes spiky cases.
    """
    if pieces is None:
        pieces = int(rng.integers(1, 65))
    cuts = np.sort(rng.uniform(0.0, 1.0, pieces - 1))
    cuts = np.unique(cuts)
    t = np.concatenate([[0.0], cuts, [1.0]])
    jumps = rng.exponential(1.0, len(t) - 1)
    if rng.uniform() < 0.2:
        jumps[0] *= 50
    v = np.cumsum(jumps[::-1])[::-1]
    if exact:
        tq = [Fraction(x).limit_denominator(1 << 20) for x in t]
        tq = sorted(set(tq))
        vq = [Fraction(x).limit_denominator(1 << 20) for x in v[: len(tq) - 1]]
        f = StepDensity(tq, vq)
        return f / f.total
    f = StepDensity(t, v)
    return f / f.total


# -- the operator ------------------------------------------------------------------


def _affine_exact(br) -> bool:
    return all(is_exact(p) for p in (br.a, br.b, br.slope, br.intercept))


def _group_mass(plan: TailPlan, f: StepFunction):
    """Constant added on ``[0, 1]`` by tail groups (each inside one cell of f)."""
    vals = f.values
    if f._v_exact is not None:
        return sum((vals[g.cell] * g.slope_mass for g in plan.groups), 0)
    return math.fsum(float(vals[g.cell]) * float(g.slope_mass) for g in plan.groups)


def fp_step(tau: PiecewiseMap, f: StepFunction, tail_tol: float = 1e-8,
            max_branches: int = DEFAULT_MAX_BRANCHES, return_bound: bool = False):
    """Exact pushforward of a step function under an affine-branch map.

    Each step of ``f`` on ``[t, t')`` inside branch ``i`` contributes
    ``f / s_i`` on its image.  Closable tails are summed in closed form
    (no truncation); other infinite tails are cut once the slope sum falls
    below ``tail_tol`` and the dropped contribution is bounded by
    ``sup|f| * max(slope_sum, length)`` of the cut.

    Returns the image step function, and with ``return_bound`` the pair
    ``(Pf, bound)``.
    """
    if not tau.is_affine:
        raise NonAffineBranch("non-affine-branch: exact mode needs affine branches; "
                              "use fp_pointwise")
    plan = tau.tail_plan(f.breakpoints, tail_tol, "slope", max_branches)
    branches = [br for _, br in plan.explicit]
    bound = f.sup() * max(plan.truncated_slope, plan.truncated_length)
    exact = f.exact and all(_affine_exact(br) for br in branches)
    if exact:
        g = _fp_exact(branches, f) + _group_mass(plan, f)
    else:
        g = _fp_float(branches, f, float(_group_mass(plan, f)))
    g = g.simplify()
    return (g, bound) if return_bound else g


def _fp_exact(branches, f: StepFunction) -> StepFunction:
    t = f._t_exact
    pts = {0, 1}
    for br in branches:
        pts.add(br.image_left)
        pts.add(br.image_right)
        lo = bisect.bisect_right(t, br.a)
        hi = bisect.bisect_left(t, br.b)
        for p in t[lo:hi]:
            pts.add(br.forward(p))
    pts = sorted(p for p in pts if 0 <= p <= 1)
    vals = []
    for p, q in zip(pts, pts[1:]):
        y = (p + q) / 2
        acc = 0
        for br in branches:
            if br.image_left <= y < br.image_right:
                acc += Fraction(f(br.inverse(y))) / br.slope
        vals.append(acc)
    return make_step(pts, vals)


def _fp_float(branches, f: StepFunction, const: float) -> StepFunction:
    a = np.array([float(br.a) for br in branches])
    b = np.array([float(br.b) for br in branches])
    s = np.array([float(br.slope) for br in branches])
    # exact image ends; positions are measured from a to avoid cancellation
    lo_img = np.array([float(br.image_left) for br in branches])
    hi_img = np.array([float(br.image_right) for br in branches])
    parts = [np.array([0.0, 1.0]), lo_img, hi_img]
    for k in range(len(branches)):
        inside = f.t[(f.t > a[k]) & (f.t < b[k])]
        if inside.size:
            parts.append(lo_img[k] + s[k] * (inside - a[k]))
    pts = np.unique(np.clip(np.concatenate(parts), 0.0, 1.0))
    keep = np.concatenate([[True], np.diff(pts) > _MERGE_TOL])
    pts = pts[keep]
    pts[-1] = 1.0
    if len(pts) < 2:
        pts = np.array([0.0, 1.0])
    mids = 0.5 * (pts[:-1] + pts[1:])
    vals = np.full(mids.shape, const)
    for k in range(len(branches)):
        lo = np.searchsorted(mids, lo_img[k], side="left")
        hi = np.searchsorted(mids, hi_img[k], side="left")
        if hi > lo:
            y = mids[lo:hi]
            vals[lo:hi] += f(a[k] + (y - lo_img[k]) / s[k]) / s[k]
    return make_step(pts, vals)


def fp_pointwise(tau: PiecewiseMap, f, x, tail_tol: float = 1e-8, f_sup: float | None = None,
                 return_bound: bool = False, max_branches: int = DEFAULT_MAX_BRANCHES):
    """``(P f)(x) = sum_i f(tau_i^{-1} x) / tau_i'(tau_i^{-1} x)`` at points ``x``.

    ``f`` is a :class:`StepFunction` or a vectorized callable.  For a step
    function and a closable tail the tail is summed exactly.  Otherwise tail
    branches are added (in vectorized chunks when the tail exposes its
    parameters) until the remaining slope sum is at most ``tail_tol``; the
    reported bound is that slope sum times ``sup |f|`` (``f_sup`` for
    callables, default 1).
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    is_step = isinstance(f, StepFunction)
    if is_step:
        fs = f.sup()
        plan = tau.tail_plan(f.breakpoints, tail_tol, "slope", max_branches)
    else:
        fs = 1.0 if f_sup is None else f_sup
        vec_tail = tau.tail is not None and tau.tail.params is not None and tau.tail.affine
        if vec_tail:
            plan = tau.tail_plan(None, float("inf"), "slope", max_branches)
        else:
            plan = tau.tail_plan(None, tail_tol, "slope", max_branches)
    out = np.zeros(xs.shape)
    for _, br in plan.explicit:
        m = (xs >= float(br.image_left)) & (xs < float(br.image_right))
        m |= (xs == 1.0) & (float(br.image_right) == 1.0)
        if m.any():
            pre = br.inverse(xs[m])
            out[m] += np.asarray(f(pre), dtype=float) / br.derivative(pre)
    bound = float(plan.truncated_slope) * float(fs)
    if is_step and plan.groups:
        out += float(_group_mass(plan, f))
    elif not is_step and tau.tail is not None and tau.tail.params is not None and tau.tail.affine:
        extra, slope_left = _tail_chunks(tau, f, xs, tail_tol)
        out += extra
        bound = slope_left * float(fs)
    out = out if np.ndim(x) else float(out[0])
    return (out, bound) if return_bound else out


def _tail_chunks(tau: PiecewiseMap, f, xs: np.ndarray, tail_tol: float):
    """Sum the affine tail of ``tau`` at points ``xs`` in blocks of indices."""
    tail = tau.tail
    i0 = tail.start - 1
    acc = np.zeros(xs.shape)
    while float(tail.slope_sum(i0)) > tail_tol:
        if i0 - tail.start > _POINTWISE_CAP:
            break
        need = _POINTWISE_CHUNK
        idx = np.arange(i0 + 1, i0 + 1 + need, dtype=float)
        a, b, s, c = tail.params(idx)
        inv_s = 1.0 / s
        if not tail.closable:
            lo_img, hi_img = s * a + c, s * b + c
        for j, y in enumerate(xs):
            if tail.closable:
                # every closable tail branch maps onto [0, 1)
                acc[j] += np.sum(f((y - c) * inv_s) * inv_s)
                continue
            m = (y >= lo_img) & ((y < hi_img) | ((y == 1.0) & (hi_img == 1.0)))
            pre = (y - c[m]) / s[m]
            acc[j] += np.sum(np.asarray(f(pre), dtype=float) / s[m])
        i0 += need
    return acc, float(tail.slope_sum(i0))


def _pushforward(tau, f, tail_tol):
    """Affine maps: exact ``Pf``; otherwise None."""
    return fp_step(tau, f, tail_tol) if tau.is_affine else None


def _probe_points(tau: PiecewiseMap, f: StepFunction, tail_tol: float) -> np.ndarray:
    """Images of the breakpoints of f and of branch ends, plus midpoints."""
    plan = tau.tail_plan(None, tail_tol, "slope")
    pts = [np.array([0.0, 1.0])]
    for _, br in plan.explicit:
        a, b = float(br.a), float(br.b)
        inner = f.t[(f.t > a) & (f.t < b)]
        pts.append(np.atleast_1d(br.forward(np.concatenate([[a], inner]))))
        pts.append(np.array([float(br.image_right)]))
    y = np.unique(np.clip(np.concatenate(pts), 0.0, 1.0))
    mids = 0.5 * (y[:-1] + y[1:])
    return np.unique(np.concatenate([y, mids]))


@dataclass
class MonotoneResult:
    passed: bool
    witness: tuple | None = None
    points: int = 0


def monotone_check(tau: PiecewiseMap, f: StepFunction, tail_tol: float = 1e-8,
                   rtol: float = 1e-12) -> MonotoneResult:
    """Check that ``P f`` is non-increasing for a non-increasing ``f``.

    Affine maps are checked exactly on the breakpoints of ``P f``; other maps
    on the images of the breakpoints of ``f`` and the midpoints between them,
    allowing a relative rounding slack ``rtol``.  The witness is
    ``(x_left, x_right, value_left, value_right)``.
    """
    if not f.is_nonincreasing():
        j, p, q = f.first_increase()
        raise InputNotMonotone(f"input-not-monotone: f jumps up from {p} to {q} "
                               f"at {f.breakpoints[j + 1]}")
    g = _pushforward(tau, f, tail_tol)
    if g is not None:
        hit = g.first_increase()
        if hit is None:
            return MonotoneResult(True, None, len(g.t))
        j, p, q = hit
        return MonotoneResult(False, (g.t[j], g.t[j + 1], p, q), len(g.t))
    y = _probe_points(tau, f, tail_tol)
    vals = fp_pointwise(tau, f, y, tail_tol)
    slack = rtol * max(1.0, float(np.max(np.abs(vals))))
    bad = np.nonzero(np.diff(vals) > slack)[0]
    if bad.size:
        j = int(bad[0])
        return MonotoneResult(False, (y[j], y[j + 1], vals[j], vals[j + 1]), len(y))
    return MonotoneResult(True, None, len(y))


@dataclass(frozen=True)
class LyConstants:
    alpha: float
    D: float
    K: float
    r: float | None = None
    truncation_bound: float = 0.0
    exact: tuple | None = field(default=None, compare=False)


def ly_constants(tau: PiecewiseMap, tail_tol: float = 1e-8,
                 max_branches: int = DEFAULT_MAX_BRANCHES) -> LyConstants:
    """Contraction ``alpha``, additive constant ``D`` and ``K = 1 + D/(1-alpha)``.

    Without accumulation at 0, ``alpha = 1/tau'(0)`` and ``D`` sums
    ``1/(a_i tau_i'(a_i))`` over the branches with ``a_i > 0``.  When the
    branches accumulate at 0, ``alpha`` is the slope sum over ``a_i < r`` and
    ``D`` the sum over ``a_i >= r``.  An infinite tail without a closed-form
    ``D`` sum is truncated and its bound is added to ``D``.
    """
    alpha, r, _ = contraction_at_zero(tau, tail_tol)
    if not alpha < 1:
        raise AlphaNotContractive(f"alpha-not-contractive: alpha = {float(alpha)}")
    trunc = 0
    if tau.accumulates_at_zero:
        terms = []
        for i in range(1, max_branches + 1):
            br = tau.branch(i)
            if br is None:
                break
            if br.a >= r:
                terms.append(1 / (br.a * br.left_slope))
            elif i > len(tau.branches):
                break
    else:
        tail = tau.tail
        terms = [1 / (br.a * br.left_slope) for br in tau.branches if br.a > 0]
        if tail is not None:
            if tail.d_sum is not None:
                terms.append(tail.d_sum(tail.start - 1))
            else:
                plan = tau.tail_plan(None, tail_tol, "slope", max_branches)
                tail_br = [br for i, br in plan.explicit if i >= tail.start]
                terms.extend(1 / (br.a * br.left_slope) for br in tail_br)
                i_last = tail.start - 1 + len(tail_br)
                lo, _ = tau.tail_hull(i_last)
                trunc = plan.truncated_slope / lo
    D = _sum(terms) + trunc
    K = 1 + D / (1 - alpha)
    return LyConstants(float(alpha), float(D), float(K), None if r is None else float(r),
                       float(trunc), (alpha, D, K))


def _sum(terms):
    if _all_exact(terms):
        return sum(terms, 0)
    return math.fsum(float(x) for x in terms)


@dataclass
class SupBoundResult:
    passed: bool
    lhs: float
    rhs: float
    slack: float


def sup_norm_image(tau: PiecewiseMap, f: StepFunction, tail_tol: float = 1e-8):
    """``||P f||_inf`` plus the truncation bound of the evaluation."""
    g = _pushforward(tau, f, tail_tol)
    if g is not None:
        return (float(g.v[0]) if g.is_nonincreasing() else g.sup()), 0.0
    y = _probe_points(tau, f, tail_tol)
    vals, bound = fp_pointwise(tau, f, y, tail_tol, return_bound=True)
    return float(np.max(vals)), bound


def sup_bound_check(tau: PiecewiseMap, f: StepFunction, constants: LyConstants,
                    tail_tol: float = 1e-8, atol: float = 1e-12) -> SupBoundResult:
    """Check ``||P f||_inf <= alpha ||f||_inf + D ||f||_1`` (plus truncation)."""
    lhs, bound = sup_norm_image(tau, f, tail_tol)
    fs, f1 = float(f.sup()), float(f.l1())
    rhs = constants.alpha * fs + constants.D * f1 + constants.truncation_bound * fs + bound
    slack = rhs - lhs
    return SupBoundResult(slack >= -atol, lhs, rhs, slack)


def lower_function(tau: PiecewiseMap, constants: LyConstants) -> StepDensity:
    """``h = 1/2`` on ``[0, 1/(2K))``, zero elsewhere."""
    K = constants.exact[2] if constants.exact is not None else constants.K
    edge = 1 / (2 * K) if is_exact(K) else 1.0 / (2.0 * K)
    return StepDensity.indicator(0, edge, Fraction(1, 2) if is_exact(edge) else 0.5)


@dataclass
class LowerCheck:
    passed: bool
    n1: int | None
    deficits: list
    method: str


def lower_function_check(tau: PiecewiseMap, f: StepFunction, h: StepFunction | None = None,
                         n_max: int = 50, tail_tol: float = 1e-8, n_bins: int = 1024,
                         ulam=None) -> LowerCheck:
    """Find ``n1 <= n_max`` with ``P^n f >= h`` on all breakpoints for ``n1 <= n <= n_max``.

    Affine maps iterate the exact step operator.  Other maps use an Ulam
    matrix on ``n_bins`` bins (pass ``ulam`` to reuse one); there the check
    runs on the bin values.
    """
    if h is None:
        h = lower_function(tau, ly_constants(tau, tail_tol))
    deficits = []
    if tau.is_affine:
        method = "exact-step"
        g = f
        for _ in range(n_max):
            g = fp_step(tau, g, tail_tol)
            deficits.append(_deficit(h, g))
    else:
        from .ulam import build_ulam

        method = f"ulam-{n_bins}"
        M = ulam if ulam is not None else build_ulam(tau, n_bins, tail_tol)
        n = M.n_bins
        mass = f.on_bins(n).v / n
        MT = M.matrix.T.tocsr()
        edges = np.linspace(0.0, 1.0, n + 1)
        for _ in range(n_max):
            mass = MT @ mass
            deficits.append(_deficit(h, StepFunction(edges, mass * n, check=False)))
    n1 = None
    for k in range(len(deficits), 0, -1):
        if deficits[k - 1] > 0:
            break
        n1 = k
    return LowerCheck(n1 is not None, n1, deficits, method)


def _deficit(h: StepFunction, g: StepFunction) -> float:
    """``max (h - g)`` over the merged breakpoints (<= 0 means g dominates h)."""
    pts = np.union1d(h.t, g.t)[:-1]
    return float(np.max(h(pts) - g(pts)))
