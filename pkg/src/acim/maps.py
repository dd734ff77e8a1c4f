"""Interval maps assembled from increasing convex branches, finite or infinite in number.

A map is stored as a finite, explicitly materialized prefix of branches plus an
optional :class:`TailDescriptor` that generates the remaining branches on demand
and carries closed-form bounds for the sums that condition the class (reciprocal
left-endpoint slopes, domain lengths).  Every operation that would otherwise
need infinitely many branches either closes the tail exactly (affine tails
mapping onto ``[0, 1)``) or truncates it and reports the truncation bound.
"""
from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import numpy as np

Number = Union[int, float, Fraction]

DEFAULT_MAX_BRANCHES = 1_000_000
DEFAULT_MAX_CELLS = 1 << 20
DEFAULT_MAX_BASE = 1 << 12


class MapError(ValueError):
    """Base class for errors raised by this module."""


class MalformedBranch(MapError):
    pass


class PointInTailGap(MapError):
    pass


class TruncationOverflow(MapError):
    pass


class NotReached(MapError):
    def __init__(self, message: str, best_order: int, best_slope: float):
        super().__init__(message)
        self.best_order = best_order
        self.best_slope = best_slope


class NoReturnFound(MapError):
    pass


class UnknownMap(MapError):
    pass


def is_exact(x: Any) -> bool:
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


def _bisect_inverse(forward: Callable, a: float, b: float, tol: float = 1e-12) -> Callable:
    """Vectorized bracketed bisection for an increasing ``forward`` on ``[a, b]``."""

    def inverse(y):
        scalar = np.ndim(y) == 0
        y = np.atleast_1d(np.asarray(y, dtype=float))
        lo = np.full_like(y, float(a))
        hi = np.full_like(y, float(b))
        f_lo = forward(lo)
        f_hi = forward(hi)
        if np.any(y < f_lo - 1e-12) or np.any(y > f_hi + 1e-12):
            raise MalformedBranch("inverse-failure: value outside the branch image")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = forward(mid) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) <= tol:
                break
        out = 0.5 * (lo + hi)
        return float(out[0]) if scalar else out

    return inverse


@dataclass(frozen=True, eq=False)
class Branch:
    """One increasing convex piece of a map on ``[a, b)``.

    ``forward``, ``derivative`` and ``inverse`` accept Python scalars and
    numpy arrays.  Affine branches keep ``slope`` and ``intercept`` so the
    transfer operator can act on step functions exactly; with ``int`` or
    ``Fraction`` parameters, scalar evaluation stays rational.
    """

    a: Number
    b: Number
    forward: Callable
    derivative: Callable
    inverse: Callable
    slope: Number | None = None
    intercept: Number | None = None

    def __post_init__(self):
        if not self.a < self.b:
            raise MalformedBranch(f"empty or reversed domain [{self.a}, {self.b})")
        if self.a < 0 or self.b > 1:
            raise MalformedBranch(f"domain [{self.a}, {self.b}) leaves [0, 1]")

    @classmethod
    def affine(cls, a: Number, b: Number, slope: Number, intercept: Number) -> "Branch":
        if not slope > 0:
            raise MalformedBranch("affine branch needs a positive slope")
        s_f, c_f = float(slope), float(intercept)

        def forward(x):
            if isinstance(x, np.ndarray):
                return s_f * x + c_f
            return slope * x + intercept

        def derivative(x):
            if isinstance(x, np.ndarray):
                return np.full(x.shape, s_f)
            return slope

        def inverse(y):
            if isinstance(y, np.ndarray):
                return (y - c_f) / s_f
            return (y - intercept) / slope

        return cls(a, b, forward, derivative, inverse, slope, intercept)

    @classmethod
    def analytic(cls, a: Number, b: Number, forward: Callable, derivative: Callable,
                 inverse: Callable | None = None) -> "Branch":
        if inverse is None:
            inverse = _bisect_inverse(forward, float(a), float(b))
        return cls(a, b, forward, derivative, inverse)

    @property
    def is_affine(self) -> bool:
        return self.slope is not None

    @cached_property
    def image_left(self) -> Number:
        return self.forward(self.a)

    @cached_property
    def image_right(self) -> Number:
        return self.forward(self.b)

    @cached_property
    def left_slope(self) -> Number:
        return self.derivative(self.a)

    def contains(self, x) -> bool:
        return self.a <= x < self.b or (x == self.b == 1)

    def covers(self, y) -> bool:
        """True when ``y`` lies in the image ``[image_left, image_right)``."""
        return self.image_left <= y < self.image_right or (y == self.image_right == 1)

    def restrict(self, lo: Number, hi: Number) -> "Branch":
        if self.is_affine:
            return Branch.affine(lo, hi, self.slope, self.intercept)
        return Branch(lo, hi, self.forward, self.derivative, self.inverse)

    def then(self, outer: "Branch", lo: Number, hi: Number) -> "Branch":
        """The composition ``outer ∘ self`` restricted to ``[lo, hi)``."""
        if self.is_affine and outer.is_affine:
            return Branch.affine(lo, hi, outer.slope * self.slope,
                                 outer.slope * self.intercept + outer.intercept)
        f_in, d_in, i_in = self.forward, self.derivative, self.inverse
        f_out, d_out, i_out = outer.forward, outer.derivative, outer.inverse
        return Branch(
            lo, hi,
            lambda x: f_out(f_in(x)),
            lambda x: d_out(f_in(x)) * d_in(x),
            lambda y: i_in(i_out(y)),
        )

    def __repr__(self) -> str:
        if self.is_affine:
            return f"Branch.affine(a={self.a}, b={self.b}, slope={self.slope}, intercept={self.intercept})"
        return f"Branch.analytic(a={self.a}, b={self.b})"


@dataclass(frozen=True)
class TailDescriptor:
    """Branches with index ``>= start`` generated on demand.

    ``slope_sum(i0)`` bounds the sum of ``1/tau_i'(a_i)`` over ``i > i0`` and
    ``length(i0)`` is the total domain length beyond ``i0``.  When ``closable``
    is set, every tail branch is affine onto ``[0, 1)`` and both functions are
    exact, which lets the transfer operator sum whole index ranges in closed
    form.  ``locate`` (scalar or numpy) returns an approximate index of the
    tail branch containing a point and ``params`` returns ``(a, b, slope,
    intercept)`` float arrays for an index array; both are optional.
    ``evaluate`` is an optional float-stable scalar ``tau`` on the tail, used
    by long orbits where ``slope * x + intercept`` would cancel badly.
    """

    start: int
    generator: Callable[[int], Branch | None]
    slope_sum: Callable[[int], Number]
    length: Callable[[int], Number]
    limit: float | None = None
    locate: Callable | None = None
    params: Callable | None = None
    d_sum: Callable[[int], Number] | None = None
    affine: bool = False
    closable: bool = False
    evaluate: Callable[[float], float] | None = None


@dataclass(frozen=True)
class TailGroup:
    """Consecutive tail branches ``first..last`` lying inside one cell of a cut set."""

    first: int
    last: int | None
    cell: int
    slope_mass: Number
    length: Number


@dataclass(frozen=True)
class TailPlan:
    explicit: tuple
    groups: tuple
    truncated_slope: Number
    truncated_length: Number


def cell_of(cuts: Sequence, x) -> int:
    j = bisect.bisect_right(cuts, x) - 1
    return min(max(j, 0), len(cuts) - 2)


class PiecewiseMap:
    """An interval map given by an ordered branch prefix and an optional tail.

    Instances are immutable; tail branches are memoized under a lock so that
    concurrent readers see a consistent cache.
    """

    def __init__(self, branches: Sequence[Branch], tail: TailDescriptor | None = None,
                 name: str = "map"):
        self._prefix = tuple(branches)
        if not self._prefix and tail is None:
            raise MalformedBranch("a map needs at least one branch")
        if tail is not None and tail.start != len(self._prefix) + 1:
            raise MalformedBranch("tail must start right after the stored prefix")
        self.tail = tail
        self.name = name
        order = sorted(range(len(self._prefix)), key=lambda k: self._prefix[k].a)
        for p, q in zip(order, order[1:]):
            if self._prefix[p].b > self._prefix[q].a:
                raise MalformedBranch(
                    f"malformed-branch: domains of branches {p + 1} and {q + 1} overlap")
        self._order = order
        self._lefts = [self._prefix[k].a for k in order]
        self._cache: dict[int, Branch | None] = {}
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        kind = "finite" if self.tail is None else "countable"
        return f"PiecewiseMap({self.name!r}, {len(self._prefix)} stored branches, {kind})"

    @property
    def branches(self) -> tuple:
        return self._prefix

    @property
    def is_finite(self) -> bool:
        return self.tail is None

    @property
    def accumulates_at_zero(self) -> bool:
        return self.tail is not None and self.tail.limit == 0

    @property
    def is_affine(self) -> bool:
        return all(b.is_affine for b in self._prefix) and (self.tail is None or self.tail.affine)

    def branch(self, i: int) -> Branch | None:
        """Branch with 1-based index ``i`` or None when the tail refuses it."""
        if i < 1:
            raise IndexError(i)
        if i <= len(self._prefix):
            return self._prefix[i - 1]
        if self.tail is None:
            return None
        with self._lock:
            if i not in self._cache:
                self._cache[i] = self.tail.generator(i)
            return self._cache[i]

    # -- tail handling -------------------------------------------------------

    def tail_hull(self, i0: int) -> tuple:
        """Interval containing every tail domain with index ``> i0``."""
        nxt = self.branch(i0 + 1)
        if self.tail.limit == 0:
            return (0, nxt.b)
        if self.tail.limit == 1:
            return (nxt.a, 1)
        raise MapError("tail has no accumulation point")

    def tail_index(self, x) -> int:
        """Index of the tail branch containing ``x``, corrected from ``tail.locate``."""
        guess = int(self.tail.locate(x))
        for d in (0, -1, 1, -2, 2, -3, 3):
            j = guess + d
            if j >= self.tail.start:
                br = self.branch(j)
                if br is not None and br.contains(x):
                    return j
        raise PointInTailGap(f"no tail branch contains {x}")

    def tail_plan(self, cuts: Sequence | None = None, tail_tol: float = 1e-8,
                  by: str = "slope", max_branches: int = DEFAULT_MAX_BRANCHES) -> TailPlan:
        """Decide which branches to handle explicitly for a computation.

        With a closable tail and a sorted cut set containing 0 and 1, only the
        tail branches straddling a cut are materialized; the others are grouped
        into index ranges lying inside a single cell and summed exactly.
        Otherwise tail branches are materialized until ``slope_sum`` (or
        ``length`` when ``by == "length"``) drops to ``tail_tol``.
        """
        explicit = list(enumerate(self._prefix, 1))
        tail = self.tail
        if tail is None:
            return TailPlan(tuple(explicit), (), 0, 0)
        start = tail.start
        if tail.closable and tail.locate is not None and cuts is not None:
            lo_h, hi_h = self.tail_hull(start - 1)
            idx = sorted({self.tail_index(c) for c in cuts if lo_h < c < hi_h})
            if len(idx) > max_branches:
                raise TruncationOverflow(f"{len(idx)} straddling tail branches exceed the cap")
            explicit.extend((i, self.branch(i)) for i in idx)
            groups = []
            prev = start - 1
            for nxt in idx + [None]:
                first = prev + 1
                last = None if nxt is None else nxt - 1
                if last is None or first <= last:
                    rep = self.branch(first)
                    cell = cell_of(cuts, (rep.a + rep.b) / 2)
                    s_hi = 0 if last is None else tail.slope_sum(last)
                    l_hi = 0 if last is None else tail.length(last)
                    groups.append(TailGroup(first, last, cell,
                                            tail.slope_sum(first - 1) - s_hi,
                                            tail.length(first - 1) - l_hi))
                if nxt is not None:
                    prev = nxt
            return TailPlan(tuple(explicit), tuple(groups), 0, 0)
        measure = tail.slope_sum if by == "slope" else tail.length
        i0 = start - 1
        if measure(i0 + max_branches) > tail_tol:
            raise TruncationOverflow(
                f"truncation-overflow: more than {max_branches} tail branches needed "
                f"for tail_tol={tail_tol}")
        while measure(i0) > tail_tol:
            if i0 - start + 1 >= max_branches:
                raise TruncationOverflow(
                    f"truncation-overflow: more than {max_branches} tail branches needed "
                    f"for tail_tol={tail_tol}")
            br = self.branch(i0 + 1)
            if br is None:
                break
            explicit.append((i0 + 1, br))
            i0 += 1
        return TailPlan(tuple(explicit), (), tail.slope_sum(i0), tail.length(i0))

    # -- evaluation ----------------------------------------------------------

    def locate(self, x, max_branches: int = DEFAULT_MAX_BRANCHES) -> tuple:
        """``(index, branch)`` whose half-open domain contains ``x``."""
        k = bisect.bisect_right(self._lefts, x) - 1
        if k >= 0:
            i = self._order[k]
            if self._prefix[i].contains(x):
                return i + 1, self._prefix[i]
        if x == 1:
            for i, br in enumerate(self._prefix, 1):
                if br.b == 1:
                    return i, br
        if self.tail is not None:
            if self.tail.locate is not None:
                if x == self.tail.limit:
                    raise PointInTailGap(f"{x} is the accumulation point of the branches")
                j = self.tail_index(x)
                return j, self.branch(j)
            for j in range(self.tail.start, self.tail.start + max_branches):
                br = self.branch(j)
                if br is None:
                    break
                if br.contains(x):
                    return j, br
        raise PointInTailGap(f"point-in-tail-gap: no materialized branch contains {x}")

    def __call__(self, x):
        return self.locate(x)[1].forward(x)

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Vectorized ``tau`` on float arrays.

        Points at the accumulation point of the tail are mapped to it; points
        in a gap of the partition raise :class:`PointInTailGap`.
        """
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, np.nan)
        lefts = np.array([float(v) for v in self._lefts])
        k = np.searchsorted(lefts, x, side="right") - 1
        done = np.zeros(x.shape, dtype=bool)
        for pos, i in enumerate(self._order):
            br = self._prefix[i]
            m = (k == pos) & (x < float(br.b))
            if float(br.b) == 1.0:
                m |= (k == pos) & (x == 1.0)
            if m.any():
                out[m] = br.forward(x[m])
                done |= m
        rest = ~done
        if rest.any() and self.tail is not None:
            tail = self.tail
            xs = x[rest]
            vals = np.full(xs.shape, np.nan)
            at_limit = xs == tail.limit
            vals[at_limit] = tail.limit
            live = ~at_limit
            if live.any():
                if tail.locate is None or tail.params is None:
                    vals[live] = [self(v) for v in xs[live]]
                else:
                    xl = xs[live]
                    step = 1 if tail.limit == 1 else -1
                    idx = np.asarray(tail.locate(xl), dtype=float)
                    idx = np.clip(idx, tail.start, 2.0 ** 52)
                    for _ in range(3):
                        a, b, _, _ = tail.params(idx)
                        idx = np.where(xl < a, idx - step, idx)
                        idx = np.where(xl >= b, idx + step, idx)
                        idx = np.clip(idx, tail.start, 2.0 ** 52)
                    _, _, s, c = tail.params(idx)
                    vals[live] = s * xl + c
            out[rest] = vals
        if np.isnan(out).any():
            bad = x[np.isnan(out)][0]
            raise PointInTailGap(f"point-in-tail-gap: no branch contains {bad}")
        return out

    def stepper(self) -> Callable[[float], float]:
        """Fast scalar ``tau`` on floats for long orbits."""
        lefts = [float(v) for v in self._lefts]
        rights = [float(self._prefix[i].b) for i in self._order]
        fwd = []
        for i in self._order:
            br = self._prefix[i]
            if br.is_affine:
                s, c = float(br.slope), float(br.intercept)
                fwd.append((s, c, None))
            else:
                fwd.append((0.0, 0.0, br.forward))
        tail = self.tail
        has_last = any(r == 1.0 for r in rights)

        def step(x: float) -> float:
            k = bisect.bisect_right(lefts, x) - 1
            if k >= 0 and (x < rights[k] or (x == 1.0 and rights[k] == 1.0)):
                s, c, f = fwd[k]
                return s * x + c if f is None else float(f(x))
            if x == 1.0 and has_last:
                s, c, f = fwd[-1]
                return s * x + c if f is None else float(f(x))
            if tail is not None:
                if x == tail.limit:
                    return x
                if tail.evaluate is not None:
                    return tail.evaluate(x)
            return float(self(x))

        return step


# -- operations ---------------------------------------------------------------


def apply(tau: PiecewiseMap, x) -> tuple:
    """Evaluate ``tau`` at ``x``: returns ``(value, slope, branch_index)``.

    Branches own ``[a_i, b_i)``; ``x = 1`` belongs to the branch ending at 1.
    """
    i, br = tau.locate(x)
    return br.forward(x), br.derivative(x), i


def preimages(tau: PiecewiseMap, y, tail_tol: float = 1e-8,
              max_branches: int = DEFAULT_MAX_BRANCHES) -> list:
    """All ``(x, i)`` with ``tau_i(x) = y``, ordered by branch index."""
    plan = tau.tail_plan(None, tail_tol, "slope", max_branches)
    out = [(br.inverse(y), i) for i, br in plan.explicit if br.covers(y)]
    return sorted(out, key=lambda t: t[1])


@dataclass
class ClassReport:
    """Outcome of :func:`validate`.

    ``alpha`` is the contraction factor at 0 (or below the cutoff ``r`` when
    the branches accumulate at 0), ``beta`` the supremum of ``1/tau'`` and
    ``slope_sum`` the sum of reciprocal left-endpoint slopes with tail bound.
    """

    in_T: bool
    in_TE: bool
    alpha: float
    r: Number | None
    beta: float
    slope_sum: float
    violations: list = field(default_factory=list)
    accumulates_at_zero: bool = False
    finite: bool = True
    branches_checked: int = 0
    r_target_met: bool = True


def check_branch(br: Branch, grid: int = 64) -> list:
    """Sampled shape checks of one branch; returns failure messages."""
    problems = []
    a, b = float(br.a), float(br.b)
    xs = a + (b - a) * np.linspace(0.0, 1.0, grid)
    xs[-1] = np.nextafter(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        fx = np.asarray(br.forward(xs), dtype=float)
        dx = np.asarray(br.derivative(xs), dtype=float)
    if not np.all(np.diff(fx) > 0):
        problems.append("not strictly increasing")
    if np.any(dx < 0) or np.any(np.diff(dx) < -1e-12 * np.maximum(1.0, np.abs(dx[:-1]))):
        problems.append("derivative not non-decreasing (not convex)")
    if abs(float(br.image_left)) > 1e-10:
        problems.append(f"does not vanish at its left endpoint (value {float(br.image_left):.3g})")
    if fx.min() < -1e-12 or float(br.image_right) > 1 + 1e-12:
        problems.append("image leaves [0, 1]")
    ys = np.linspace(float(br.image_left), float(br.image_right), grid)[:-1]
    try:
        back = np.asarray(br.forward(np.asarray(br.inverse(ys), dtype=float)), dtype=float)
        if np.max(np.abs(back - ys)) > 1e-12 * max(1.0, float(br.left_slope)):
            problems.append("inverse is not a right inverse on the image")
    except MapError as exc:
        problems.append(str(exc))
    return problems


def _recip(s) -> Number:
    if s == 0:
        return math.inf
    return 1 / s


def contraction_at_zero(tau: PiecewiseMap, tail_tol: float = 1e-8,
                        max_branches: int = 4096) -> tuple:
    """``(alpha, r, target_met)`` for condition on expansion near 0.

    Without accumulation at 0, ``alpha = 1/tau'(0)`` and ``r`` is None.
    Otherwise ``r`` is the largest materialized partition endpoint whose
    left tail sum of ``1/tau_i'(a_i)`` is at most 1/2; when no endpoint
    reaches 1/2 the smallest attainable sum is used.
    """
    if not tau.accumulates_at_zero:
        zero = [br for br in tau.branches if br.a == 0]
        if not zero:
            return math.inf, None, False
        return _recip(zero[0].left_slope), None, True
    tail = tau.tail
    i0 = tail.start - 1
    explicit = list(tau.branches)
    best = None
    while True:
        hull_hi = tau.tail_hull(i0)[1]
        ends = sorted({br.a for br in explicit} | {br.b for br in explicit} | {hull_hi},
                      reverse=True)
        cands = []
        for r in ends:
            if r < hull_hi:
                continue
            s = sum(_recip(br.left_slope) for br in explicit if br.a < r) + tail.slope_sum(i0)
            cands.append((r, s))
        hit = [(r, s) for r, s in cands if s <= Fraction(1, 2) + 1e-12]
        if hit:
            r, s = max(hit, key=lambda t: t[0])
            return s, r, True
        low = min(cands, key=lambda t: t[1])
        if best is None or low[1] < best[1]:
            best = low
        if i0 - tail.start + 1 >= max_branches:
            break
        nxt = tau.branch(i0 + 1)
        if nxt is None:
            break
        explicit.append(nxt)
        i0 += 1
    return best[1], best[0], False


def validate(tau: PiecewiseMap, grid: int = 64, tail_tol: float = 1e-8,
             check_tail: int = 32) -> ClassReport:
    """Check class membership of ``tau`` on sampled branches.

    Every stored branch plus the first ``check_tail`` tail branches is sampled
    on ``grid`` points.  Violations are reported with short codes:
    ``branch-shape`` (monotone/convex/vanishing at the left end),
    ``partition`` (coverage of [0, 1]), ``summability`` (reciprocal slope
    sum), ``expansion-at-zero``.
    """
    if grid < 2:
        raise ValueError("grid must be at least 2")
    violations = []
    checked = list(enumerate(tau.branches, 1))
    if tau.tail is not None:
        for i in range(tau.tail.start, tau.tail.start + check_tail):
            br = tau.branch(i)
            if br is None:
                break
            checked.append((i, br))
    spans = sorted((br.a, br.b, i) for i, br in checked)
    for (a1, b1, i1), (a2, b2, i2) in zip(spans, spans[1:]):
        if b1 > a2:
            raise MalformedBranch(f"malformed-branch: branches {i1} and {i2} overlap")
    for i, br in checked:
        for p in check_branch(br, grid):
            violations.append(f"branch-shape: branch {i} {p}")

    covered = sum(br.b - br.a for br in tau.branches)
    i_last = len(tau.branches)
    if tau.tail is not None:
        covered += tau.tail.length(i_last)
    if abs(float(covered) - 1.0) > 1e-12:
        violations.append(f"partition: branches cover {float(covered):.15g} of [0, 1]")
    if not tau.accumulates_at_zero and sum(1 for br in tau.branches if br.a == 0) != 1:
        violations.append("partition: exactly one branch must start at 0")

    recips = [_recip(br.left_slope) for br in tau.branches]
    slope_sum = sum(recips) + (tau.tail.slope_sum(i_last) if tau.tail is not None else 0)
    if not math.isfinite(float(slope_sum)):
        violations.append("summability: reciprocal left-endpoint slopes do not sum "
                          "(some tau_i'(a_i) = 0)")

    alpha, r, met = contraction_at_zero(tau, tail_tol)
    if not float(alpha) < 1:
        violations.append(f"expansion-at-zero: alpha = {float(alpha):.6g} is not below 1"
                          + (" (tau'(0) = 0)" if alpha == math.inf else ""))

    tail_recip = float(tau.tail.slope_sum(i_last)) if tau.tail is not None else 0.0
    beta = max([float(v) for v in recips] + [tail_recip])
    in_T = not violations
    return ClassReport(
        in_T=in_T,
        in_TE=in_T and beta < 1,
        alpha=alpha,
        r=r,
        beta=beta,
        slope_sum=slope_sum,
        violations=violations,
        accumulates_at_zero=tau.accumulates_at_zero,
        finite=tau.is_finite,
        branches_checked=len(checked),
        r_target_met=met,
    )


@dataclass
class IteratePartition:
    """Cells of the partition of ``tau^n`` with their composed branches."""

    n: int
    cells: list
    mesh: Number
    min_slope: float
    truncation_error: Number


def _pull_back(base: list, cells: list) -> list:
    """Cells of ``tau^{n+1}`` from the cells of ``tau^n`` and the base branches."""
    lefts = [c[0] for c in cells]
    out = []
    for _, br in base:
        top = br.image_right
        k = max(bisect.bisect_right(lefts, br.image_left) - 1, 0)
        while k < len(cells) and cells[k][0] < top:
            lo, hi, comp = cells[k]
            k += 1
            y_lo = max(lo, br.image_left)
            y_hi = min(hi, top)
            if not y_lo < y_hi:
                continue
            x_lo = br.inverse(y_lo)
            x_hi = br.b if y_hi == top else br.inverse(y_hi)
            if x_lo < x_hi:
                out.append((x_lo, x_hi, br.then(comp, x_lo, x_hi)))
    out.sort(key=lambda c: c[0])
    return out


def _left_slope(comp: Branch) -> float:
    return float(comp.left_slope)


def iterate_partitions(tau: PiecewiseMap, n_max: int, tail_tol: float = 1e-8,
                       max_cells: int = DEFAULT_MAX_CELLS, max_base: int = DEFAULT_MAX_BASE):
    """Yield :class:`IteratePartition` for orders ``1..n_max``.

    Base branches are materialized until the remaining domain length is at
    most ``tail_tol``.  ``min_slope`` includes a lower bound for the dropped
    cells so it never overstates the infimum; ``mesh`` is an upper bound
    (the truncated length counts as a possible cell).  More than ``max_base``
    tail branches, or more than ``max_cells`` cells, raise
    :class:`TruncationOverflow`.
    """
    plan = tau.tail_plan(None, tail_tol, "length", max_base)
    base = list(plan.explicit)
    base_min = min(_left_slope(br) for _, br in base)
    tail_slope = plan.truncated_slope
    dropped1 = math.inf if plan.truncated_length == 0 else (
        math.inf if tail_slope == 0 else 1 / float(tail_slope))
    cells = sorted(((br.a, br.b, br) for _, br in base), key=lambda c: c[0])
    slope_all1 = min(base_min, dropped1)
    dropped = dropped1
    for n in range(1, n_max + 1):
        if n > 1:
            cells = _pull_back(base, cells)
            if len(cells) > max_cells:
                raise TruncationOverflow(
                    f"truncation-overflow: {len(cells)} cells at order {n} exceed {max_cells}")
        covered = sum(c[1] - c[0] for c in cells)
        trunc = 1 - covered
        if trunc < 0 and not is_exact(trunc):
            trunc = 0.0
        mat_min = min(_left_slope(c[2]) for c in cells)
        if n > 1:
            dropped = min(dropped1 * prev_min, slope_all1 * dropped) if trunc != 0 else math.inf
        min_slope = min(mat_min, dropped)
        mesh = max(max(c[1] - c[0] for c in cells), trunc)
        yield IteratePartition(n, list(cells), mesh, min_slope, trunc)
        prev_min = min_slope


def iterate_partition(tau: PiecewiseMap, n: int, tail_tol: float = 1e-8,
                      max_cells: int = DEFAULT_MAX_CELLS,
                      max_base: int = DEFAULT_MAX_BASE) -> IteratePartition:
    """Partition of ``tau^n`` built by pulling back the order ``n-1`` cells."""
    if n < 1:
        raise ValueError("order must be at least 1")
    for part in iterate_partitions(tau, n, tail_tol, max_cells, max_base):
        pass
    return part


def mesh_decay(tau: PiecewiseMap, n_max: int, tail_tol: float = 1e-8,
               max_cells: int = DEFAULT_MAX_CELLS, max_base: int = DEFAULT_MAX_BASE) -> list:
    """Mesh of the iterate partitions for orders ``1..n_max``."""
    return [p.mesh for p in iterate_partitions(tau, n_max, tail_tol, max_cells, max_base)]


def min_slope_certificate(tau: PiecewiseMap, target: float = 2.0, n_cap: int = 20,
                          tail_tol: float = 1e-8, max_cells: int = DEFAULT_MAX_CELLS,
                          max_base: int = DEFAULT_MAX_BASE) -> tuple:
    """Smallest ``n0 <= n_cap`` with ``inf (tau^n0)' >= target``.

    The slope bound for dropped tail cells is valid at any truncation depth,
    so when ``tail_tol`` would need more than ``max_base`` tail branches the
    depth is coarsened by factors of 10 (up to 0.1) instead of failing.
    Raises :class:`NotReached` carrying the best order and slope otherwise.
    """
    best = (0, 0.0)
    tol = tail_tol
    while True:
        try:
            for part in iterate_partitions(tau, n_cap, tol, max_cells, max_base):
                if part.min_slope >= target:
                    return part.n, part.min_slope
                if part.min_slope > best[1]:
                    best = (part.n, part.min_slope)
        except TruncationOverflow as exc:
            if best[0] == 0 and tol < 0.1:
                tol *= 10
                continue
            raise NotReached(f"not-reached: {exc}", *best) from exc
        raise NotReached(f"not-reached: no order up to {n_cap} has slope >= {target}", *best)


@dataclass
class ReturnBranch:
    lo: Number
    hi: Number
    time: int
    branch: Branch


@dataclass
class FirstReturnMap:
    """Induced map on ``[eps, 1]``.

    ``pieces`` are in the original coordinates; ``map`` is the same map
    rescaled affinely to ``[0, 1]``.  ``captured`` is the fraction of
    ``[eps, 1]`` that returns within ``max_return_time`` steps.
    """

    eps: Number
    pieces: list
    captured: Number
    unreturned: Number
    map: PiecewiseMap

    def __call__(self, x):
        for p in self.pieces:
            if p.lo <= x < p.hi or (x == p.hi == 1):
                return p.branch.forward(x)
        raise PointInTailGap(f"{x} does not return within the computed horizon")

    def return_time(self, x) -> int:
        for p in self.pieces:
            if p.lo <= x < p.hi or (x == p.hi == 1):
                return p.time
        raise PointInTailGap(f"{x} does not return within the computed horizon")


def _rescaled(br: Branch, eps: Number, lo: Number, hi: Number) -> Branch:
    w = 1 - eps
    u_lo, u_hi = (lo - eps) / w, (hi - eps) / w
    if br.is_affine:
        return Branch.affine(u_lo, u_hi, br.slope, (br.slope * eps + br.intercept - eps) / w)
    f, d, inv = br.forward, br.derivative, br.inverse
    return Branch(
        u_lo, u_hi,
        lambda u: (f(eps + u * w) - eps) / w,
        lambda u: d(eps + u * w),
        lambda v: (inv(eps + v * w) - eps) / w,
    )


def first_return_map(tau: PiecewiseMap, eps: Number, max_return_time: int = 64,
                     tail_tol: float = 1e-8, max_pieces: int = 1 << 18) -> FirstReturnMap:
    """First-return map of ``tau`` to ``[eps, 1]``.

    Points of ``[eps, 1]`` are followed branch by branch; a piece is emitted
    with return time ``k`` once ``tau^k`` brings it back into ``[eps, 1]``.
    Raises :class:`NoReturnFound` when the returned fraction stays below
    ``1 - tail_tol`` after ``max_return_time`` steps.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie strictly inside (0, 1)")
    base = list(tau.tail_plan(None, tail_tol * (1 - eps), "length").explicit)
    base.sort(key=lambda t: t[1].a)
    lefts = [br.a for _, br in base]

    def split(lo, hi):
        k = max(bisect.bisect_right(lefts, lo) - 1, 0)
        while k < len(base) and base[k][1].a < hi:
            br = base[k][1]
            k += 1
            s, e = max(lo, br.a), min(hi, br.b)
            if s < e:
                yield s, e, br

    frontier = [(s, e, br.restrict(s, e)) for s, e, br in split(eps, 1)]
    pieces = []
    width = 1 - eps
    for k in range(1, max_return_time + 1):
        nxt = []
        for lo, hi, comp in frontier:
            y_lo, y_hi = comp.forward(lo), comp.image_right
            if y_hi > eps:
                x0 = lo if y_lo >= eps else comp.inverse(eps)
                if x0 < hi:
                    pieces.append(ReturnBranch(x0, hi, k, comp.restrict(x0, hi)))
            if y_lo < eps:
                x1 = hi if y_hi <= eps else comp.inverse(eps)
                for s, e, br in split(y_lo, min(y_hi, eps)):
                    p_lo = lo if s == y_lo else comp.inverse(s)
                    p_hi = x1 if e == min(y_hi, eps) else comp.inverse(e)
                    if p_lo < p_hi:
                        nxt.append((p_lo, p_hi, comp.then(br, p_lo, p_hi)))
        frontier = nxt
        if len(frontier) > max_pieces:
            raise TruncationOverflow(f"{len(frontier)} unreturned pieces at time {k}")
        unreturned = sum((hi - lo for lo, hi, _ in frontier), 0) / width
        if unreturned <= tail_tol or not frontier:
            break
    captured = sum((p.hi - p.lo for p in pieces), 0) / width
    unreturned = 1 - captured
    if float(unreturned) > tail_tol:
        raise NoReturnFound(
            f"no-return-found: only {float(captured):.6g} of [eps, 1] returns within "
            f"{max_return_time} steps")
    pieces.sort(key=lambda p: (p.time, p.lo))
    scaled = [_rescaled(p.branch, eps, p.lo, p.hi) for p in pieces]
    tail = None
    if unreturned > 0:
        per_time = {}
        for p, br in zip(pieces, scaled):
            per_time[p.time] = per_time.get(p.time, 0.0) + float(_recip(br.left_slope))
        last = sorted(per_time)[-2:]
        rest = 0.0
        if len(last) == 2 and per_time[last[0]] > 0:
            ratio = per_time[last[1]] / per_time[last[0]]
            rest = per_time[last[1]] * ratio / (1 - ratio) if ratio < 1 else math.inf
        n = len(scaled)
        tail = TailDescriptor(
            start=n + 1,
            generator=lambda i: None,
            slope_sum=lambda i0, rest=rest, n=n: rest + sum(
                float(_recip(b.left_slope)) for b in scaled[i0:]) if i0 < n else rest,
            length=lambda i0, u=unreturned, n=n: u + sum(
                (b.b - b.a for b in scaled[i0:]), 0) if i0 < n else u,
        )
    return FirstReturnMap(eps, pieces, captured, unreturned,
                          PiecewiseMap(scaled, tail, name=f"first_return({tau.name}, eps={eps})"))


# -- built-in maps ------------------------------------------------------------

_PREFIX = 4


def _affine_full(a: Fraction, b: Fraction) -> Branch:
    slope = 1 / (b - a)
    return Branch.affine(a, b, slope, -a * slope)


def _shifted_eval(x: float) -> float:
    # (i+1)(1 - i u) with u = 1 - x exact; avoids the i**2 cancellation
    u = 1.0 - x
    i = math.floor(1.0 / u)
    return min(max((i + 1) * (1.0 - i * u), 0.0), 1.0)


def _harmonic_eval(x: float) -> float:
    i = math.floor(1.0 / x)
    if i * x >= 1.0:
        i -= 1
    return min(max(i * ((i + 1) * x - 1.0), 0.0), 1.0)


def shifted_linear(prefix: int = _PREFIX) -> PiecewiseMap:
    """Full affine branches on ``((i-1)/i, i/(i+1))``; slope ``i(i+1)``."""

    def gen(i: int) -> Branch:
        return _affine_full(Fraction(i - 1, i), Fraction(i, i + 1))

    def locate(x):
        with np.errstate(divide="ignore"):
            return np.floor(1.0 / (1.0 - np.asarray(x, dtype=float)))

    def params(i):
        i = np.asarray(i, dtype=float)
        a = (i - 1) / i
        return a, i / (i + 1), i * (i + 1), -(i - 1) * (i + 1)

    tail = TailDescriptor(
        start=prefix + 1,
        generator=gen,
        slope_sum=lambda i0: Fraction(1, i0 + 1),
        length=lambda i0: Fraction(1, i0 + 1),
        limit=1,
        locate=lambda x: locate(x) if np.ndim(x) else int(min(locate(x), 2 ** 62)),
        params=params,
        d_sum=lambda i0: (Fraction(1, i0) + Fraction(1, i0 + 1)) / 2,
        affine=True,
        closable=True,
        evaluate=_shifted_eval,
    )
    return PiecewiseMap([gen(i) for i in range(1, prefix + 1)], tail, name="shifted_linear")


def harmonic(prefix: int = _PREFIX) -> PiecewiseMap:
    """Full affine branches on ``(1/(i+1), 1/i)``; partition accumulates at 0."""

    def gen(i: int) -> Branch:
        return _affine_full(Fraction(1, i + 1), Fraction(1, i))

    def locate(x):
        with np.errstate(divide="ignore"):
            return np.floor(1.0 / np.asarray(x, dtype=float))

    def params(i):
        i = np.asarray(i, dtype=float)
        return 1 / (i + 1), 1 / i, i * (i + 1), -i

    tail = TailDescriptor(
        start=prefix + 1,
        generator=gen,
        slope_sum=lambda i0: Fraction(1, i0 + 1),
        length=lambda i0: Fraction(1, i0 + 1),
        limit=0,
        locate=lambda x: locate(x) if np.ndim(x) else int(min(locate(x), 2 ** 62)),
        params=params,
        affine=True,
        closable=True,
        evaluate=_harmonic_eval,
    )
    return PiecewiseMap([gen(i) for i in range(1, prefix + 1)], tail, name="harmonic")


def three_branch() -> PiecewiseMap:
    """``2x``, ``2x - 1/2``, ``2x - 1`` on ``[0,1/4)``, ``[1/4,1/2)``, ``[1/2,1]``."""
    q = Fraction
    return PiecewiseMap([
        Branch.affine(0, q(1, 4), 2, 0),
        Branch.affine(q(1, 4), q(1, 2), 2, q(-1, 2)),
        Branch.affine(q(1, 2), 1, 2, -1),
    ], name="three_branch")


def doubling() -> PiecewiseMap:
    return PiecewiseMap([
        Branch.affine(0, Fraction(1, 2), 2, 0),
        Branch.affine(Fraction(1, 2), 1, 2, -1),
    ], name="doubling")


def linear(branches: Sequence[dict], name: str = "linear") -> PiecewiseMap:
    """Finite map from ``{"a", "b", "slope", "intercept"}`` (or power-form) records."""
    out = []
    for rec in branches:
        a, b = _num(rec["a"]), _num(rec["b"])
        if "power" in rec:
            p = float(rec["power"])
            c = float(rec.get("scale", 1.0))
            out.append(_power_branch(a, b, p, c))
        else:
            out.append(Branch.affine(a, b, _num(rec["slope"]), _num(rec["intercept"])))
    return PiecewiseMap(out, name=name)


def _power_branch(a: Number, b: Number, p: float, c: float) -> Branch:
    af = float(a)
    return Branch.analytic(
        a, b,
        lambda x: c * (np.asarray(x, dtype=float) - af) ** p if np.ndim(x) else c * (x - af) ** p,
        lambda x: c * p * (np.asarray(x, dtype=float) - af) ** (p - 1) if np.ndim(x)
        else c * p * (x - af) ** (p - 1),
        lambda y: af + (np.asarray(y, dtype=float) / c) ** (1 / p) if np.ndim(y)
        else af + (y / c) ** (1 / p),
    )


def _num(v) -> Number:
    """JSON numbers stay floats; strings like ``"1/3"`` become exact fractions."""
    if isinstance(v, str):
        return Fraction(v)
    if isinstance(v, int):
        return v
    return float(v)


BUILTINS = ("shifted_linear", "harmonic", "three_branch", "doubling", "conjugated_exp")


def builtin(name: str, **params) -> PiecewiseMap:
    """Named example map; ``conjugated_exp`` takes the branch count ``k`` (default 5)."""
    if name == "shifted_linear":
        return shifted_linear()
    if name == "harmonic":
        return harmonic()
    if name == "three_branch":
        return three_branch()
    if name == "doubling":
        return doubling()
    if name == "conjugated_exp":
        from .sampler import conjugated_map, exponential_target

        return conjugated_map(exponential_target(), int(params.get("k", 5)))
    raise UnknownMap(f"unknown-name: {name!r}")


_BRANCH_SCHEMA = {
    "type": "object",
    "properties": {
        "a": {"type": ["number", "string"]},
        "b": {"type": ["number", "string"]},
        "slope": {"type": ["number", "string"]},
        "intercept": {"type": ["number", "string"]},
        "power": {"type": "number"},
        "scale": {"type": "number"},
    },
    "required": ["a", "b"],
    "additionalProperties": False,
}

MAP_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["linear", *BUILTINS, "first_return"]},
        "branches": {"type": "array", "items": _BRANCH_SCHEMA, "minItems": 1},
        "k": {"type": "integer", "minimum": 2},
        "base": {"$ref": "#"},
        "eps": {"type": ["number", "string"]},
        "max_return_time": {"type": "integer", "minimum": 1},
        "tail_tol": {"type": "number", "exclusiveMinimum": 0},
        "name": {"type": "string"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}


def map_from_config(cfg: dict) -> PiecewiseMap:
    """Build a map from a configuration dictionary (see ``MAP_SCHEMA``)."""
    import jsonschema

    try:
        jsonschema.validate(cfg, MAP_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise MapError(f"invalid map configuration: {exc.message}") from exc
    kind = cfg["kind"]
    if kind == "linear":
        if "branches" not in cfg:
            raise MapError("a linear map needs 'branches'")
        for rec in cfg["branches"]:
            if "power" not in rec and not {"slope", "intercept"} <= rec.keys():
                raise MapError("each branch needs slope and intercept, or power")
        return linear(cfg["branches"], name=cfg.get("name", "linear"))
    if kind == "first_return":
        if "base" not in cfg or "eps" not in cfg:
            raise MapError("a first_return map needs 'base' and 'eps'")
        fr = first_return_map(map_from_config(cfg["base"]), _num(cfg["eps"]),
                              cfg.get("max_return_time", 64), cfg.get("tail_tol", 1e-8))
        return fr.map
    if kind == "conjugated_exp":
        return builtin(kind, k=cfg.get("k", 5))
    return builtin(kind)


def load_map(source: str | Path) -> PiecewiseMap:
    """Built-in name, or a path to a JSON configuration file."""
    if str(source) in BUILTINS:
        return builtin(str(source))
    with open(source, encoding="utf-8") as fh:
        return map_from_config(json.load(fh))
