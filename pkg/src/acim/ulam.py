"""Ulam discretization of the transfer operator on uniform bins.

Entry ``(j, k)`` is ``m(B_j ∩ tau^{-1} B_k) / m(B_j)``.  Each branch domain
is cut at the bin edges and at the preimages of the bin edges; every
elementary piece then lies in one row bin and maps into one column bin.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from .maps import DEFAULT_MAX_BRANCHES, MapError, NotReached, PiecewiseMap, min_slope_certificate
from .transfer import StepDensity, StepFunction, fp_step

FLOOR = 1e-14


class InverseFailure(MapError):
    pass


class NoConvergence(RuntimeWarning):
    pass


class ExpansionNotCertified(UserWarning):
    pass


@dataclass
class UlamMatrix:
    n_bins: int
    matrix: sp.csr_matrix
    row_defect: np.ndarray
    tail_tol: float = 0.0

    @property
    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def push(self, mass: np.ndarray) -> np.ndarray:
        """One step on a row vector of bin masses: ``mass @ M``."""
        return self.matrix.T @ mass


def _branch_pieces(br, n: int, edges: np.ndarray):
    """Rows, columns and lengths of the elementary pieces of one branch."""
    a, b = float(br.a), float(br.b)
    lo_img, hi_img = float(br.image_left), float(br.image_right)
    inner = edges[(edges > a) & (edges < b)]
    ys = edges[(edges > lo_img) & (edges < hi_img)]
    if ys.size:
        if br.is_affine:
            pre = a + (ys - lo_img) / float(br.slope)
        else:
            pre = np.atleast_1d(np.asarray(br.inverse(ys), dtype=float))
        if not np.all(np.isfinite(pre)):
            raise InverseFailure(f"inverse-failure on branch [{a}, {b})")
        pre = pre[(pre > a) & (pre < b)]
    else:
        pre = np.empty(0)
    cuts = np.unique(np.concatenate([[a, b], inner, pre]))
    length = np.diff(cuts)
    keep = length > 0
    mid = 0.5 * (cuts[:-1] + cuts[1:])[keep]
    length = length[keep]
    if br.is_affine:
        img = lo_img + float(br.slope) * (mid - a)
    else:
        img = np.asarray(br.forward(mid), dtype=float)
    rows = np.clip(np.floor(mid * n).astype(np.int64), 0, n - 1)
    cols = np.clip(np.floor(img * n).astype(np.int64), 0, n - 1)
    return rows, cols, length * n


def build_ulam(tau: PiecewiseMap, n_bins: int, tail_tol: float = 1e-8,
               max_branches: int = DEFAULT_MAX_BRANCHES) -> UlamMatrix:
    """Ulam matrix of ``tau`` on ``n_bins`` uniform bins.

    Closable tails are summed exactly (each tail group inside one bin spreads
    its length uniformly over all columns).  Other tails are cut once the
    remaining domain length is at most ``tail_tol / n_bins``; the lost mass
    shows up as ``row_defect`` and is not renormalized.
    """
    n = int(n_bins)
    if n < 2:
        raise ValueError("need at least 2 bins")
    edges = np.linspace(0.0, 1.0, n + 1)
    cuts = [Fraction(j, n) for j in range(n + 1)] if tau.tail is not None and tau.tail.closable else None
    plan = tau.tail_plan(cuts, tail_tol / n, "length", max_branches)
    R, C, V = [], [], []
    for _, br in plan.explicit:
        r, c, v = _branch_pieces(br, n, edges)
        R.append(r)
        C.append(c)
        V.append(v)
    for g in plan.groups:
        R.append(np.full(n, g.cell, dtype=np.int64))
        C.append(np.arange(n, dtype=np.int64))
        V.append(np.full(n, float(g.length)))
    M = sp.coo_matrix((np.concatenate(V), (np.concatenate(R), np.concatenate(C))),
                      shape=(n, n)).tocsr()
    M.sum_duplicates()
    rowsum = np.asarray(M.sum(axis=1)).ravel()
    defect = np.maximum(0.0, 1.0 - rowsum)
    return UlamMatrix(n, M, defect, tail_tol)


@dataclass
class SpectralReport:
    density: StepDensity
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool
    lambda2_abs: float | None = None
    q_fit: float | None = None
    H_fit: float | None = None


def invariant_density(M: UlamMatrix, tol: float = 1e-12, max_iter: int = 100_000) -> SpectralReport:
    """Left fixed vector of ``M`` by power iteration from the uniform vector.

    The vector is renormalized to a probability each step; ``residual`` is
    ``||p M - p||_1``.  If ``tol`` is not reached a :class:`NoConvergence`
    warning is issued and the last iterate is returned.
    """
    n = M.n_bins
    MT = M.matrix.T.tocsr()
    p = np.full(n, 1.0 / n)
    res = math.inf
    it = 0
    for it in range(1, int(max_iter) + 1):
        q = MT @ p
        res = float(np.abs(q - p).sum())
        s = q.sum()
        if s <= 0:
            raise MapError("all mass lost: matrix has no invariant vector")
        p = q / s
        if res <= tol:
            break
    converged = res <= tol
    if not converged:
        warnings.warn(f"no-convergence: residual {res:.3g} after {it} iterations", NoConvergence)
    density = StepDensity(np.linspace(0.0, 1.0, n + 1), p * n, check=False)
    return SpectralReport(density, p, it, res, converged)


def second_eigenvalue(M: UlamMatrix, rho: np.ndarray, tol: float = 1e-10,
                      max_iter: int = 20_000, window: int = 64, seed: int = 0) -> float:
    """``|lambda_2|`` by power iteration on the zero-sum subspace.

    Each step re-projects ``u <- u - sum(u) rho`` (``rho`` the invariant
    probability vector).  The rate is the geometric mean of the norm ratios
    over the last ``window`` steps; a collapse to zero returns 0.
    """
    n = M.n_bins
    MT = M.matrix.T.tocsr()
    rho = np.asarray(rho, dtype=float)
    rho = rho / rho.sum()
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    u -= u.sum() * rho
    nrm = np.abs(u).sum()
    if nrm == 0:
        return 0.0
    u /= nrm
    logs = []
    est_prev = None
    for it in range(int(max_iter)):
        u = MT @ u
        u -= u.sum() * rho
        nrm = np.abs(u).sum()
        if nrm <= FLOOR:
            return 0.0
        u /= nrm
        logs.append(math.log(nrm))
        w = min(len(logs), window)
        est = math.exp(sum(logs[-w:]) / w)
        if est_prev is not None and len(logs) >= 2 and abs(est - est_prev) <= tol * max(est, 1e-300):
            if len(logs) >= min(window, 8) or abs(logs[-1] - logs[-2]) <= tol:
                return min(est, 1.0)
        est_prev = est
    return min(est, 1.0)


@dataclass
class GapProbe:
    q_fit: float
    H_fit: float
    norms: np.ndarray
    flagged: bool = False
    collapsed_at: int | None = None


def spectral_gap_probe(M: UlamMatrix, rho: np.ndarray, n_max: int = 60, vectors: int = 8,
                       seed: int = 0) -> GapProbe:
    """Fit ``max_u ||u M^n||_1 ~ H q^n`` over zero-sum test vectors ``u``.

    The fit uses the later half of the range where the norms stay above the
    numerical floor.  If the norms drop to numerical zero far earlier than the
    fitted geometric trend predicts (a nilpotent restriction), ``q_fit = 0``
    and the result is flagged.
    """
    n = M.n_bins
    MT = M.matrix.T.tocsr()
    rho = np.asarray(rho, dtype=float) / np.sum(rho)
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((n, vectors))
    U -= np.outer(rho, U.sum(axis=0))
    U /= np.abs(U).sum(axis=0)
    norms = np.empty(n_max + 1)
    norms[0] = 1.0
    for k in range(1, n_max + 1):
        U = MT @ U
        U -= np.outer(rho, U.sum(axis=0))
        norms[k] = np.abs(U).sum(axis=0).max()
    alive = np.nonzero(norms > FLOOR)[0]
    last = int(alive[-1])
    collapsed = last < n_max
    if last < 2:
        return GapProbe(0.0, 0.0, norms, True, last + 1)
    lo = max(1, last // 2)
    idx = np.arange(lo, last + 1)
    if idx.size < 2:
        idx = np.arange(1, last + 1)
    slope, icpt = np.polyfit(idx, np.log(norms[idx]), 1)
    q, H = float(np.exp(slope)), float(np.exp(icpt))
    if collapsed:
        predicted = H * q ** (last + 1)
        if predicted > 1e3 * FLOOR:
            return GapProbe(0.0, H, norms, True, last + 1)
    return GapProbe(min(q, 1.0), H, norms, False, last + 1 if collapsed else None)


def variation(f: StepFunction):
    """Total variation over the interior breakpoints."""
    return f.variation()


def spectral_report(tau: PiecewiseMap, n_bins: int = 1024, tail_tol: float = 1e-8,
                    tol: float = 1e-12, max_iter: int = 100_000, n_max: int = 60):
    """Ulam matrix, invariant density, ``|lambda_2|`` and the gap fit in one go."""
    M = build_ulam(tau, n_bins, tail_tol)
    rep = invariant_density(M, tol, max_iter)
    rep.lambda2_abs = second_eigenvalue(M, rep.vector)
    probe = spectral_gap_probe(M, rep.vector, n_max)
    rep.q_fit, rep.H_fit = probe.q_fit, probe.H_fit
    return M, rep


# -- Lasota-Yorke probe -------------------------------------------------------------


@dataclass
class LyProbeReport:
    n: int
    B_n_est: float
    C_est: float
    witnesses: list
    certified: bool
    family_size: int = 0
    method: str = "exact-step"


def _family(rng: np.random.Generator, size: int) -> list:
    fam = [StepDensity.constant(1)]
    for m in (2, 3, 4, 8, 16, 32, 64):
        vals = [Fraction(1 - (j % 2)) for j in range(m)]
        fam.append(StepDensity([Fraction(j, m) for j in range(m + 1)], vals))
    for lo, hi in ((0, Fraction(1, 2)), (Fraction(1, 2), 1), (Fraction(1, 4), Fraction(3, 4)),
                   (0, Fraction(1, 64)), (Fraction(63, 64), 1)):
        fam.append(StepDensity.indicator(lo, hi))
    for _ in range(size):
        m = int(rng.integers(1, 65))
        t = np.unique(np.concatenate([[0.0], rng.uniform(0, 1, m - 1), [1.0]]))
        fam.append(StepDensity(t, rng.exponential(1.0, len(t) - 1)))
    return fam


def ly_probe(tau: PiecewiseMap, n: int, family_size: int = 200, tail_tol: float = 1e-8,
             seed: int = 0, n_bins: int = 1024, keep: int = 5) -> LyProbeReport:
    """Smallest ``B_n`` with ``var(P^n f) <= var(f)/2 + B_n ||f||_1`` over a test family.

    The family holds ``family_size`` random step densities plus constants,
    combs and indicators.  ``C_est = 1/2 + B_n_est``.  Affine maps use the
    exact step operator; other maps a ``n_bins`` Ulam matrix.  A warning is
    issued when ``n`` is below the order certified by
    :func:`min_slope_certificate`.
    """
    try:
        n0, _ = min_slope_certificate(tau, 2.0, max(n, 1), tail_tol)
        certified = n0 <= n
    except NotReached:
        certified = False
    if not certified:
        warnings.warn(f"expansion-not-certified: inf (tau^{n})' >= 2 not shown", ExpansionNotCertified)
    rng = np.random.default_rng(seed)
    fam = _family(rng, family_size)
    method = "exact-step"
    M = None
    if not tau.is_affine:
        method = f"ulam-{n_bins}"
        M = build_ulam(tau, n_bins, tail_tol)
    scored = []
    for f in fam:
        if M is None:
            g = f
            for _ in range(n):
                g = fp_step(tau, g, tail_tol)
        else:
            mass = f.on_bins(n_bins).v / n_bins
            for _ in range(n):
                mass = M.push(mass)
            g = StepFunction(np.linspace(0.0, 1.0, n_bins + 1), mass * n_bins, check=False)
        need = (float(g.variation()) - 0.5 * float(f.variation())) / float(f.l1())
        scored.append((need, f, g))
    scored.sort(key=lambda s: -s[0])
    B = max(0.0, scored[0][0])
    wit = [(f, g, need) for need, f, g in scored[:keep]]
    return LyProbeReport(n, B, 0.5 + B, wit, certified, len(fam), method)


# -- export -------------------------------------------------------------------------


def _g17(x) -> str:
    return format(float(x), ".17g")


def write_matrix(M: UlamMatrix, path) -> None:
    coo = M.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {_g17(coo.data[k])}\n")


def write_spectral_summary(rep: SpectralReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda2", "q_fit", "H_fit", "residual", "iterations"])
        w.writerow([_opt(rep.lambda2_abs), _opt(rep.q_fit), _opt(rep.H_fit),
                    _g17(rep.residual), rep.iterations])


def _opt(x) -> str:
    return "" if x is None else _g17(x)
