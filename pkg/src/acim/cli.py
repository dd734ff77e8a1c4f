"""Command-line front end: ``acim <command> --map <name|path> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 map rejected by validation.
Every run writes ``manifest.json`` (sorted keys, no timestamps) next to its
CSV artifacts, so identical arguments give byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .maps import BUILTINS, MapError, PiecewiseMap, PointInTailGap, builtin, first_return_map, load_map, validate

COMMANDS = ("validate", "density", "spectrum", "correlations", "clt", "sample", "ly-check",
            "first-return")
UNVERIFIED = "unverified class membership"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acim", description="Invariant densities and statistics of piecewise convex maps.")
    p.add_argument("--version", action="version", version=f"acim {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--map", required=True, help="built-in name or JSON configuration file")
    p.add_argument("--bins", type=int, default=1024, help="Ulam bins N (default 1024)")
    p.add_argument("--tail-tol", type=float, default=1e-8, help="tail truncation tolerance")
    p.add_argument("--tol", type=float, default=1e-12, help="power-iteration tolerance")
    p.add_argument("--max-iter", type=int, default=100_000, help="power-iteration cap")
    p.add_argument("--n-max", type=int, default=None,
                   help="correlation lags / CLT block length / iterate order / return-time cap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=None, help="branch count for conjugated_exp")
    p.add_argument("--eps", type=str, default=None, help="left cut for first-return (e.g. 0.5 or 1/2)")
    p.add_argument("--count", type=int, default=10_000, help="orbit samples for 'sample'")
    p.add_argument("--samples", type=int, default=10_000, help="ensemble size for 'clt'")
    p.add_argument("--out", type=Path, default=Path("acim-out"), help="output directory")
    p.add_argument("--force", action="store_true", help="skip validation of file-based maps")
    return p


def _check_knobs(a) -> None:
    if not 2 <= a.bins <= 1 << 20:
        raise UsageError("--bins must lie in [2, 2^20]")
    if not 0 < a.tail_tol <= 0.1:
        raise UsageError("--tail-tol must lie in (0, 0.1]")
    if not a.tol > 0:
        raise UsageError("--tol must be positive")
    if a.max_iter < 1:
        raise UsageError("--max-iter must be at least 1")
    if a.n_max is not None and a.n_max < 1:
        raise UsageError("--n-max must be at least 1")
    if a.k is not None and a.k < 2:
        raise UsageError("--k must be at least 2")
    if a.count < 0 or a.samples < 1:
        raise UsageError("--count must be >= 0 and --samples >= 1")
    if a.eps is not None:
        eps = _parse_eps(a.eps)
        if not 0 < eps < 1:
            raise UsageError("--eps must lie in (0, 1)")


def _parse_eps(text: str):
    try:
        return Fraction(text) if "/" in text else float(text)
    except ValueError as exc:
        raise UsageError(f"--eps: cannot parse {text!r}") from exc


def resolve_map(a) -> tuple:
    """``(map, is_builtin)`` from ``--map`` (and ``--k`` for conjugated_exp)."""
    src = a.map
    if src in BUILTINS:
        params = {"k": a.k} if (src == "conjugated_exp" and a.k is not None) else {}
        return builtin(src, **params), True
    path = Path(src)
    if not path.is_file():
        raise UsageError(f"--map: {src!r} is neither a built-in name ({', '.join(BUILTINS)}) nor a file")
    return load_map(path), False


# -- artifact helpers -----------------------------------------------------------------


def _g17(x) -> str:
    return format(float(x), ".17g")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def write_map_graph(tau: PiecewiseMap, path: Path, points: int = 10_000) -> None:
    """``x,tau_x`` on a uniform grid; a blank line separates branches."""
    xs = np.linspace(0.0, 1.0, points)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("x,tau_x\n")
        prev = None
        for x in xs:
            try:
                i, br = tau.locate(float(x))
            except PointInTailGap:
                prev = None
                continue
            if prev is not None and i != prev:
                fh.write("\n")
            fh.write(f"{_g17(x)},{_g17(br.forward(float(x)))}\n")
            prev = i


def render_plot_data(out: Path, tau: PiecewiseMap | None = None, density=None,
                     correlations=None) -> list:
    """Write plot-ready CSVs for whatever is supplied; returns the file names."""
    from .ergodics import write_correlations

    written = []
    if tau is not None:
        write_map_graph(tau, out / "map_graph.csv")
        written.append("map_graph.csv")
    if density is not None:
        density.to_csv(out / "density.csv")
        written.append("density.csv")
    if correlations is not None:
        write_correlations(correlations, out / "correlations.csv")
        written.append("correlations.csv")
    return written


def _num(x):
    return None if x is None else float(x)


# -- commands ---------------------------------------------------------------------------


def _ulam_density(tau, a, info):
    from .ulam import build_ulam, invariant_density

    M = build_ulam(tau, a.bins, a.tail_tol)
    rep = invariant_density(M, a.tol, a.max_iter)
    info["row_defect_max"] = float(M.row_defect.max())
    info["residual"] = rep.residual
    info["iterations"] = rep.iterations
    info["converged"] = rep.converged
    return M, rep


def cmd_validate(tau, a, out, info):
    rep = validate(tau, tail_tol=a.tail_tol)
    rows = [("in_T", rep.in_T), ("in_TE", rep.in_TE), ("alpha", _g17(rep.alpha)),
            ("r", "" if rep.r is None else _g17(rep.r)), ("beta", _g17(rep.beta)),
            ("slope_sum", _g17(rep.slope_sum)), ("accumulates_at_zero", rep.accumulates_at_zero),
            ("finite", rep.finite), ("branches_checked", rep.branches_checked)]
    rows += [("violation", v) for v in rep.violations]
    _write_rows(out / "class_report.csv", ["key", "value"], rows)
    info["artifacts"] += ["class_report.csv"] + render_plot_data(out, tau)
    print(f"in_T={rep.in_T} in_TE={rep.in_TE} alpha={float(rep.alpha):.12g} beta={float(rep.beta):.12g}")
    for v in rep.violations:
        print(f"violation: {v}")
    return 0 if rep.in_T else 2


def cmd_density(tau, a, out, info):
    _, rep = _ulam_density(tau, a, info)
    info["artifacts"] += render_plot_data(out, density=rep.density)
    print(f"density on {a.bins} bins; residual {rep.residual:.3g} after {rep.iterations} iterations")
    return 0


def cmd_spectrum(tau, a, out, info):
    from .ulam import second_eigenvalue, spectral_gap_probe, write_matrix, write_spectral_summary

    M, rep = _ulam_density(tau, a, info)
    rep.lambda2_abs = second_eigenvalue(M, rep.vector)
    probe = spectral_gap_probe(M, rep.vector, a.n_max or 60)
    rep.q_fit, rep.H_fit = probe.q_fit, probe.H_fit
    write_spectral_summary(rep, out / "spectrum.csv")
    _write_rows(out / "gap_norms.csv", ["n", "norm"], [(k, _g17(v)) for k, v in enumerate(probe.norms)])
    write_matrix(M, out / "ulam_matrix.txt")
    info["artifacts"] += ["spectrum.csv", "gap_norms.csv", "ulam_matrix.txt"]
    info["artifacts"] += render_plot_data(out, density=rep.density)
    print(f"lambda2={rep.lambda2_abs:.6g} q_fit={rep.q_fit:.6g} H_fit={rep.H_fit:.6g}")
    return 0


def _centered_identity(mu):
    from .ergodics import integrate

    m = integrate(lambda x: x, mu)
    return m, (lambda x: np.asarray(x, dtype=float) - m)


def cmd_correlations(tau, a, out, info):
    from .ergodics import correlations
    from .transfer import StepFunction

    _, rep = _ulam_density(tau, a, info)
    n_max = a.n_max or 20
    if tau.is_affine:
        f = StepFunction.from_callable(lambda x: x, a.bins)
        cr = correlations(tau, rep.density, f, f, n_max, "exact-matrix", a.tail_tol)
    else:
        ident = lambda x: np.asarray(x, dtype=float)
        cr = correlations(tau, rep.density, ident, ident, n_max, "orbit-average", a.tail_tol,
                          seed=a.seed)
    info["observable"] = "f = g = x"
    info["method"] = cr.method
    info["q_fit"] = cr.q
    info["truncation_bound"] = cr.truncation_bound
    info["artifacts"] += render_plot_data(out, correlations=cr)
    print(f"C_0={cr.values[0]:.6g} C_1={cr.values[1]:.6g} q={cr.q:.6g} ({cr.method})")
    return 0


def cmd_clt(tau, a, out, info):
    from .ergodics import clt_probe, write_clt

    _, rep = _ulam_density(tau, a, info)
    mean, f = _centered_identity(rep.density)
    n = a.n_max or 1000
    cr = clt_probe(tau, rep.density, f, n, a.samples, a.seed, tail_tol=a.tail_tol)
    write_clt(cr, out / "clt_sums.csv", out / "clt_summary.csv")
    info["observable"] = f"x - {mean!r}"
    info["artifacts"] += ["clt_sums.csv", "clt_summary.csv"]
    print(f"sigma2={cr.sigma2:.6g} normal_distance={cr.normal_distance:.4g} green_kubo={cr.green_kubo:.6g}")
    return 0


def cmd_sample(tau, a, out, info):
    from .sampler import exponential_target, ks_distance, sample, write_samples

    xs = sample(tau, 0.5 ** 0.5 - 0.5, a.count, 1000, a.seed)
    if a.map == "conjugated_exp":
        cdf = exponential_target().cdf
        info["ks_reference"] = "exponential target"
    else:
        _, rep = _ulam_density(tau, a, info)
        cdf = rep.density.cumulative
        info["ks_reference"] = f"Ulam density on {a.bins} bins"
    ks = ks_distance(xs, cdf) if len(xs) else None
    write_samples(xs, out / "samples.txt", out / "sample_summary.csv", ks, 1000, a.seed)
    info["artifacts"] += ["samples.txt", "sample_summary.csv"]
    print(f"{len(xs)} samples; ks={'' if ks is None else format(ks, '.4g')}")
    return 0


def cmd_ly_check(tau, a, out, info):
    from .maps import NotReached, min_slope_certificate
    from .transfer import lower_function, ly_constants
    from .ulam import ly_probe

    c = ly_constants(tau, a.tail_tol)
    try:
        n0, slope = min_slope_certificate(tau, 2.0, 20, a.tail_tol)
    except NotReached as exc:
        n0, slope = None, exc.best_slope
    n = a.n_max or (n0 or 1)
    probe = ly_probe(tau, n, 200, a.tail_tol, a.seed, a.bins)
    h = lower_function(tau, c)
    rows = [("alpha", _g17(c.alpha)), ("D", _g17(c.D)), ("K", _g17(c.K)),
            ("r", "" if c.r is None else _g17(c.r)), ("truncation_bound", _g17(c.truncation_bound)),
            ("certificate_order", "" if n0 is None else n0), ("min_slope", _g17(slope)),
            ("probe_order", n), ("B_n_est", _g17(probe.B_n_est)), ("C_est", _g17(probe.C_est)),
            ("lower_function_edge", _g17(h.t[1]))]
    _write_rows(out / "ly_check.csv", ["key", "value"], rows)
    info["truncation_bound"] = c.truncation_bound
    info["artifacts"] += ["ly_check.csv"]
    print(f"alpha={c.alpha:.12g} D={c.D:.12g} K={c.K:.12g} n0={n0} B_{n}={probe.B_n_est:.6g}")
    return 0


def cmd_first_return(tau, a, out, info):
    if a.eps is None:
        raise UsageError("first-return needs --eps")
    eps = _parse_eps(a.eps)
    fr = first_return_map(tau, eps, a.n_max or 64, a.tail_tol)
    rows = []
    for p in fr.pieces:
        br = p.branch
        rows.append((_g17(p.lo), _g17(p.hi), p.time,
                     "" if br.slope is None else _g17(br.slope),
                     "" if br.intercept is None else _g17(br.intercept)))
    _write_rows(out / "first_return.csv", ["left", "right", "time", "slope", "intercept"], rows)
    info["captured"] = float(fr.captured)
    info["truncation_bound"] = float(fr.unreturned)
    info["artifacts"] += ["first_return.csv"]
    write_map_graph(fr.map, out / "map_graph.csv")
    info["artifacts"].append("map_graph.csv")
    print(f"{len(fr.pieces)} return branches; captured mass {float(fr.captured):.12g}")
    return 0


HANDLERS = {
    "validate": cmd_validate,
    "density": cmd_density,
    "spectrum": cmd_spectrum,
    "correlations": cmd_correlations,
    "clt": cmd_clt,
    "sample": cmd_sample,
    "ly-check": cmd_ly_check,
    "first-return": cmd_first_return,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        _check_knobs(a)
        tau, is_builtin = resolve_map(a)
    except UsageError as exc:
        print(f"acim: usage error: {exc}", file=sys.stderr)
        return 1
    except (MapError, ValueError, OSError) as exc:
        print(f"acim: cannot load map: {exc}", file=sys.stderr)
        return 1
    out = a.out
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "command": a.command,
        "map": a.map,
        "map_name": tau.name,
        "bins": a.bins,
        "tail_tol": a.tail_tol,
        "tol": a.tol,
        "max_iter": a.max_iter,
        "n_max": a.n_max,
        "seed": a.seed,
        "k": a.k,
        "eps": a.eps,
        "count": a.count,
        "samples": a.samples,
        "force": a.force,
        "version": __version__,
        "class_membership": "built-in" if is_builtin else "validated",
        "artifacts": [],
    }
    status = 0
    if not is_builtin and a.command != "validate":
        if a.force:
            info["class_membership"] = UNVERIFIED
        else:
            rep = validate(tau, tail_tol=a.tail_tol)
            if not rep.in_T:
                info["class_membership"] = "rejected"
                info["violations"] = list(rep.violations)
                for v in rep.violations:
                    print(f"violation: {v}", file=sys.stderr)
                _write_manifest(out, info)
                return 2
    try:
        status = HANDLERS[a.command](tau, a, out, info)
    except UsageError as exc:
        print(f"acim: usage error: {exc}", file=sys.stderr)
        return 1
    except MapError as exc:
        print(f"acim: {exc}", file=sys.stderr)
        info["error"] = str(exc)
        status = 1
    _write_manifest(out, info)
    return status


def _write_manifest(out: Path, info: dict) -> None:
    clean = {k: (_num(v) if isinstance(v, Fraction) else v) for k, v in info.items()}
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(clean, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
