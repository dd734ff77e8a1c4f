import math
from fractions import Fraction

import numpy as np
import pytest

from acim.ergodics import (
    MethodUnavailable,
    NotCentered,
    OrbitEscape,
    birkhoff,
    clt_probe,
    correlations,
    fit_decay,
    integrate,
    orbit,
    sample_density,
    trajectory,
    write_clt,
    write_correlations,
)
from acim.maps import Branch, PiecewiseMap
from acim.transfer import StepDensity, StepFunction
from acim.ulam import build_ulam, invariant_density

from conftest import half_indicator

Q = Fraction


def centered_identity(n=256):
    return StepFunction.from_callable(lambda x: x - 0.5, n)


def doubling_correlation_oracle(n):
    """Exact C_n for f = g = x - 1/2 under Lebesgue, by summing over the 2^n branches of tau^n."""
    m = 2 ** n
    total = Q(0)
    for j in range(m):
        a, b = Q(j, m), Q(j + 1, m)
        # integral over [a, b) of x (m x - j) dx
        total += m * (b ** 3 - a ** 3) / 3 - j * (b ** 2 - a ** 2) / 2
    return total - Q(1, 4)


def binned_doubling_oracle(n, bins=256):
    """C_n for the bin-averaged x - 1/2 on ``bins = 2^b`` bins under Lebesgue.

    On cells of width 1/(bins 2^n), x sits in bin i >> n and tau^n x in bin i mod bins.
    """
    v = (np.arange(bins) + 0.5) / bins - 0.5
    i = np.arange(bins * 2 ** n)
    return math.fsum(v[i >> n] * v[i % bins]) / i.size - math.fsum(v / bins) ** 2


def invariant_measure(maps, name):
    if name == "three_branch":
        return half_indicator()
    if name in ("doubling", "shifted_linear"):
        return StepDensity.constant(1)
    return invariant_density(build_ulam(maps[name], 1024)).density


# -- decay fitting ---------------------------------------------------------------------


def test_fit_geometric_exact():
    c = [2.0 ** -n / 12 for n in range(13)]
    fit = fit_decay(c)
    assert abs(fit.q - 0.5) <= 1e-12 and not fit.flagged
    assert fit.prefactor == pytest.approx(1 / 12, rel=1e-10)


@pytest.mark.parametrize("q", [0.1, 0.37, 0.8, 0.95])
def test_fit_recovers_rate(q):
    c = 3.0 * q ** np.arange(30)
    assert abs(fit_decay(c).q - q) <= 1e-12


def test_fit_all_zero_is_flagged():
    fit = fit_decay(np.zeros(10))
    assert fit.flagged and fit.q == 0


def test_fit_ignores_floor():
    c = np.array([1.0, 0.5, 0.25, 0.125, 1e-16, 0.0])
    fit = fit_decay(c)
    assert fit.used == 3 and fit.q == pytest.approx(0.5, abs=1e-12)


# -- correlations ----------------------------------------------------------------------


def test_oracle_closed_form():
    for n in range(1, 8):
        assert doubling_correlation_oracle(n) == Q(1, 12 * 2 ** n)


def test_doubling_correlations(maps):
    f = centered_identity()
    rep = correlations(maps["doubling"], StepDensity.constant(1), f, f, 12)
    assert rep.values[1] == pytest.approx(1 / 24, abs=1e-3)
    assert rep.values[0] == pytest.approx(1 / 12, abs=1e-4)
    for n in range(1, 8):
        assert rep.values[n] == pytest.approx(float(doubling_correlation_oracle(n)), abs=2e-4)
        assert rep.values[n] == pytest.approx(binned_doubling_oracle(n), abs=1e-14)
    assert 0.45 <= rep.q <= 0.55


def test_constant_observable_gives_zero(maps):
    for name in ("three_branch", "shifted_linear", "doubling", "harmonic"):
        mu = invariant_measure(maps, name)
        rep = correlations(maps[name], mu, centered_identity(64), StepFunction.constant(3), 6)
        assert np.all(np.abs(rep.values) <= 1e-12)


def test_three_branch_indicator_correlation(maps):
    f = StepFunction.indicator(0, Q(1, 4))
    rep = correlations(maps["three_branch"], half_indicator(), f, f, 3)
    assert rep.values[1] == 0
    assert rep.values[0] == pytest.approx(0.25, abs=1e-15)


def test_exact_matrix_refuses_non_affine(maps):
    f = centered_identity()
    with pytest.raises(MethodUnavailable):
        correlations(maps["conjugated_exp"], StepDensity.constant(1), f, f, 3)


def test_unknown_method(maps):
    f = centered_identity()
    with pytest.raises(ValueError):
        correlations(maps["doubling"], StepDensity.constant(1), f, f, 3, method="nope")


@pytest.mark.parametrize("name", ["three_branch", "doubling", "shifted_linear", "harmonic"])
def test_exact_and_orbit_agree(maps, name):
    mu = invariant_measure(maps, name)
    f = StepFunction.from_callable(lambda x: np.cos(3 * x), 256)
    g = StepFunction.indicator(0, Q(1, 3), 1) + StepFunction.indicator(Q(1, 3), 1, -1)
    ex = correlations(maps[name], mu, f, g, 4)
    ob = correlations(maps[name], mu, f, g, 4, method="orbit-average", seed=5)
    # orbit estimates carry the bin error of the discretized f on top of the batch error
    assert np.all(np.abs(ex.values - ob.values) <= 3 * ob.stderr + 2e-3)


@pytest.mark.parametrize("name", ["three_branch", "doubling", "shifted_linear", "harmonic"])
def test_crude_correlation_bound(maps, rng, name):
    mu = invariant_measure(maps, name)
    for _ in range(5):
        f = StepFunction.from_bins(rng.uniform(-2, 2, 16))
        g = StepFunction.from_bins(rng.uniform(-2, 2, 9))
        rep = correlations(maps[name], mu, f, g, 5)
        assert np.all(np.abs(rep.values) <= 2 * float(f.sup()) * float(g.sup()) + 1e-12)


def test_correlation_export(maps, tmp_path):
    f = centered_identity(8)
    rep = correlations(maps["doubling"], StepDensity.constant(1), f, f, 3)
    write_correlations(rep, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "n,C_n" and len(lines) == 5
    assert float(lines[1].split(",")[1]) == rep.values[0]


# -- orbits and Birkhoff sums ------------------------------------------------------------


def test_orbit_shapes(maps):
    assert orbit(maps["doubling"], 0.3, 0).size == 0
    xs = trajectory(maps["doubling"], 0.3, 10, jitter=0)
    assert xs[0] == 0.3 and xs[1] == pytest.approx(0.6)
    assert np.array_equal(orbit(maps["doubling"], 0.3, 5, burn_in=3, jitter=0), xs[4:9])


def test_orbit_reproducible(maps):
    a = orbit(maps["harmonic"], 0.3, 1000, seed=1)
    b = orbit(maps["harmonic"], 0.3, 1000, seed=1)
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


def test_orbit_escape_guard():
    br = Branch(0.0, 1.0, lambda x: 2.0 * x + 0.5, lambda x: 2.0, lambda y: (y - 0.5) / 2)
    with pytest.raises(OrbitEscape):
        trajectory(PiecewiseMap([br]), 0.5, 3)


def test_birkhoff_constant(maps):
    assert birkhoff(maps["harmonic"], 2.5, 0.2, 100) == 2.5
    with pytest.raises(ValueError):
        birkhoff(maps["doubling"], 1.0, 0.2, 0)


def test_birkhoff_doubling_mean(maps):
    assert birkhoff(maps["doubling"], lambda x: x, 0.123, 10**6) == pytest.approx(0.5, abs=5e-3)


def test_birkhoff_three_branch_mean(maps):
    assert birkhoff(maps["three_branch"], lambda x: x, 0.123, 10**6) == pytest.approx(0.25, abs=5e-3)


def test_birkhoff_random_observables(maps):
    rng = np.random.default_rng(11)
    mu = half_indicator()
    for _ in range(10):
        f = StepFunction.from_bins(rng.uniform(-1, 1, int(rng.integers(2, 20))))
        want = float(f.integral_product(mu))
        got = birkhoff(maps["three_branch"], f, float(rng.uniform()), 10**6, seed=int(rng.integers(1000)))
        assert abs(got - want) <= 0.01


def test_integrate_and_sampling(rng):
    mu = half_indicator()
    assert integrate(lambda x: x, mu) == pytest.approx(0.25, abs=1e-15)
    assert integrate(StepFunction.constant(2), mu) == 2
    xs = sample_density(mu, 10**5, rng)
    assert xs.max() < 0.5 and abs(xs.mean() - 0.25) < 0.005


# -- central limit theorem ------------------------------------------------------------------


def test_clt_zero_observable(maps):
    rep = clt_probe(maps["doubling"], StepDensity.constant(1), lambda x: 0 * x, n=100, samples=100)
    assert rep.sigma2 == 0 and rep.degenerate and rep.normal_distance == 0


def test_clt_not_centered(maps):
    with pytest.raises(NotCentered):
        clt_probe(maps["doubling"], StepDensity.constant(1), lambda x: x, n=100, samples=10)


def test_clt_doubling(maps):
    rep = clt_probe(maps["doubling"], StepDensity.constant(1), lambda x: x - 0.5, n=10**4,
                    samples=10**4, seed=0)
    assert rep.sigma2 == pytest.approx(0.25, abs=0.02)
    assert rep.green_kubo == pytest.approx(0.25, abs=0.02)
    assert abs(rep.sigma2 - rep.green_kubo) <= 0.1 * rep.green_kubo
    assert 0 <= rep.normal_distance <= 0.02


def test_clt_small_run_bounds(maps, tmp_path):
    mu = half_indicator()
    rep = clt_probe(maps["three_branch"], mu, lambda x: x - 0.25, n=200, samples=500, seed=2)
    assert rep.sigma2 >= 0 and 0 <= rep.normal_distance <= 1
    assert rep.sums.shape == (500,)
    write_clt(rep, tmp_path / "z.csv", tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "sigma2,normal_distance,green_kubo"
    assert len((tmp_path / "z.csv").read_text().splitlines()) == 501
