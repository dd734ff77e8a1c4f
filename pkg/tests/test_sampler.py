import math

import numpy as np
import pytest
from scipy import stats

from acim.maps import validate
from acim.sampler import (
    CdfNotInvertible,
    EmptySamples,
    TargetDistribution,
    conjugated_map,
    exponential_target,
    ks_distance,
    lag1_autocorrelation,
    pf_fixed_point_check,
    sample,
    uniform_target,
    write_samples,
)

E = math.e


@pytest.fixture(scope="module")
def expo():
    return exponential_target()


def test_target_consistency(expo):
    x = np.linspace(0.01, 0.99, 64)
    h = 1e-6
    deriv = (expo.cdf(x + h) - expo.cdf(x - h)) / (2 * h)
    assert np.allclose(deriv, expo.density(x), atol=1e-8)
    u = np.linspace(0, 1, 101)
    assert np.allclose(expo.cdf(expo.inverse_cdf(u)), u, atol=1e-10)
    assert expo.cdf(0.0) == 0 and expo.cdf(1.0) == pytest.approx(1, abs=1e-15)


def test_density_integrates_to_one(expo):
    from scipy.integrate import quad

    assert quad(expo.density, 0, 1)[0] == pytest.approx(1, abs=1e-13)


def test_bisection_inverse():
    t = TargetDistribution(lambda x: 2 - 2 * x, lambda x: 2 * x - x * x)
    u = np.linspace(0, 1, 33)
    # closed form inverse of 2x - x^2 is 1 - sqrt(1 - u)
    assert np.allclose(t.inverse_cdf(u), 1 - np.sqrt(1 - u), atol=1e-11)


def test_bad_cdf_rejected():
    with pytest.raises(CdfNotInvertible):
        TargetDistribution(lambda x: 1.0, lambda x: 0.5 * x)


def test_first_breakpoint(expo):
    F = conjugated_map(expo, 5)
    want = -math.log(1 - 0.2 * (E - 1) / E)
    assert want == pytest.approx(0.1351603, abs=1e-7)
    assert float(F.branches[0].b) == pytest.approx(want, abs=1e-15)
    assert len(F.branches) == 5


def test_zero_is_fixed(expo):
    for k in (2, 3, 5):
        assert conjugated_map(expo, k)(0.0) == 0


def test_uniform_target_gives_doubling(maps):
    F = conjugated_map(uniform_target(), 2)
    x = np.linspace(0, 1, 1001, endpoint=False)
    assert np.array_equal(F.forward_array(x), maps["doubling"].forward_array(x))
    assert [br.slope for br in F.branches] == [2, 2]


def test_k_too_small(expo):
    with pytest.raises(ValueError):
        conjugated_map(expo, 1)


@pytest.mark.parametrize("k", [2, 3, 5, 8])
def test_conjugation_identity(expo, rng, k):
    F = conjugated_map(expo, k)
    x = rng.uniform(0, 1, 1000)
    lhs = expo.cdf(F.forward_array(x))
    rhs = np.mod(k * expo.cdf(x), 1.0)
    d = np.abs(lhs - rhs)
    # near a branch end one side reads 0 and the other 1
    assert np.all(np.minimum(d, 1 - d) <= 1e-10)


@pytest.mark.parametrize("k", [2, 5])
def test_branches_increasing_convex(expo, k):
    F = conjugated_map(expo, k)
    assert validate(F).in_T
    for br in F.branches:
        x = np.linspace(float(br.a), float(br.b), 200)[:-1]
        y = br.forward(x)
        assert np.all(np.diff(y) > 0)
        d = br.derivative(x)
        assert np.all(np.diff(d) >= -1e-12)


@pytest.mark.parametrize("k", [2, 5])
def test_fixed_point_residual(expo, k):
    assert pf_fixed_point_check(expo, k, 101) <= 1e-8


def test_fixed_point_uniform():
    assert pf_fixed_point_check(uniform_target(), 2) <= 1e-15


def test_sample_empty(maps):
    assert len(sample(maps["doubling"], 0.3, 0)) == 0
    with pytest.raises(ValueError):
        sample(maps["doubling"], 0.3, -1)


def test_doubling_samples_uniform(maps):
    xs = sample(maps["doubling"], 0.3, 10**6, jitter_seed=1)
    hist, _ = np.histogram(xs, bins=50, range=(0, 1))
    assert np.sum(np.abs(hist / xs.size * 50 - 1)) / 50 <= 0.01


def test_exponential_samples(maps, expo):
    xs = sample(maps["conjugated_exp"], 0.3, 10**6, jitter_seed=2)
    hist, edges = np.histogram(xs, bins=50, range=(0, 1))
    cell = np.diff(expo.cdf(edges)) * 50
    assert np.sum(np.abs(hist / xs.size * 50 - cell)) / 50 <= 0.02
    assert ks_distance(xs, expo.cdf) <= 0.01


def test_ks_against_scipy(rng):
    for n in (1, 7, 100, 1000):
        x = rng.uniform(0, 1, n) ** 1.3
        assert ks_distance(x, lambda v: v) == pytest.approx(stats.kstest(x, "uniform").statistic,
                                                            abs=1e-15)


def test_ks_examples(expo):
    n = 200
    q = expo.inverse_cdf((np.arange(1, n + 1) - 0.5) / n)
    assert ks_distance(q, expo.cdf) == pytest.approx(1 / (2 * n), abs=1e-12)
    assert ks_distance(np.zeros(10), lambda v: v) == 1.0
    with pytest.raises(EmptySamples):
        ks_distance([], lambda v: v)


def test_ks_order_invariant(rng):
    x = rng.uniform(0, 1, 500)
    assert ks_distance(x, lambda v: v) == ks_distance(rng.permutation(x), lambda v: v)


def test_lag1_autocorrelation(maps):
    xs = sample(maps["doubling"], 0.3, 10**5)
    # doubling map: corr(x, 2x mod 1) = 1/2
    assert lag1_autocorrelation(xs) == pytest.approx(0.5, abs=0.02)
    assert lag1_autocorrelation([1.0, 1.0, 1.0]) == 0


def test_write_samples(tmp_path):
    write_samples([0.1, 1 / 3], tmp_path / "x.txt", tmp_path / "s.csv", ks=0.25, burn_in=5, seed=7)
    assert (tmp_path / "x.txt").read_text() == "0.10000000000000001\n0.33333333333333331\n"
    assert (tmp_path / "s.csv").read_text() == "count,ks,burn_in,seed\n2,0.25,5,7\n"
