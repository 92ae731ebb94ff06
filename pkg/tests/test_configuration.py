import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdjump.configuration import (
    HASH_THRESHOLD,
    Configuration,
    GaussianKernel,
    IndicatorKernel,
    IntensityFunction,
    PowerLawKernel,
    ProductForm,
    ZeroKernel,
    brute_force_pair_sums,
    e_lambda,
    lyapunov_V,
    sample_poisson_pp,
    subset_sum_check,
)
from bdjump.errors import DuplicatePoint, MissingPoint, SamplerUnavailable, TooLarge

coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def point_sets(dim=2, max_size=30):
    return (st.lists(st.tuples(*[coords] * dim), min_size=0, max_size=max_size, unique=True)
            .map(lambda pts: np.array(pts, dtype=float).reshape(-1, dim))
            .filter(lambda a: _separated(a)))


def _separated(a):
    if len(a) < 2:
        return True
    d = np.sum((a[:, None] - a[None]) ** 2, axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min() > 1e-20


# --- insertion, removal, equality -------------------------------------------------


def test_insert_into_empty():
    eta = Configuration.empty(2).insert([0.5, 0.5])
    assert len(eta) == 1


def test_remove_last_point_gives_empty():
    eta = Configuration([[1.0, 2.0]])
    assert eta.remove([1.0, 2.0]) == Configuration.empty(2)


def test_duplicate_insert_rejected():
    eta = Configuration([[0.0, 0.0]])
    with pytest.raises(DuplicatePoint):
        eta.insert([0.0, 1e-13])


def test_duplicates_rejected_at_construction():
    with pytest.raises(DuplicatePoint):
        Configuration([[1.0, 1.0], [1.0, 1.0]])


def test_remove_missing_point():
    with pytest.raises(MissingPoint):
        Configuration([[0.0, 0.0]]).remove([1.0, 0.0])


@given(point_sets(), st.tuples(coords, coords))
def test_insert_then_remove_is_identity(pts, x):
    eta = Configuration(pts, dim=2)
    if eta.index_of(x) >= 0:
        return
    assert eta.insert(x).remove(x) == eta
    assert len(eta.insert(x)) == len(eta) + 1


@given(point_sets(), st.randoms(use_true_random=False))
def test_equality_ignores_order(pts, r):
    perm = list(range(len(pts)))
    r.shuffle(perm)
    a = Configuration(pts, dim=2)
    b = Configuration(pts[perm], dim=2)
    assert a == b and hash(a) == hash(b)


def test_configuration_is_immutable():
    eta = Configuration([[0.0, 0.0]])
    with pytest.raises(ValueError):
        eta.points[0, 0] = 3.0
    eta.insert([1.0, 1.0])
    assert len(eta) == 1


def test_json_and_csv_round_trip():
    eta = Configuration([[0.25, -1.0], [3.0, 4.5]])
    assert Configuration.from_json(eta.to_json()) == eta
    lines = eta.to_csv().splitlines()
    assert lines[0] == "x1,x2" and len(lines) == 3


def test_dimension_is_a_runtime_parameter():
    eta = Configuration([[0.0], [1.0], [2.5]])
    assert eta.dim == 1
    eta3 = Configuration(np.eye(3))
    assert eta3.dim == 3 and len(eta3) == 3


# --- pair sums ------------------------------------------------------------------------


def test_singleton_pair_sum_is_zero():
    eta = Configuration([[0.0, 0.0]])
    k = GaussianKernel(1.0, 1.0)
    assert eta.pair_sum(k, [0.0, 0.0]) == 0.0
    assert eta.pair_sums(k)[0] == 0.0


@pytest.mark.parametrize("r,expected", [(0.5, 1.0), (1.0, 1.0), (1.0001, 0.0), (3.0, 0.0)])
def test_indicator_pair_sum(r, expected):
    eta = Configuration([[0.0, 0.0], [r, 0.0]])
    k = IndicatorKernel(1.0, 1.0)
    assert eta.pair_sum(k, [0.0, 0.0]) == expected
    assert eta.energy(k) == 2 * expected


def test_hash_matches_brute_force_on_100_points(rng):
    eta = Configuration(rng.uniform(0, 10, (100, 2)))
    k = GaussianKernel(0.7, 1.3)
    fast = eta.pair_sums(k, method="hash")
    slow = brute_force_pair_sums(eta, k)
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=0)


@given(point_sets(max_size=40),
       st.sampled_from(["gauss", "indicator", "power"]),
       st.floats(0.2, 3.0))
def test_hash_equals_brute_force(pts, family, scale):
    eta = Configuration(pts, dim=2)
    k = {"gauss": GaussianKernel(1.0, scale),
         "indicator": IndicatorKernel(2.0, scale),
         "power": PowerLawKernel(1.0, scale, 3.0)}[family]
    # the hash drops pairs beyond the cutoff radius, each worth at most tail_tol * amplitude
    slack = len(pts) * getattr(k, "tail_tol", 0.0) * k.amplitude
    ref = brute_force_pair_sums(eta, k)
    np.testing.assert_allclose(eta.pair_sums(k, method="hash"), ref, rtol=1e-12, atol=slack)
    for x in pts[:3]:
        assert math.isclose(eta.pair_sum(k, x, method="hash"),
                            eta.pair_sum(k, x, method="brute"), rel_tol=1e-12, abs_tol=slack)


def test_auto_method_switches_to_hash_above_threshold(rng):
    eta = Configuration(rng.uniform(0, 20, (HASH_THRESHOLD + 40, 2)))
    k = GaussianKernel(1.0, 0.5)
    np.testing.assert_allclose(eta.pair_sums(k), brute_force_pair_sums(eta, k), rtol=1e-12)


def test_zero_kernel_sums_vanish(rng):
    eta = Configuration(rng.uniform(0, 1, (10, 2)))
    assert eta.energy(ZeroKernel()) == 0.0


def test_pair_sum_at_external_point(rng):
    eta = Configuration(rng.uniform(0, 1, (20, 2)))
    k = GaussianKernel(1.0, 0.3)
    x = np.array([0.5, 0.5])
    expected = float(np.sum(k(x, eta.points)))
    assert math.isclose(eta.pair_sum(k, x), expected, rel_tol=1e-12)


# --- Lyapunov function and Lebesgue-Poisson calculus ------------------------------------


@pytest.mark.parametrize("n,v", [(0, 0), (1, 2), (10, 110)])
def test_lyapunov_values(n, v):
    eta = Configuration(np.arange(2 * n, dtype=float).reshape(n, 2)) if n else Configuration.empty()
    assert lyapunov_V(eta) == v
    assert lyapunov_V(n) == v


def test_e_lambda_empty_is_one():
    assert e_lambda(lambda p: np.full(len(p), 7.0), Configuration.empty()) == 1.0


@given(st.integers(0, 8), st.floats(0.1, 3.0))
def test_e_lambda_constant(n, c):
    eta = Configuration(np.arange(n, dtype=float).reshape(n, 1), dim=1)
    assert math.isclose(e_lambda(lambda p: np.full(len(p), c), eta), c**n, rel_tol=1e-14)


@given(st.integers(0, 10), st.integers(0, 2**31))
def test_subset_sum_of_exponential(n, seed):
    r = np.random.default_rng(seed)
    eta = Configuration(r.uniform(-1, 1, (n, 2)), dim=2)
    coef = r.uniform(-1, 2, 3)
    f = lambda p: coef[0] + coef[1] * p[:, 0] + coef[2] * np.sin(p[:, 1])
    lhs, rhs = subset_sum_check(ProductForm(f, lambda p: np.ones(len(p))), eta)
    assert math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-12)


def test_subset_sum_counts_subsets():
    eta = Configuration(np.arange(12, dtype=float).reshape(6, 2))
    one = lambda p: np.ones(len(p))
    assert subset_sum_check(ProductForm(one, one), eta) == (64.0, 64.0)
    assert subset_sum_check(ProductForm(one, one), Configuration.empty()) == (1.0, 1.0)


def test_subset_sum_random_product_form(rng):
    eta = Configuration(rng.uniform(0, 1, (8, 2)))
    g = lambda p: 1 + p[:, 0]
    h = lambda p: np.exp(-p[:, 1])
    lhs, rhs = subset_sum_check(ProductForm(g, h), eta)
    assert abs(lhs - rhs) <= 1e-12 * abs(rhs)


def test_subset_enumeration_limit(rng):
    eta = Configuration(rng.uniform(0, 1, (13, 2)))
    one = lambda p: np.ones(len(p))
    with pytest.raises(TooLarge):
        subset_sum_check(ProductForm(one, one), eta)


# --- Poisson point processes --------------------------------------------------------------


def test_poisson_tiny_mass_is_almost_always_empty(rng):
    f = IntensityFunction.uniform_box([0, 0], [1, 1], 1e-9)
    empties = sum(len(sample_poisson_pp(f, rng)) == 0 for _ in range(10_000))
    assert empties >= 9990


def test_poisson_count_moments(rng):
    f = IntensityFunction.uniform_box([0, 0, 0], [1, 1, 1], 3.0)
    n = np.array([len(sample_poisson_pp(f, rng)) for _ in range(10_000)])
    se_mean = math.sqrt(3.0 / len(n))
    assert abs(n.mean() - 3.0) <= 3 * se_mean
    # variance of the sample variance for Poisson: (mu + 2 mu^2) / N
    se_var = math.sqrt((3.0 + 2 * 9.0) / len(n))
    assert abs(n.var(ddof=1) - 3.0) <= 3 * se_var


def test_poisson_points_land_in_support(rng):
    f = IntensityFunction.uniform_box([2.0, 2.0], [2.001, 2.001], 50.0)
    for _ in range(20):
        eta = sample_poisson_pp(f, rng)
        assert np.all((eta.points >= 2.0) & (eta.points <= 2.001))


def test_poisson_rejection_sampler(rng):
    dens = lambda p: 4.0 * np.exp(-np.sum(np.atleast_2d(p) ** 2, axis=1))
    f = IntensityFunction(dens, 4.0 * math.pi * (1 - math.exp(-1)) ** 0, 2,
                          box=([-4, -4], [4, 4]), f_max=4.0)
    eta = sample_poisson_pp(f, rng)
    assert eta.dim == 2


def test_poisson_without_sampler_raises(rng):
    f = IntensityFunction(lambda p: np.ones(len(p)), 1.0, 2)
    with pytest.raises(SamplerUnavailable):
        sample_poisson_pp(f, rng)
