import math

import numpy as np
import pytest
import scipy.integrate
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from bdjump.configuration import Configuration, GaussianKernel, IndicatorKernel, ZeroKernel, lyapunov_V
from bdjump.errors import EnvelopeViolated, NotReducible
from bdjump.jump_core import CountFunctional, SimOptions, ensemble_expectation, evaluate_generator
from bdjump.models import (
    CLUSTER_FACTOR,
    BdlpParams,
    Constant,
    DlParams,
    Envelope,
    GaussianDispersal,
    GdlParams,
    Linear,
    ParticleKernel,
    PowerLawDispersal,
    RejectionDispersal,
    RejectionStats,
    Sinusoid,
    UniformBallDispersal,
    birth_weights,
    count_model,
    death_weights,
    dispersal_sample,
    drift_constant,
    envelope_mass,
    gdl_sample_cluster,
    immigration_death,
    lyapunov_drift,
    naive_drift_bound,
    rate_constant,
    sample_event,
    total_rate,
)

from desk import desk


def random_config(rng, n, box=3.0, dim=2):
    return Configuration(rng.uniform(0, box, (n, dim)), dim=dim)


# --- coefficients ---------------------------------------------------------------------


@given(st.floats(0, 10), st.floats(0.01, 5))
def test_sinusoid_window_bound_dominates(t0, w):
    c = Sinusoid(1.0, 0.7, 1.3, 0.2)
    ts = np.linspace(t0, t0 + w, 2001)
    vals = np.array([c.value(t) for t in ts])
    assert c.bound(t0, t0 + w) >= vals.max() - 1e-12
    assert c.bound(t0, t0 + w) <= c.sup + 1e-12
    assert c.infimum(t0, t0 + w) <= vals.min() + 1e-12


def test_sinusoid_integral():
    c = Sinusoid(1.0, 1.0, 1.0)
    assert math.isclose(c.integral(0, 2), 3 - math.cos(2), rel_tol=1e-12)


def test_linear_coefficient():
    c = Linear(0.0, 1.0, 2.0)
    assert c.value(1.5) == 1.5 and c.bound(0, 1) == 1.0 and c.integral(0, 2) == 2.0


def test_constant_rejects_negative():
    with pytest.raises(ValueError):
        Constant(-1.0)


# --- dispersal ------------------------------------------------------------------------


@pytest.mark.parametrize("disp", [GaussianDispersal(0.8), PowerLawDispersal(1.0, 2.5),
                                  UniformBallDispersal(1.5), GaussianDispersal(1.0, dim=1)])
def test_dispersal_normalized(disp):
    assert abs(disp.normalization() - 1.0) < 1e-6


def test_gaussian_sample_mean(rng):
    x = np.array([1.0, -2.0])
    y = np.array([GaussianDispersal(0.5).sample(0.0, x, rng) for _ in range(4000)])
    se = 0.5 / math.sqrt(len(y))
    assert np.all(np.abs(y.mean(axis=0) - x) <= 3 * se)


def _radial_cdf(disp, r):
    # P(|Y - x| <= r) in two dimensions
    return scipy.integrate.quad(lambda s: 2 * math.pi * s * disp.radial(np.array([s]))[0], 0, r)[0]


def test_power_law_direct_sampler_matches_numeric_cdf(rng):
    disp = PowerLawDispersal(1.0, 2.5)
    x = np.zeros(2)
    r = np.array([np.linalg.norm(disp.sample(0.0, x, rng)) for _ in range(3000)])
    res = scipy.stats.kstest(r, lambda v: np.array([_radial_cdf(disp, s) for s in np.atleast_1d(v)]))
    assert res.pvalue > 0.01


def test_power_law_rejection_sampler_matches_numeric_cdf(rng):
    target = PowerLawDispersal(1.0, 2.5)
    proposal = PowerLawDispersal(1.0, 1.6)
    disp = RejectionDispersal(target, proposal)
    x = np.array([3.0, 1.0])
    r = np.array([np.linalg.norm(disp.sample(0.0, x, rng) - x) for _ in range(3000)])
    res = scipy.stats.kstest(r, lambda v: np.array([_radial_cdf(target, s) for s in np.atleast_1d(v)]))
    assert res.pvalue > 0.01
    assert disp.stats.accepted == 3000
    assert abs(disp.stats.acceptance_ratio - 1 / disp.mass) < 0.05


def test_envelope_mass_is_sup_ratio():
    m = envelope_mass(GaussianDispersal(1.0), GaussianDispersal(2.0))
    # sup of N(0,1) / N(0,4) density ratio in 2D is 4 at the origin; a safety margin is allowed
    assert 4.0 <= m <= 4.0 * (1 + 1e-5)


def test_envelope_equal_to_target_accepts_everything(rng):
    g = GaussianDispersal(1.0)
    x = np.zeros(2)
    stats = RejectionStats()
    env = Envelope.from_dispersal(g, x, 1.0)
    for _ in range(500):
        dispersal_sample(RejectionDispersal(g, g, 1.0), x, env, rng, stats=stats)
    assert stats.acceptance_ratio == 1.0


def test_envelope_violation_detected(rng):
    narrow, wide = GaussianDispersal(0.2), GaussianDispersal(1.0)
    env = Envelope.from_dispersal(wide, np.zeros(2), 1.0)
    with pytest.raises(EnvelopeViolated):
        for _ in range(200):
            dispersal_sample(narrow, np.zeros(2), env, rng)


def test_non_normalized_dispersal_rejected():
    class Half(GaussianDispersal):
        def radial(self, r, t=0.0):
            return 0.5 * super().radial(r, t)

    with pytest.raises(ValueError):
        BdlpParams(1.0, 0.5, a_plus=Half(1.0))


# --- rates and events -----------------------------------------------------------------


def test_empty_configuration_has_zero_rate():
    p, _ = desk("bdlp")
    assert total_rate(p, 0.0, Configuration.empty()) == 0.0
    assert ParticleKernel(p).is_absorbing(Configuration.empty())


def test_bdlp_rate_by_hand():
    p = BdlpParams(1.0, 0.5, a_minus=IndicatorKernel(0.3, 1.0))
    eta = Configuration([[0.0, 0.0], [0.5, 0.0], [5.0, 5.0]])
    # deaths 3 * 1 + 2 * 0.3 (one close pair), births 3 * 0.5
    assert math.isclose(total_rate(p, 0.0, eta), 3 + 0.6 + 1.5)


def test_gdl_rate_uses_cluster_factor():
    p = GdlParams(1.0, 0.5)
    eta = Configuration([[0.0, 0.0], [4.0, 0.0]])
    assert math.isclose(total_rate(p, 0.0, eta), 2 + 2 * 0.5 * (math.e - 1) / math.e)
    assert math.isclose(CLUSTER_FACTOR, (math.e - 1) / math.e)


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_rate_bound_dominates_rate(kind, rng):
    p, _ = desk(kind)
    k = ParticleKernel(p)
    for n in (1, 5, 30):
        eta = random_config(rng, n)
        assert k.rate_bound(0.0, eta, 1.0) >= k.total_rate(0.5, eta) - 1e-12


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_sample_event_changes_configuration(kind, rng):
    p, eta = desk(kind)
    for _ in range(50):
        new = sample_event(p, 0.0, eta, rng)
        assert len(new) != len(eta)
        assert len(new) >= len(eta) - 1


def test_gdl_cluster_points_distinct(rng):
    p, eta = desk("gdl")
    for _ in range(200):
        c = gdl_sample_cluster(p, 0.0, eta.points[0], rng, eta)
        assert len(c) >= 1
        assert len(eta.insert_many(c.points)) == len(eta) + len(c)


def test_birth_probability_matches_weight(rng):
    p = BdlpParams(1.0, 3.0, a_minus=ZeroKernel())
    eta = random_config(rng, 4)
    grew = sum(len(sample_event(p, 0.0, eta, rng)) == 5 for _ in range(4000))
    assert abs(grew / 4000 - 0.75) < 3 * math.sqrt(0.75 * 0.25 / 4000)


# --- drift and constants --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_drift_matches_generator_of_V(kind, rng):
    p, _ = desk(kind)
    k = ParticleKernel(p)
    V = CountFunctional(lambda n: n + n * n, "V")
    for n in (0, 1, 7, 25):
        eta = random_config(rng, n)
        exact, err = evaluate_generator(k, V, 0.3, eta)
        assert err == 0.0
        assert math.isclose(lyapunov_drift(p, 0.3, eta), exact, rel_tol=1e-9, abs_tol=1e-9)


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_drift_constant_bounds_drift(kind, rng):
    p, _ = desk(kind)
    c = drift_constant(p)
    for n in range(0, 40, 3):
        for box in (0.2, 3.0):
            eta = random_config(rng, n, box)
            assert lyapunov_drift(p, 0.0, eta) <= c * lyapunov_V(eta) + 1e-9


@given(st.integers(1, 30), st.floats(0.01, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_corrected_dl_constant_holds_on_clumps(n, beta, lam, m):
    # all points stacked within a tiny ball: pair sums equal the kernel peak
    p = DlParams(m, lam, a_minus=IndicatorKernel(beta, 1.0), b_plus=IndicatorKernel(beta, 1.0))
    eta = Configuration(np.linspace(0, 0.01, n)[:, None] * np.ones((1, 2)))
    assert lyapunov_drift(p, 0.0, eta) <= drift_constant(p) * lyapunov_V(eta) + 1e-9


def test_naive_dl_drift_bound_fails_without_branching():
    # lam = m = 0, b_plus = a_minus: exact drift 2 beta n (n - 1) exceeds the naive beta n (n - 1)
    p = DlParams(0.0, 0.0, a_minus=IndicatorKernel(1.0, 1.0), b_plus=IndicatorKernel(1.0, 1.0))
    eta = Configuration(np.linspace(0, 0.01, 5)[:, None] * np.ones((1, 2)))
    assert lyapunov_drift(p, 0.0, eta) == pytest.approx(40.0)
    assert naive_drift_bound(p, 0.0, 5) == pytest.approx(20.0)


def test_naive_gdl_constant_fails_for_lone_parent():
    p = GdlParams(0.0, 1.0)
    eta = Configuration([[0.0, 0.0]])
    assert lyapunov_drift(p, 0.0, eta) == pytest.approx(5.0)
    assert naive_drift_bound(p, 0.0, 1) == pytest.approx(4.0)
    assert drift_constant(p) * lyapunov_V(eta) >= 5.0


def test_bdlp_drift_constant_value():
    p, _ = desk("bdlp")
    assert drift_constant(p) == pytest.approx(3.2)


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_rate_constant_bounds_rate(kind, rng):
    p, _ = desk(kind)
    a = rate_constant(p, 2.0)
    for n in (1, 10, 60):
        eta = random_config(rng, n, 0.5)
        assert total_rate(p, 1.0, eta) <= a * lyapunov_V(eta)


def test_dl_stability_check_warns_when_b_too_small(rng):
    p = DlParams(1.0, 0.5, a_minus=GaussianKernel(0.05, 1.0), b_plus=GaussianKernel(0.1, 1.0))
    configs = [random_config(rng, 20, 1.0)]
    with pytest.warns(UserWarning):
        b_hat = p.check_stability(configs)
    assert b_hat > 0


def test_gdl_domination():
    p, _ = desk("gdl")
    assert p.check_domination() <= 0
    bad = GdlParams(1.0, 0.5, a_minus=GaussianKernel(0.05, 1.0), b_plus=GaussianKernel(0.1, 1.0))
    assert bad.check_domination() > 0


# --- count reductions -----------------------------------------------------------------


def test_interacting_model_not_reducible():
    p, _ = desk("bdlp")
    with pytest.raises(NotReducible):
        count_model(p)


def test_count_reduction_rates():
    cm = count_model(BdlpParams(1.0, 0.5))
    assert cm.rates(0.0, 4) == {3: 4.0, 5: 2.0}
    gdl = count_model(GdlParams(1.0, 0.5))
    assert math.isclose(sum(r for y, r in gdl.rates(0.0, 4).items() if y > 4),
                        4 * 0.5 * CLUSTER_FACTOR, rel_tol=1e-15)


def test_count_model_matches_particle_count_generator(rng):
    p = GdlParams(1.0, 0.5)
    eta = random_config(rng, 6)
    F = CountFunctional(lambda n: n * n)
    a, _ = evaluate_generator(ParticleKernel(p), F, 0.0, eta)
    b, _ = evaluate_generator(count_model(p), F, 0.0, 6)
    assert math.isclose(a, b, rel_tol=1e-12)


def test_immigration_death_mean():
    # E N(t) from N(0) = 0 with beta = 2, delta = 1: 2 (1 - e^{-t})
    cm = immigration_death(2.0, 1.0)
    est = ensemble_expectation(cm, 0, 0.0, 1.0, float, 10_000, seed=1)
    assert abs(est.mean - 2 * (1 - math.exp(-1))) <= 3 * est.stderr


def test_non_interacting_dl_mean_growth():
    p = DlParams(1.0, 1.5)
    eta = Configuration(np.random.default_rng(0).uniform(0, 1, (10, 2)))
    est = ensemble_expectation(ParticleKernel(p), eta, 0.0, 1.0, len, 4000, seed=2)
    assert abs(est.mean - 10 * math.exp(0.5)) <= 3 * est.stderr
