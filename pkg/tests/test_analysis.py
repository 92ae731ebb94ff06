import json
import math

import numpy as np
import pytest

from bdjump.analysis import (
    BoundCheck,
    VerificationReport,
    check_condition_B,
    check_condition_D,
    check_condition_E,
    cluster_size_test,
    doob_bound_test,
    expectation_growth_test,
    moment_bound_test,
    moment_bounds,
    path_statistics,
    reports_to_json,
    reports_to_text,
    sample_configurations,
    simulator_vs_solver,
    zero_truncated_poisson_pmf,
)
from bdjump.configuration import Configuration
from bdjump.models import BdlpParams, DlParams, Linear, immigration_death

from desk import desk, load

CONFIGS = sample_configurations(200, seed=3, max_points=60)
T_GRID = np.linspace(0.0, 2.0, 21)


def linear_bd_moments(n0, lam, m, t):
    """Mean and second moment of a linear birth-death process."""
    r = lam - m
    mean = n0 * math.exp(r * t)
    var = n0 * (lam + m) / r * math.exp(r * t) * (math.exp(r * t) - 1) if r else 2 * n0 * lam * t
    return mean, var + mean * mean


def test_sample_configurations_reproducible_and_varied():
    a = sample_configurations(50, seed=1)
    b = sample_configurations(50, seed=1)
    assert a == b
    sizes = {len(c) for c in a}
    assert min(sizes) <= 1 and max(sizes) > 20


@pytest.mark.parametrize("kind", ["bdlp", "dl", "gdl"])
def test_desk_models_pass_all_conditions(kind):
    p, _ = desk(kind)
    assert check_condition_B(p, T_GRID, CONFIGS).passed
    assert check_condition_D(p, 2.0, CONFIGS, t_points=21).passed
    assert check_condition_E(p, 2.0, CONFIGS, t_points=21).passed


def test_condition_B_fails_with_small_constant():
    p = BdlpParams(0.2, 1.0)
    rep = check_condition_B(p, T_GRID, CONFIGS, c=0.1)
    assert not rep.passed and rep.worst_violation > 0
    assert rep.estimate > 0.1


def test_condition_D_fails_with_small_constant():
    p, _ = desk("bdlp")
    rep = check_condition_D(p, 2.0, CONFIGS, a=0.1, t_points=21)
    assert not rep.passed and rep.estimate > 0.1


def test_condition_E_fails_when_rate_vanishes():
    p = BdlpParams(0.0, Linear(0.0, 1.0, 2.0))
    rep = check_condition_E(p, 2.0, CONFIGS, t_points=21)
    assert not rep.passed and rep.estimate == 0.0


def test_condition_E_constant_rates_give_one():
    p, _ = desk("bdlp")
    rep = check_condition_E(p, 2.0, CONFIGS, t_points=11)
    assert rep.estimate == pytest.approx(1.0)


def test_report_serialization():
    rep = VerificationReport("B", 3.2, 1.0, -1.0, 10, True, {"t_points": 3})
    d = json.loads(reports_to_json([rep]))
    assert d[0]["condition"] == "B" and d[0]["passed"] is True
    assert "B" in reports_to_text([rep])


def test_bound_check_margin():
    b = BoundCheck("x", 1.0, 0.1, 1.2)
    assert b.passed and b.margin == pytest.approx(0.2)
    assert not BoundCheck("x", 2.0, 0.1, 1.0).passed
    assert BoundCheck("x", 1.25, 0.1, 1.0).passed


def test_growth_bound_at_zero_horizon_is_equality():
    p, eta = desk("bdlp")
    b = expectation_growth_test(p, eta, 1.0, 1.0, 10)
    assert b.empirical == b.bound == 420


def test_growth_and_doob_share_paths():
    p, eta = desk("bdlp")
    stats = path_statistics(p, eta, 0.0, 0.5, 200, seed=1)
    assert stats.shape == (200, 3)
    assert np.all(stats[:, 1] >= 420)
    g = expectation_growth_test(p, eta, 0.0, 0.5, 200, stats=stats)
    d = doob_bound_test(p, eta, 0.0, 0.5, [840, 1680], 200, stats=stats)
    assert g.passed and all(x.passed for x in d)


def test_dl_first_moment_bound_is_attained_without_interaction():
    mean, _ = linear_bd_moments(20, 0.5, 1.0, 2.0)
    first, _ = moment_bounds(DlParams(1.0, 0.5), 20, 400, 0.0, 2.0)
    assert first == pytest.approx(mean, rel=1e-14)


def test_dl_second_moment_bound_fails_without_interaction():
    # closed-form linear birth-death moments exceed the second-moment bound
    mean, second = linear_bd_moments(20, 0.5, 1.0, 2.0)
    _, bound = moment_bounds(DlParams(1.0, 0.5), 20, 400, 0.0, 2.0)
    assert mean + second > bound
    assert mean + second == pytest.approx(75.45, abs=0.01)


def test_moment_bound_test_zero_horizon():
    p, eta = desk("dl")
    checks = moment_bound_test(p, eta, 1.0, 1.0, 10)
    assert [c.empirical for c in checks] == [20, 420]


def test_moment_bound_requires_dl():
    p, eta = desk("bdlp")
    with pytest.raises(TypeError):
        moment_bound_test(p, eta, 0.0, 1.0, 10)


def test_cross_check_small():
    cc = simulator_vs_solver(immigration_death(1.0, 1.0), 0.0, 1.0, 30, 4000, seed=4, x0=0)
    assert cc.solver_defect < 1e-8
    assert cc.tv_distance < 0.05
    assert cc.empirical.sum() == pytest.approx(1.0)


def test_zero_truncated_pmf_sums_to_one():
    assert zero_truncated_poisson_pmf(np.arange(1, 30)).sum() == pytest.approx(1.0, abs=1e-14)


def test_cluster_size_test_small(rng):
    st = cluster_size_test(5000, rng)
    assert st.p_value > 0.001 and st.mean_ok
    assert st.counts.sum() == 5000


def test_shipped_fixtures_match_desk_parameters():
    p, eta = desk("bdlp")
    assert p.norms == {"m": 1.0, "lam": 0.5, "a_minus": 0.1}
    assert len(eta) == 20 and eta.dim == 2
    assert load("pure_death.cfg").replicates == 10_000
