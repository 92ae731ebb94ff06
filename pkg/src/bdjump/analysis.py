"""Numerical checks of drift, rate and moment conditions for the particle models.

Conditions are universally quantified over configurations; the checkers
evaluate them on Poisson samples at several intensities plus tight clusters,
which maximise the pair energies ``E+`` and ``E-``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.special
import scipy.stats

from .configuration import Configuration, IntensityFunction, lyapunov_V, sample_poisson_pp
from .errors import NotReducible
from .jump_core import (
    CAP_EXCEEDED,
    JumpKernel,
    SimOptions,
    _Task,
    run_replicates,
    simulate_path,
    summarize,
)
from .models import (
    CLUSTER_FACTOR,
    BdlpParams,
    CountModel,
    DlParams,
    GdlParams,
    ModelParams,
    ParticleKernel,
    count_model,
    drift_constant,
    gdl_cluster_size,
    drift_integral,
    rate_constant,
)
from .series_solver import minimal_solution

SIGMA = 3.0
DEFAULT_T_POINTS = 1001


@dataclass
class VerificationReport:
    """Outcome of one condition check.

    ``constant`` is the declared constant (``c``, ``a(T)`` or ``b(T)``),
    ``estimate`` the value implied by the samples. ``worst_violation`` is
    ``<= 0`` exactly when the check passes.
    """

    condition: str
    constant: float
    estimate: float
    worst_violation: float
    n_configs: int
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        return (f"{self.condition:<10} {'PASS' if self.passed else 'FAIL'}  "
                f"constant={self.constant:.6g}  estimate={self.estimate:.6g}  "
                f"worst_violation={self.worst_violation:.6g}  configs={self.n_configs}")


def reports_to_text(reports: Sequence[VerificationReport]) -> str:
    return "\n".join(r.to_text() for r in sorted(reports, key=lambda r: r.condition)) + "\n"


def reports_to_json(reports: Sequence[VerificationReport]) -> str:
    return json.dumps([r.to_dict() for r in sorted(reports, key=lambda r: r.condition)],
                      sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# configuration samples
# ---------------------------------------------------------------------------


def poisson_configurations(n_configs: int, dim: int, rng: np.random.Generator,
                           intensities: Sequence[float] = (1.0, 5.0, 20.0),
                           side: float = 4.0, max_points: int = 100) -> list[Configuration]:
    """Poisson samples in ``[0, side]^d``, cycling through the mean counts."""
    out = []
    box = IntensityFunction.uniform_box(np.zeros(dim), np.full(dim, side), 1.0)
    for i in range(n_configs):
        mass = intensities[i % len(intensities)]
        n = min(int(rng.poisson(mass)), max_points)
        out.append(Configuration(box.sample_positions(n, rng), dim=dim))
    return out


def clustered_configurations(n_configs: int, dim: int, rng: np.random.Generator,
                             max_points: int = 100, spread: float = 1e-3,
                             n_clusters: Sequence[int] = (1, 2, 4)) -> list[Configuration]:
    """Adversarial samples: a few very tight clusters with random centres."""
    out = []
    for i in range(n_configs):
        n = int(rng.integers(1, max_points + 1))
        k = n_clusters[i % len(n_clusters)]
        centres = rng.uniform(0, 4.0, (k, dim))
        pts = centres[rng.integers(0, k, n)] + spread * rng.standard_normal((n, dim))
        out.append(Configuration(pts, dim=dim))
    return out


def sample_configurations(n_configs: int = 1000, dim: int = 2, seed: int = 0,
                          max_points: int = 100) -> list[Configuration]:
    """Half Poisson, half clustered, plus a singleton."""
    rng = np.random.default_rng(seed)
    half = n_configs // 2
    configs = poisson_configurations(n_configs - half - 1, dim, rng, max_points=max_points)
    configs += clustered_configurations(half, dim, rng, max_points=max_points)
    configs.append(Configuration(np.zeros((1, dim))))
    return configs


# ---------------------------------------------------------------------------
# vectorised rate and drift profiles over a time grid
# ---------------------------------------------------------------------------


def _profile(coef, ts):
    return np.array([coef.value(t) for t in ts], dtype=float)


@dataclass
class _Profiles:
    ts: np.ndarray
    m: Optional[np.ndarray]
    lam: Optional[np.ndarray]
    am: np.ndarray
    bp: np.ndarray


def _profiles(p: ModelParams, ts: np.ndarray) -> _Profiles:
    m = _profile(p.m, ts) if p.m.spatially_constant else None
    lam = _profile(p.lam, ts) if p.lam.spatially_constant else None
    if isinstance(p, GdlParams):
        am, bp = _profile(p.a_minus_t, ts), _profile(p.b_plus_t, ts)
    else:
        am = bp = np.ones_like(ts)
    return _Profiles(ts, m, lam, am, bp)


def _death_birth(p: ModelParams, prof: _Profiles, eta: Configuration):
    """Total death rate and un-normalised total birth intensity on the grid."""
    n = len(eta)
    em = eta.energy(p.a_minus)
    ep = eta.energy(p.b_plus) if isinstance(p, (DlParams, GdlParams)) else 0.0
    if prof.m is not None:
        msum = n * prof.m
    else:
        msum = np.array([np.sum(p.m(t, eta.points)) for t in prof.ts])
    if prof.lam is not None:
        lsum = n * prof.lam
    else:
        lsum = np.array([np.sum(p.lam(t, eta.points)) for t in prof.ts])
    return msum + prof.am * em, lsum + prof.bp * ep


def rate_profile(p: ModelParams, ts: np.ndarray, eta: Configuration,
                 prof: Optional[_Profiles] = None) -> np.ndarray:
    """``q(t, eta)`` for every ``t`` in ``ts``."""
    prof = prof or _profiles(p, ts)
    D, B = _death_birth(p, prof, eta)
    return D + (CLUSTER_FACTOR * B if isinstance(p, GdlParams) else B)


def drift_profile(p: ModelParams, ts: np.ndarray, eta: Configuration,
                  prof: Optional[_Profiles] = None) -> np.ndarray:
    """``L(t)V(eta)`` for every ``t`` in ``ts`` (see :func:`models.lyapunov_drift`)."""
    prof = prof or _profiles(p, ts)
    n = len(eta)
    D, B = _death_birth(p, prof, eta)
    if isinstance(p, GdlParams):
        return (2 * n + 3) * B - 2 * n * D
    return (2 * n + 2) * B - 2 * n * D


def _as_profile(c, ts: np.ndarray) -> np.ndarray:
    if callable(c):
        return np.array([c(t) for t in ts], dtype=float)
    return np.full(len(ts), float(c))


# ---------------------------------------------------------------------------
# condition checks
# ---------------------------------------------------------------------------


def check_condition_B(model: ModelParams, t_grid: Sequence[float],
                      configs: Sequence[Configuration],
                      c: Union[None, float, Callable[[float], float]] = None) -> VerificationReport:
    """Drift condition ``L(t)V <= c(t) V`` with the model's constant unless ``c`` is given."""
    if not configs:
        raise ValueError("configs must be non-empty")
    ts = np.asarray(t_grid, dtype=float)
    if c is None:
        c = partial(drift_constant, model) if isinstance(model, DlParams) else drift_constant(model)
    cs = _as_profile(c, ts)
    prof = _profiles(model, ts)
    worst, est = -math.inf, -math.inf
    for eta in configs:
        V = lyapunov_V(eta)
        drift = drift_profile(model, ts, eta, prof) if len(eta) else np.zeros_like(ts)
        worst = max(worst, float(np.max(drift - cs * V)))
        if V > 0:
            est = max(est, float(np.max(drift / V)))
    return VerificationReport("B", float(np.max(cs)), est, worst, len(configs), worst <= 0.0,
                              {"t_points": len(ts)})


def check_condition_D(model: ModelParams, T: float, configs: Sequence[Configuration],
                      a: Optional[float] = None,
                      t_points: int = DEFAULT_T_POINTS) -> VerificationReport:
    """Rate bound ``q(t, eta) <= a(T) V(eta)`` for ``t`` in ``[0, T]``."""
    if not configs:
        raise ValueError("configs must be non-empty")
    ts = np.linspace(0.0, T, t_points)
    a = rate_constant(model, T) if a is None else float(a)
    prof = _profiles(model, ts)
    worst, est, used = -math.inf, 0.0, 0
    for eta in configs:
        if len(eta) == 0:
            continue
        used += 1
        V = lyapunov_V(eta)
        q = float(np.max(rate_profile(model, ts, eta, prof)))
        worst = max(worst, q - a * V)
        est = max(est, q / V)
    return VerificationReport("D", a, est, worst, used, worst <= 0.0, {"T": T, "t_points": t_points})


def check_condition_E(model: ModelParams, T: float, configs: Sequence[Configuration],
                      b: Optional[float] = None, t_points: int = DEFAULT_T_POINTS,
                      floor: float = 1e-8) -> VerificationReport:
    """Estimate ``b(T) = inf q(t, eta) / q(T, eta)`` over ``t <= T`` and ``q(T, eta) > 0``.

    Passes when the estimate is at least ``b`` (default: strictly positive,
    i.e. above ``floor``).
    """
    if not configs:
        raise ValueError("configs must be non-empty")
    ts = np.linspace(0.0, T, t_points)
    prof = _profiles(model, ts)
    est, used = math.inf, 0
    for eta in configs:
        if len(eta) == 0:
            continue
        q = rate_profile(model, ts, eta, prof)
        if q[-1] <= 0:
            continue
        used += 1
        est = min(est, float(np.min(q) / q[-1]))
    required = floor if b is None else float(b)
    worst = required - est
    return VerificationReport("E", required, est, worst, used, worst <= 0.0,
                              {"T": T, "t_points": t_points})


# ---------------------------------------------------------------------------
# ensemble tests
# ---------------------------------------------------------------------------


def _kernel(model) -> JumpKernel:
    return model if isinstance(model, JumpKernel) else ParticleKernel(model)


def _count(x) -> int:
    return int(x) if isinstance(x, (int, np.integer)) else len(x)


def _path_stats(kernel, x0, s, opts, rng, i):
    traj = simulate_path(kernel, x0, s, opts, rng)
    sup_v = max([lyapunov_V(_count(x0))] + [lyapunov_V(_count(y)) for _, y in traj.events])
    n = _count(traj.final_state)
    return n, sup_v, traj.terminated == CAP_EXCEEDED


def path_statistics(model, x0, s: float, t: float, replicates: int, seed: int = 0,
                    workers: int = 1, opts: Optional[SimOptions] = None) -> np.ndarray:
    """Per-replicate ``(final count, sup of V, capped)`` rows."""
    kernel = _kernel(model)
    base = opts or SimOptions(horizon=t, seed=seed)
    opts = SimOptions(t, seed, base.max_events, base.lyapunov_cap, base.lookahead_window)
    rows = run_replicates(_Task(partial(_path_stats, kernel, x0, s, opts)), replicates, seed, workers)
    return np.array(rows, dtype=float).reshape(-1, 3)


@dataclass
class BoundCheck:
    """Empirical quantity against a theoretical upper bound."""

    label: str
    empirical: float
    stderr: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.empirical

    @property
    def passed(self) -> bool:
        return self.empirical <= self.bound + SIGMA * self.stderr

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(margin=self.margin, passed=self.passed)
        return d

    def to_report(self, condition: str, n: int) -> VerificationReport:
        worst = self.empirical - self.bound - SIGMA * self.stderr
        return VerificationReport(condition, self.bound, self.empirical, worst, n, self.passed,
                                  {"label": self.label, "stderr": self.stderr})


def expectation_growth_test(model: ModelParams, eta0: Configuration, s: float, t: float,
                            replicates: int, seed: int = 0, workers: int = 1,
                            c: Optional[float] = None,
                            stats: Optional[np.ndarray] = None) -> BoundCheck:
    """``E[V(X_t)] <= V(eta0) exp(int_s^t c)`` by ensemble mean."""
    integral = drift_integral(model, s, t) if c is None else c * (t - s)
    bound = lyapunov_V(eta0) * math.exp(integral)
    if t == s:
        return BoundCheck("E[V]", lyapunov_V(eta0), 0.0, bound)
    if stats is None:
        stats = path_statistics(model, eta0, s, t, replicates, seed, workers)
    n = stats[:, 0]
    est = summarize(n + n * n)
    return BoundCheck("E[V]", est.mean, est.stderr, bound)


def doob_bound_test(model: ModelParams, eta0: Configuration, s: float, T: float,
                    thresholds: Sequence[float], replicates: int, seed: int = 0,
                    workers: int = 1, c: Optional[float] = None,
                    stats: Optional[np.ndarray] = None) -> list[BoundCheck]:
    """``P(sup_[s,T] V(X) >= a) <= V(eta0) exp(int c) / a`` for each threshold ``a``.

    ``V`` only changes at jumps, so its supremum is taken exactly over the
    post-jump states.
    """
    integral = drift_integral(model, s, T) if c is None else c * (T - s)
    scale = lyapunov_V(eta0) * math.exp(integral)
    if stats is None:
        stats = path_statistics(model, eta0, s, T, replicates, seed, workers)
    sup_v = stats[:, 1]
    out = []
    for a in thresholds:
        hit = (sup_v >= a).astype(float)
        est = summarize(hit)
        out.append(BoundCheck(f"P(sup V >= {a:g})", est.mean, est.stderr, scale / a))
    return out


def moment_bounds(p: DlParams, n0: float, n0_sq: float, s: float, t: float) -> tuple[float, float]:
    """Right-hand sides of the first-moment and ``|eta| + |eta|^2`` bounds."""
    bp = p.norms["b_plus"]
    lam_i, m_i = p.lam.integral(s, t), p.m.integral(s, t)
    first = math.exp(p.b * (t - s) + lam_i - m_i) * n0
    second = (math.exp((p.b - bp) * (t - s) + 2 * lam_i - m_i) * n0
              + math.exp((bp + 2 * p.b) * (t - s) + 2 * (lam_i - m_i)) * n0_sq)
    return first, second


def moment_bound_test(model: DlParams, eta0: Configuration, s: float, t: float,
                      replicates: int, seed: int = 0, workers: int = 1,
                      orders: Sequence[int] = (1, 2),
                      stats: Optional[np.ndarray] = None) -> list[BoundCheck]:
    """Ensemble check of ``E|eta_t|`` and ``E(|eta_t| + |eta_t|^2)`` against their bounds."""
    if not isinstance(model, DlParams):
        raise TypeError("moment bounds are stated for the DL model")
    n0 = len(eta0)
    first, second = moment_bounds(model, n0, n0 * n0, s, t)
    if t == s:
        vals = {1: (n0, first), 2: (n0 + n0 * n0, second)}
        return [BoundCheck(f"order {k}", vals[k][0], 0.0, vals[k][1]) for k in orders]
    if stats is None:
        stats = path_statistics(model, eta0, s, t, replicates, seed, workers)
    n = stats[:, 0]
    out = []
    for k in orders:
        if k == 1:
            est = summarize(n)
            out.append(BoundCheck("order 1", est.mean, est.stderr, first))
        elif k == 2:
            est = summarize(n + n * n)
            out.append(BoundCheck("order 2", est.mean, est.stderr, second))
        else:
            raise ValueError("orders must be 1 or 2")
    return out


@dataclass
class CrossCheck:
    tv_distance: float
    empirical: np.ndarray
    solver_row: np.ndarray
    solver_defect: float
    replicates: int
    tolerance: float = 0.02

    @property
    def passed(self) -> bool:
        return self.tv_distance <= self.tolerance


def _final_count(kernel, x0, s, opts, rng, i):
    return _count(simulate_path(kernel, x0, s, opts, rng).final_state)


def simulator_vs_solver(model: Union[ModelParams, CountModel], s: float, t: float,
                        truncation: int, replicates: int, seed: int = 0, x0: int = 1,
                        step: float = 1e-2, workers: int = 1,
                        window: float = 1.0) -> CrossCheck:
    """Total-variation distance between simulated counts and the solver row of ``x0``.

    Counts at or beyond ``truncation`` are pooled into one bin compared with
    the solver's escaped mass.
    """
    cm = model if isinstance(model, CountModel) else count_model(model)
    if not 0 <= x0 < truncation:
        raise ValueError("initial count must lie below the truncation")
    fk = cm.finite_kernel(truncation, boundary="escape")
    P, _ = minimal_solution(fk, s, t, step)
    row = np.clip(P[x0], 0.0, None)
    defect = max(0.0, 1.0 - float(row.sum()))
    opts = SimOptions(t, seed, lookahead_window=window)
    counts = run_replicates(_Task(partial(_final_count, cm, x0, s, opts)), replicates, seed, workers)
    counts = np.minimum(np.asarray(counts), truncation)
    hist = np.bincount(counts, minlength=truncation + 1) / replicates
    tv = 0.5 * (float(np.abs(hist[:truncation] - row).sum()) + abs(float(hist[truncation]) - defect))
    return CrossCheck(tv, hist, row, defect, replicates)


@dataclass
class ClusterStats:
    """Observed cluster sizes against the zero-truncated Poisson(1) law."""

    sizes: np.ndarray
    counts: np.ndarray
    expected: np.ndarray
    mean: float
    stderr: float
    chi2: float
    p_value: float

    @property
    def expected_mean(self) -> float:
        return math.e / (math.e - 1.0)

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean - self.expected_mean) <= SIGMA * self.stderr


def zero_truncated_poisson_pmf(k) -> np.ndarray:
    k = np.asarray(k)
    return np.exp(-scipy.special.gammaln(k + 1.0)) / (math.e - 1.0)


def cluster_size_test(draws: int, rng: np.random.Generator, min_expected: float = 5.0) -> ClusterStats:
    """Chi-square and mean test of :func:`models.gdl_cluster_size` over ``draws`` samples.

    Bins with expected count below ``min_expected`` are pooled into the tail.
    """
    ks = np.array([gdl_cluster_size(rng) for _ in range(draws)])
    kmax = int(ks.max())
    sizes = np.arange(1, kmax + 1)
    counts = np.bincount(ks, minlength=kmax + 1)[1:]
    expected = draws * zero_truncated_poisson_pmf(sizes)
    # last kept bin absorbs the tail so that both sides sum to ``draws``
    keep = int(np.searchsorted(-expected, -min_expected, side="right"))
    keep = max(keep, 2)
    obs = np.append(counts[:keep - 1], counts[keep - 1:].sum())
    exp = np.append(expected[:keep - 1], draws - expected[:keep - 1].sum())
    chi2, p = scipy.stats.chisquare(obs, exp)
    est = summarize(ks)
    return ClusterStats(sizes, counts, expected, est.mean, est.stderr, float(chi2), float(p))
