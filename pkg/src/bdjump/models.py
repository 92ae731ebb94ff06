"""Birth-death particle systems on finite configurations.

Three spatial models are provided, each as a parameter dataclass plus a
:class:`ParticleKernel` that plugs into the path simulator:

* :class:`BdlpParams` -- density-independent branching, additive competition
  in the death rate;
* :class:`DlParams` -- branching intensity enhanced by pairwise facilitation
  ``b_plus``, translation-invariant coefficients;
* :class:`GdlParams` -- each birth event places a cluster of ``k >= 1``
  offspring, ``k`` zero-truncated Poisson(1).

Spatially homogeneous, non-interacting instances reduce to pure count
processes (:func:`meanfield_reduction`, :class:`CountModel`).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.integrate
import scipy.special

from .configuration import (
    Configuration,
    GaussianKernel,
    PairKernel,
    RadialKernel,
    ZeroKernel,
    lyapunov_V,
)
from .errors import EnvelopeViolated, NotReducible, SamplerUnavailable
from .jump_core import JumpKernel
from .series_solver import FiniteKernel

log = logging.getLogger(__name__)

E = math.e
CLUSTER_FACTOR = (E - 1.0) / E


# ---------------------------------------------------------------------------
# time-dependent coefficients
# ---------------------------------------------------------------------------


class Coefficient:
    """Non-negative intensity ``f(t, x)``.

    ``sup`` is the global sup norm; ``bound(t0, t1)`` dominates ``f`` on
    ``[t0, t1]`` (over all ``x``) and is used for thinning.
    """

    spatially_constant = True
    sup: float = math.inf

    def value(self, t: float) -> float:
        raise NotImplementedError

    def __call__(self, t: float, pts: np.ndarray) -> np.ndarray:
        return np.full(len(pts), self.value(t))

    def bound(self, t0: float, t1: float) -> float:
        return self.sup

    def integral(self, s: float, t: float) -> float:
        return scipy.integrate.quad(self.value, s, t, limit=200)[0]

    def infimum(self, t0: float, t1: float, n: int = 1001) -> float:
        return float(min(self.value(r) for r in np.linspace(t0, t1, n)))


@dataclass(frozen=True)
class Constant(Coefficient):
    c: float

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("coefficient must be non-negative")

    @property
    def sup(self):
        return self.c

    def value(self, t):
        return self.c

    def bound(self, t0, t1):
        return self.c

    def integral(self, s, t):
        return self.c * (t - s)

    def infimum(self, t0, t1, n=0):
        return self.c


@dataclass(frozen=True)
class Sinusoid(Coefficient):
    """``base + amplitude * sin(omega t + phase)`` with ``base >= |amplitude|``."""

    base: float
    amplitude: float
    omega: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if self.base < abs(self.amplitude):
            raise ValueError("sinusoidal coefficient would become negative")

    @property
    def sup(self):
        return self.base + abs(self.amplitude)

    def value(self, t):
        return self.base + self.amplitude * math.sin(self.omega * t + self.phase)

    def _extreme_sin(self, t0, t1, sign):
        # extreme of sign*sin(omega t + phase) over [t0, t1]
        a, b = sorted((self.omega * t0 + self.phase, self.omega * t1 + self.phase))
        target = math.pi / 2 if sign > 0 else -math.pi / 2
        k = math.ceil((a - target) / (2 * math.pi))
        if target + 2 * math.pi * k <= b:
            return 1.0
        return max(sign * math.sin(a), sign * math.sin(b))

    def bound(self, t0, t1):
        if self.amplitude == 0 or self.omega == 0:
            return self.value(t0)
        sign = 1 if self.amplitude > 0 else -1
        return self.base + abs(self.amplitude) * self._extreme_sin(t0, t1, sign)

    def infimum(self, t0, t1, n=0):
        if self.amplitude == 0 or self.omega == 0:
            return self.value(t0)
        sign = -1 if self.amplitude > 0 else 1
        return self.base - abs(self.amplitude) * self._extreme_sin(t0, t1, sign)

    def integral(self, s, t):
        if self.omega == 0:
            return self.value(s) * (t - s)
        return self.base * (t - s) - self.amplitude / self.omega * (
            math.cos(self.omega * t + self.phase) - math.cos(self.omega * s + self.phase))


@dataclass(frozen=True)
class Linear(Coefficient):
    """``slope * t + intercept`` on ``t >= 0`` (non-negative slope and intercept)."""

    intercept: float
    slope: float
    horizon: float = math.inf

    def __post_init__(self):
        if self.intercept < 0 or self.slope < 0:
            raise ValueError("linear coefficient must be non-negative on t >= 0")

    @property
    def sup(self):
        return self.intercept + self.slope * self.horizon if self.slope else self.intercept

    def value(self, t):
        return self.intercept + self.slope * t

    def bound(self, t0, t1):
        return self.value(t1)

    def integral(self, s, t):
        return self.intercept * (t - s) + 0.5 * self.slope * (t * t - s * s)

    def infimum(self, t0, t1, n=0):
        return self.value(t0)


class SpaceTimeCoefficient(Coefficient):
    """Arbitrary ``fn(t, pts) -> values`` with a declared sup norm."""

    spatially_constant = False

    def __init__(self, fn: Callable, sup: float, bound: Optional[Callable] = None):
        self.fn = fn
        self.sup = float(sup)
        self._bound = bound

    def __call__(self, t, pts):
        return np.asarray(self.fn(t, pts), dtype=float)

    def value(self, t):
        raise NotImplementedError("spatially varying coefficient has no scalar value")

    def bound(self, t0, t1):
        return self.sup if self._bound is None else float(self._bound(t0, t1))


def as_coefficient(c: Union[float, Coefficient]) -> Coefficient:
    return c if isinstance(c, Coefficient) else Constant(float(c))


# ---------------------------------------------------------------------------
# dispersal kernels
# ---------------------------------------------------------------------------


class Dispersal:
    """Probability density ``a_plus(t, x, y)`` of an offspring at ``y`` for a parent at ``x``."""

    dim: int = 2

    def density(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, t: float, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise SamplerUnavailable(f"{type(self).__name__} has no direct sampler")

    @property
    def has_direct_sampler(self) -> bool:
        return type(self).sample is not Dispersal.sample

    def normalization(self, t: float = 0.0, x=None) -> float:
        raise NotImplementedError


class RadialDispersal(Dispersal):
    """Translation-invariant, isotropic density ``g(|y - x|)``."""

    def radial(self, r: np.ndarray, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def density(self, t, x, y):
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return self.radial(np.sqrt(np.sum(u * u, axis=-1)), t)

    def normalization(self, t=0.0, x=None):
        d = self.dim
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        f = lambda r: area * r ** (d - 1) * float(self.radial(np.asarray(r), t))
        return scipy.integrate.quad(f, 0, np.inf, limit=400)[0]

    def __repr__(self):
        fields_ = ", ".join(f"{k}={v!r}" for k, v in vars(self).items())
        return f"{type(self).__name__}({fields_})"


class GaussianDispersal(RadialDispersal):
    def __init__(self, sigma: float, dim: int = 2, sigma_t: Optional[Coefficient] = None):
        self.sigma = float(sigma)
        self.dim = int(dim)
        self.sigma_t = sigma_t

    def _sigma(self, t):
        return self.sigma if self.sigma_t is None else self.sigma_t.value(t)

    def radial(self, r, t=0.0):
        s = self._sigma(t)
        return (2 * math.pi * s * s) ** (-self.dim / 2) * np.exp(-0.5 * (np.asarray(r) / s) ** 2)

    def sample(self, t, x, rng):
        return np.asarray(x, dtype=float) + self._sigma(t) * rng.standard_normal(self.dim)


class PowerLawDispersal(RadialDispersal):
    """Heavy-tailed density ``C (c + |u|^2)^(-alpha)`` with ``alpha > d / 2``.

    It coincides with a multivariate Student-t law with ``2 alpha - d`` degrees
    of freedom, which gives a direct sampler.
    """

    def __init__(self, c: float, alpha: float, dim: int = 2):
        if alpha <= dim / 2:
            raise ValueError("alpha must exceed d/2 for an integrable density")
        self.c = float(c)
        self.alpha = float(alpha)
        self.dim = int(dim)
        d = self.dim
        self.norm = math.exp(math.lgamma(alpha) - math.lgamma(alpha - d / 2)) / (
            math.pi ** (d / 2) * self.c ** (d / 2 - alpha))

    def radial(self, r, t=0.0):
        r = np.asarray(r, dtype=float)
        return self.norm * (self.c + r * r) ** (-self.alpha)

    def sample(self, t, x, rng):
        nu = 2 * self.alpha - self.dim
        scale = math.sqrt(self.c / nu)
        z = rng.standard_normal(self.dim)
        w = rng.chisquare(nu)
        return np.asarray(x, dtype=float) + scale * z / math.sqrt(w / nu)


class UniformBallDispersal(RadialDispersal):
    def __init__(self, radius: float, dim: int = 2):
        self.radius = float(radius)
        self.dim = int(dim)
        d = self.dim
        self.level = 1.0 / (math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius**d)

    def radial(self, r, t=0.0):
        return np.where(np.asarray(r) <= self.radius, self.level, 0.0)

    def sample(self, t, x, rng):
        z = rng.standard_normal(self.dim)
        z /= np.linalg.norm(z)
        return np.asarray(x, dtype=float) + self.radius * rng.random() ** (1 / self.dim) * z


class RejectionDispersal(Dispersal):
    """Density without a usable direct sampler, drawn by rejection.

    For a parent at ``x`` the envelope is ``mass * proposal(x, .)``; ``mass``
    defaults to a numerical sup of the density ratio (see :func:`envelope_mass`).
    """

    def __init__(self, target: Dispersal, proposal: Dispersal, mass: Optional[float] = None):
        self.target = target
        self.proposal = proposal
        self.dim = target.dim
        self.mass = envelope_mass(target, proposal) if mass is None else float(mass)
        self.stats = RejectionStats()

    def density(self, t, x, y):
        return self.target.density(t, x, y)

    def sample(self, t, x, rng):
        env = Envelope.from_dispersal(self.proposal, x, self.mass, t)
        return dispersal_sample(self.target, x, env, rng, t=t, stats=self.stats)

    def normalization(self, t=0.0, x=None):
        return self.target.normalization(t, x)

    def __repr__(self):
        return f"RejectionDispersal({self.target!r}, {self.proposal!r}, mass={self.mass!r})"


def envelope_mass(target: RadialDispersal, proposal: RadialDispersal, r_max: float = 1e6,
                  n: int = 20001, slack: float = 1e-6) -> float:
    """``sup_r target(r) / proposal(r)`` on a log-spaced radial grid, inflated by ``slack``."""
    r = np.concatenate([[0.0], np.geomspace(1e-6, r_max, n)])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = target.radial(r) / proposal.radial(r)
    ratio = ratio[np.isfinite(ratio)]
    return float(np.max(ratio)) * (1.0 + slack)


@dataclass
class Envelope:
    """Dominating function ``a_star(y) = mass * g(y)`` where ``g`` is a probability
    density with direct sampler ``sample(rng)``."""

    density: Callable[[np.ndarray], float]
    mass: float
    sample: Callable[[np.random.Generator], np.ndarray]

    @classmethod
    def from_dispersal(cls, disp: Dispersal, center, mass: float = 1.0, t: float = 0.0) -> "Envelope":
        center = np.asarray(center, dtype=float)
        return cls(lambda y: mass * float(disp.density(t, center, y)), mass,
                   lambda rng: disp.sample(t, center, rng))


@dataclass
class RejectionStats:
    proposed: int = 0
    accepted: int = 0

    @property
    def acceptance_ratio(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def dispersal_sample(a_plus: Dispersal, x, a_star: Optional[Envelope],
                     rng: np.random.Generator, t: float = 0.0,
                     stats: Optional[RejectionStats] = None) -> np.ndarray:
    """Draw ``y ~ a_plus(t, x, .)``.

    Uses the direct sampler when no envelope is given; otherwise proposes from
    the envelope and accepts with probability ``a_plus / a_star``. The expected
    acceptance ratio is ``1 / a_star.mass``.
    """
    if a_star is None:
        return a_plus.sample(t, x, rng)
    proposed = 0
    while True:
        y = np.asarray(a_star.sample(rng), dtype=float)
        proposed += 1
        env = a_star.density(y)
        val = float(a_plus.density(t, x, y))
        if val > env * (1 + 1e-12) + 1e-300:
            raise EnvelopeViolated(f"density {val!r} exceeds envelope {env!r} at {y.tolist()}")
        if rng.random() * env < val:
            break
    if stats is not None:
        stats.proposed += proposed
        stats.accepted += 1
    log.debug("dispersal rejection: accepted after %d proposals", proposed)
    return y


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------


def _sup(k: PairKernel) -> float:
    return float(getattr(k, "sup", math.inf))


def _is_zero(k: PairKernel) -> bool:
    return isinstance(k, ZeroKernel) or _sup(k) == 0.0


def _check_normalization(disp: Dispersal, t: float = 0.0):
    try:
        mass = disp.normalization(t)
    except NotImplementedError:
        return
    if abs(mass - 1.0) > 1e-6:
        raise ValueError(f"dispersal density integrates to {mass!r}, not 1")


@dataclass(frozen=True)
class BdlpParams:
    """Spatial branching with additive competition.

    Death of ``x``: ``m(t, x) + sum_{y != x} a_minus(x, y)``; branching of ``x``
    at rate ``lam(t, x)`` with offspring density ``a_plus(x, .)``.
    """

    m: Coefficient
    lam: Coefficient
    a_minus: PairKernel = field(default_factory=ZeroKernel)
    a_plus: Dispersal = field(default_factory=lambda: GaussianDispersal(1.0))
    dim: int = 2
    kind: str = field(default="bdlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "m", as_coefficient(self.m))
        object.__setattr__(self, "lam", as_coefficient(self.lam))
        _check_normalization(self.a_plus)

    @property
    def norms(self) -> dict:
        return {"m": self.m.sup, "lam": self.lam.sup, "a_minus": _sup(self.a_minus)}


@dataclass(frozen=True)
class DlParams:
    """Translation-invariant model whose branching rate carries facilitation ``b_plus``.

    ``b`` is the declared stability constant: ``E+(eta) <= b |eta| + E-(eta)``.
    """

    m: Coefficient
    lam: Coefficient
    a_minus: PairKernel = field(default_factory=ZeroKernel)
    b_plus: PairKernel = field(default_factory=ZeroKernel)
    a_plus: Dispersal = field(default_factory=lambda: GaussianDispersal(1.0))
    b: float = 0.0
    dim: int = 2
    kind: str = field(default="dl", init=False)

    def __post_init__(self):
        object.__setattr__(self, "m", as_coefficient(self.m))
        object.__setattr__(self, "lam", as_coefficient(self.lam))
        if not (self.m.spatially_constant and self.lam.spatially_constant):
            raise ValueError("Dieckmann-Law intensities m, lam depend on time only")
        if self.b < 0:
            raise ValueError("stability constant must be non-negative")
        _check_normalization(self.a_plus)

    @property
    def norms(self) -> dict:
        return {"m": self.m.sup, "lam": self.lam.sup, "a_minus": _sup(self.a_minus),
                "b_plus": _sup(self.b_plus)}

    def check_stability(self, configs: Sequence[Configuration]) -> float:
        """Estimate the stability constant on ``configs``; warn if ``b`` is too small."""
        b_hat = stability_estimate(self.a_minus, self.b_plus, configs)
        if b_hat > self.b + 1e-12:
            warnings.warn(f"declared stability constant b={self.b} is below the estimate {b_hat}")
        return b_hat


@dataclass(frozen=True)
class GdlParams:
    """Cluster-birth model: ``a_minus(t, u) = a_minus_t(t) * a_minus(u)``, likewise
    for ``b_plus``; each birth places ``k >= 1`` offspring i.i.d. from ``a_plus``."""

    m: Coefficient
    lam: Coefficient
    a_minus: PairKernel = field(default_factory=ZeroKernel)
    b_plus: PairKernel = field(default_factory=ZeroKernel)
    a_plus: Dispersal = field(default_factory=lambda: GaussianDispersal(1.0))
    a_minus_t: Coefficient = field(default_factory=lambda: Constant(1.0))
    b_plus_t: Coefficient = field(default_factory=lambda: Constant(1.0))
    dim: int = 2
    kind: str = field(default="gdl", init=False)

    def __post_init__(self):
        object.__setattr__(self, "m", as_coefficient(self.m))
        object.__setattr__(self, "lam", as_coefficient(self.lam))
        _check_normalization(self.a_plus)

    @property
    def norms(self) -> dict:
        return {"m": self.m.sup, "lam": self.lam.sup,
                "a_minus": self.a_minus_t.sup * _sup(self.a_minus),
                "b_plus": self.b_plus_t.sup * _sup(self.b_plus)}

    def check_domination(self, T: float = 10.0, n_t: int = 101, r_max: Optional[float] = None,
                         n_r: int = 401) -> float:
        """Largest ``b_plus(t, u) - a_minus(t, u)`` on a ``(t, |u|)`` grid; must be <= 0."""
        if r_max is None:
            radii = [k.radius for k in (self.a_minus, self.b_plus) if math.isfinite(k.radius)]
            r_max = max(radii) if radii else 10.0
        u = np.zeros((n_r, self.dim))
        u[:, 0] = np.linspace(0.0, r_max, n_r)
        origin = np.zeros(self.dim)
        worst = -math.inf
        for t in np.linspace(0.0, T, n_t):
            diff = (self.b_plus_t.value(t) * self.b_plus(origin, u)
                    - self.a_minus_t.value(t) * self.a_minus(origin, u))
            worst = max(worst, float(np.max(diff)))
        return worst


ModelParams = Union[BdlpParams, DlParams, GdlParams]


# ---------------------------------------------------------------------------
# per-particle event weights
# ---------------------------------------------------------------------------


def death_weights(p: ModelParams, t: float, eta: Configuration) -> np.ndarray:
    if len(eta) == 0:
        return np.empty(0)
    w = np.asarray(p.m(t, eta.points), dtype=float)
    if not _is_zero(p.a_minus):
        scale = p.a_minus_t.value(t) if isinstance(p, GdlParams) else 1.0
        w = w + scale * eta.pair_sums(p.a_minus)
    return w


def birth_weights(p: ModelParams, t: float, eta: Configuration, raw: bool = False) -> np.ndarray:
    """Branching rate per parent. For the cluster model ``raw=True`` gives the
    un-normalised intensity ``lam + sum b_plus`` before the ``(e-1)/e`` factor."""
    if len(eta) == 0:
        return np.empty(0)
    w = np.asarray(p.lam(t, eta.points), dtype=float)
    if isinstance(p, (DlParams, GdlParams)) and not _is_zero(p.b_plus):
        scale = p.b_plus_t.value(t) if isinstance(p, GdlParams) else 1.0
        w = w + scale * eta.pair_sums(p.b_plus)
    if isinstance(p, GdlParams) and not raw:
        w = CLUSTER_FACTOR * w
    return w


def _weight_bounds(p: ModelParams, t0: float, t1: float, eta: Configuration) -> float:
    n = len(eta)
    if n == 0:
        return 0.0
    total = n * (p.m.bound(t0, t1) + p.lam.bound(t0, t1) * (CLUSTER_FACTOR if isinstance(p, GdlParams) else 1.0))
    if not _is_zero(p.a_minus):
        scale = p.a_minus_t.bound(t0, t1) if isinstance(p, GdlParams) else 1.0
        total += scale * eta.energy(p.a_minus)
    if isinstance(p, (DlParams, GdlParams)) and not _is_zero(p.b_plus):
        scale = CLUSTER_FACTOR * p.b_plus_t.bound(t0, t1) if isinstance(p, GdlParams) else 1.0
        total += scale * eta.energy(p.b_plus)
    return float(total)


def total_rate(p: ModelParams, t: float, eta: Configuration) -> float:
    if len(eta) == 0:
        return 0.0
    return float(np.sum(death_weights(p, t, eta)) + np.sum(birth_weights(p, t, eta)))


def bdlp_total_rate(p: BdlpParams, t: float, eta: Configuration) -> float:
    """``sum m(t, x) + sum lam(t, x) + sum_x sum_{y != x} a_minus(x, y)``."""
    return total_rate(p, t, eta)


def dl_total_rate(p: DlParams, t: float, eta: Configuration) -> float:
    """``(m(t) + lam(t)) |eta| + E+(eta) + E-(eta)``."""
    return total_rate(p, t, eta)


def gdl_total_rate(p: GdlParams, t: float, eta: Configuration) -> float:
    """``sum m + (e-1)/e sum lam + E- + (e-1)/e E+``."""
    return total_rate(p, t, eta)


# ---------------------------------------------------------------------------
# event sampling
# ---------------------------------------------------------------------------


def _pick(weights: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(weights)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(k, len(weights) - 1)


def sample_offspring(p: ModelParams, t: float, x: np.ndarray, eta: Configuration,
                     rng: np.random.Generator) -> np.ndarray:
    """Positions of one offspring, resampled until distinct from ``eta``."""
    while True:
        y = p.a_plus.sample(t, x, rng)
        if eta.index_of(y) < 0:
            return y


def gdl_cluster_size(rng: np.random.Generator) -> int:
    """Zero-truncated Poisson(1): ``P(k) = (1/k!) / (e - 1)``, ``k >= 1``."""
    while True:
        k = int(rng.poisson(1.0))
        if k > 0:
            return k


def gdl_sample_cluster(p: GdlParams, t: float, x, rng: np.random.Generator,
                       eta: Optional[Configuration] = None) -> Configuration:
    """Offspring group of a parent at ``x``: ``k`` zero-truncated Poisson(1) points
    i.i.d. with density ``a_plus(t, x - .)``, distinct from each other and ``eta``."""
    x = np.asarray(x, dtype=float)
    k = gdl_cluster_size(rng)
    pts = []
    base = eta if eta is not None else Configuration.empty(p.dim)
    while len(pts) < k:
        y = 2 * x - p.a_plus.sample(t, x, rng)  # density a_plus(t, x - y)
        if base.index_of(y) >= 0 or any(np.sum((y - z) ** 2) < 1e-24 for z in pts):
            continue
        pts.append(y)
    return Configuration(np.array(pts), dim=p.dim)


def sample_event(p: ModelParams, t: float, eta: Configuration,
                 rng: np.random.Generator) -> Configuration:
    """One jump target: death of a particle or (cluster) birth from a parent,
    chosen with probability proportional to its rate."""
    d = death_weights(p, t, eta)
    b = birth_weights(p, t, eta)
    w = np.concatenate([d, b])
    if len(w) == 0 or w.sum() <= 0:
        raise ValueError("no event possible: total rate is zero")
    k = _pick(w, rng)
    n = len(eta)
    if k < n:
        return eta.remove_index(k)
    x = eta.points[k - n]
    if isinstance(p, GdlParams):
        cluster = gdl_sample_cluster(p, t, x, rng, eta)
        return eta.insert_many(cluster.points)
    return eta.insert(sample_offspring(p, t, x, eta, rng))


def bdlp_sample_event(p: BdlpParams, t, eta, rng) -> Configuration:
    return sample_event(p, t, eta, rng)


def dl_sample_event(p: DlParams, t, eta, rng) -> Configuration:
    return sample_event(p, t, eta, rng)


def gdl_sample_event(p: GdlParams, t, eta, rng) -> Configuration:
    return sample_event(p, t, eta, rng)


class ParticleKernel(JumpKernel):
    """Jump kernel of a particle model on configurations."""

    def __init__(self, params: ModelParams):
        self.params = params

    def total_rate(self, t, x):
        return total_rate(self.params, t, x)

    def rate_bound(self, t, x, window):
        return _weight_bounds(self.params, t, t + window, x)

    def sample_jump(self, t, x, rng):
        return sample_event(self.params, t, x, rng)

    def jump_measure(self, t, x):
        if len(x) and np.any(birth_weights(self.params, t, x) > 0):
            return None
        return [(float(w), x.remove_index(i)) for i, w in enumerate(death_weights(self.params, t, x)) if w > 0]

    def count_jump_rates(self, t, x):
        if len(x) == 0:
            return {}
        p = self.params
        out = {-1: float(np.sum(death_weights(p, t, x)))}
        if isinstance(p, GdlParams):
            B = float(np.sum(birth_weights(p, t, x, raw=True)))
            for k in range(1, GDL_MAX_CLUSTER + 1):
                out[k] = B / (E * math.factorial(k))
        else:
            out[1] = float(np.sum(birth_weights(p, t, x)))
        return out

    def is_absorbing(self, x):
        return len(x) == 0

    def lyapunov(self, x):
        return lyapunov_V(x)

    def describe(self):
        return {"kind": self.params.kind, "params": repr(self.params)}


# ---------------------------------------------------------------------------
# Lyapunov drift and reference constants
# ---------------------------------------------------------------------------


def lyapunov_drift(p: ModelParams, t: float, eta: Configuration) -> float:
    """Exact ``L(t)V(eta)`` for ``V = |eta| + |eta|^2``.

    V depends on the count only, so birth integrals reduce to counting:
    a single birth changes V by ``2n + 2`` and a death by ``-2n``. For cluster
    births the expected increment per unit of un-normalised intensity is
    ``(1/e) sum_k (k + 2nk + k^2) / k! = 2n + 3``.
    """
    n = len(eta)
    if n == 0:
        return 0.0
    D = float(np.sum(death_weights(p, t, eta)))
    if isinstance(p, GdlParams):
        B = float(np.sum(birth_weights(p, t, eta, raw=True)))
        return (2 * n + 3) * B - 2 * n * D
    B = float(np.sum(birth_weights(p, t, eta)))
    return (2 * n + 2) * B - 2 * n * D


def drift_constant(p: ModelParams, t: Optional[float] = None) -> float:
    """A constant ``c(t)`` with ``L(t)V <= c(t) V`` on every configuration.

    BDLP: ``max(|lam|, 2|a-| + 2|lam| + 2|m|)``.
    DL: ``2 (lam(t) + b + |b+|)`` (``lam(t)`` replaced by its sup when ``t`` is None).
    GDL: ``3 (|lam| + |b+|)``.
    """
    nm = p.norms
    if isinstance(p, BdlpParams):
        return max(nm["lam"], 2 * nm["a_minus"] + 2 * nm["lam"] + 2 * nm["m"])
    if isinstance(p, DlParams):
        lam = nm["lam"] if t is None else p.lam.value(t)
        return 2 * (lam + p.b + nm["b_plus"])
    return 3 * (nm["lam"] + nm["b_plus"])


def naive_drift_bound(p: Union[DlParams, GdlParams], t: float, n: int) -> float:
    """Closed-form candidate bound on ``L(t)V`` for the DL and GDL models at count ``n``.

    Kept for comparison only: it falls below the exact drift on some
    configurations, so it is not a valid bound (see :func:`drift_constant`).
    """
    nm = p.norms
    if isinstance(p, DlParams):
        lam, m = p.lam.value(t), p.m.value(t)
        return (n * (p.b + 2 * lam - m - nm["b_plus"])
                + n * n * (2 * lam + nm["b_plus"] + 2 * p.b - 2 * m))
    return 2 * (nm["lam"] + nm["m"]) * (n + n * n)


def rate_constant(p: ModelParams, T: float = math.inf) -> float:
    """``a(T)`` with ``q(t, eta) <= a(T) V(eta)`` for ``t <= T``."""
    nm = p.norms
    if isinstance(p, BdlpParams):
        return max(nm["m"] + nm["lam"], nm["a_minus"])
    if isinstance(p, DlParams):
        if math.isfinite(T):
            ml = max(p.m.value(r) + p.lam.value(r) for r in np.linspace(0, T, 1001))
        else:
            ml = nm["m"] + nm["lam"]
        return max(ml, nm["a_minus"] + nm["b_plus"])
    return max(nm["m"] + nm["lam"], nm["a_minus"] + nm["b_plus"])


def drift_integral(p: ModelParams, s: float, t: float) -> float:
    """``int_s^t c(r) dr`` for the constant of :func:`drift_constant`."""
    if isinstance(p, DlParams):
        return 2 * (p.lam.integral(s, t) + (p.b + p.norms["b_plus"]) * (t - s))
    return drift_constant(p) * (t - s)


# ---------------------------------------------------------------------------
# stability and count reductions
# ---------------------------------------------------------------------------


def stability_estimate(a_minus: PairKernel, b_plus: PairKernel,
                       sample_configs: Sequence[Configuration]) -> float:
    """Smallest ``b >= 0`` with ``E+(eta) <= b |eta| + E-(eta)`` on the samples."""
    if not sample_configs:
        raise ValueError("need at least one configuration")
    best = 0.0
    for eta in sample_configs:
        if len(eta) == 0:
            continue
        diff = eta.energy(b_plus) - eta.energy(a_minus)
        best = max(best, diff / len(eta))
    return best


@dataclass(frozen=True)
class CountJump:
    """Rate ``coef(t) * scale * n**power`` of the jump ``n -> n + size``."""

    size: int
    coef: Coefficient
    scale: float = 1.0
    power: int = 1

    def multiplicity(self, n):
        n = np.asarray(n, dtype=float)
        return self.scale * n**self.power if self.power else self.scale * np.ones_like(n)

    def rate(self, t, n):
        return self.coef.value(t) * self.multiplicity(n)


class CountModel(JumpKernel):
    """Pure count process on ``{0, 1, 2, ...}`` built from :class:`CountJump` terms."""

    def __init__(self, jumps: Sequence[CountJump], name: str = "count"):
        self.jumps = tuple(jumps)
        self.name = name

    def total_rate(self, t, x):
        return float(sum(j.rate(t, x) for j in self.jumps if x + j.size >= 0))

    def rate_bound(self, t, x, window):
        return float(sum(j.coef.bound(t, t + window) * j.multiplicity(x)
                         for j in self.jumps if x + j.size >= 0))

    def rates(self, t, x) -> dict:
        out: dict[int, float] = {}
        for j in self.jumps:
            if x + j.size >= 0:
                r = float(j.rate(t, x))
                if r > 0:
                    out[x + j.size] = out.get(x + j.size, 0.0) + r
        return out

    def sample_jump(self, t, x, rng):
        table = self.rates(t, x)
        targets = list(table)
        return targets[_pick(np.fromiter(table.values(), float, len(targets)), rng)]

    def jump_measure(self, t, x):
        return [(r, y) for y, r in self.rates(t, x).items()]

    def count_jump_rates(self, t, x):
        return {y - x: r for y, r in self.rates(t, x).items()}

    def is_absorbing(self, x):
        return all(float(j.multiplicity(x)) == 0.0 or j.coef.sup == 0.0 or x + j.size < 0
                   for j in self.jumps)

    def lyapunov(self, x):
        return lyapunov_V(int(x))

    def encode_state(self, x):
        return int(x)

    def sup_rates(self, cut: int) -> np.ndarray:
        n = np.arange(cut)
        return sum(j.coef.sup * j.multiplicity(n) for j in self.jumps)

    def finite_kernel(self, cut: int, boundary: str = "reflect") -> FiniteKernel:
        """Truncation to ``{0, .., cut - 1}`` for the series solver."""
        jumps: dict[int, Callable] = {}
        for j in self.jumps:
            prev = jumps.get(j.size)
            fn = j.rate if prev is None else (lambda t, n, a=prev, b=j.rate: a(t, n) + b(t, n))
            jumps[j.size] = fn
        k = FiniteKernel.count_process(cut, jumps, boundary=boundary, name=self.name)
        k.time_constant = all(isinstance(j.coef, Constant) for j in self.jumps)
        return k

    def describe(self):
        return {"kind": "count", "name": self.name,
                "jumps": [(j.size, repr(j.coef), j.scale, j.power) for j in self.jumps]}


def immigration_death(beta: Union[float, Coefficient], delta: Union[float, Coefficient]) -> CountModel:
    """Arrivals at rate ``beta(t)``, each individual dies at rate ``delta(t)``."""
    return CountModel([CountJump(+1, as_coefficient(beta), 1.0, 0),
                       CountJump(-1, as_coefficient(delta), 1.0, 1)], name="immigration_death")


GDL_MAX_CLUSTER = 20


def meanfield_reduction(p: ModelParams, t: float, n: int) -> dict[int, float]:
    """Jump rates ``{n': rate}`` of the count ``|eta|`` for spatially constant,
    non-interacting models."""
    return count_model(p).rates(t, n)


def count_model(p: ModelParams) -> CountModel:
    """The count process ``|eta_t|`` as a :class:`CountModel`.

    Raises :class:`NotReducible` when interactions or spatially varying
    coefficients make the count non-Markovian.
    """
    if not (p.m.spatially_constant and p.lam.spatially_constant):
        raise NotReducible("coefficients vary in space")
    if not _is_zero(p.a_minus):
        raise NotReducible("competition kernel is non-zero")
    if isinstance(p, (DlParams, GdlParams)) and not _is_zero(p.b_plus):
        raise NotReducible("facilitation kernel is non-zero")
    jumps = [CountJump(-1, p.m, 1.0, 1)]
    if isinstance(p, GdlParams):
        for k in range(1, GDL_MAX_CLUSTER + 1):
            jumps.append(CountJump(k, p.lam, 1.0 / (E * math.factorial(k)), 1))
    else:
        jumps.append(CountJump(+1, p.lam, 1.0, 1))
    return CountModel(jumps, name=f"{p.kind}_count")
