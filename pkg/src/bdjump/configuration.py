"""Finite point configurations in R^d and Lebesgue-Poisson calculus.

A :class:`Configuration` is an immutable finite set of distinct points.
Mutating operations (:meth:`Configuration.insert`, :meth:`Configuration.remove`)
return new objects, so configurations can be shared between workers.
Pair sums over translation-invariant kernels are accelerated by a uniform
spatial hash whose cell size equals the kernel's cutoff radius.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DuplicatePoint, MissingPoint, SamplerUnavailable, TooLarge

#: Points closer than this are considered identical.
SEPARATION_TOL = 1e-12

#: Hash pair sums are only used above this size when ``method="auto"``.
HASH_THRESHOLD = 64

MAX_ENUMERATION = 12


# ---------------------------------------------------------------------------
# pair kernels
# ---------------------------------------------------------------------------


class PairKernel:
    """Non-negative pair interaction ``a(x, y)`` with a cutoff radius.

    Subclasses implement :meth:`__call__` vectorised over the second argument.
    ``radius`` is the distance beyond which the kernel vanishes (or is below
    the declared tail tolerance); ``math.inf`` disables spatial hashing.
    """

    radius: float = math.inf
    sup: float = math.inf

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RadialKernel(PairKernel):
    """Translation- and rotation-invariant kernel ``a(x, y) = amplitude * g(|x - y|)``."""

    def __init__(self, amplitude: float):
        if amplitude < 0:
            raise ValueError("kernel amplitude must be non-negative")
        self.amplitude = float(amplitude)

    def profile(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def sup(self) -> float:
        return self.amplitude

    def __call__(self, x, y):
        u = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        r = np.sqrt(np.sum(u * u, axis=-1))
        return self.amplitude * self.profile(r)

    def __repr__(self):
        fields = ", ".join(f"{k}={v!r}" for k, v in vars(self).items())
        return f"{type(self).__name__}({fields})"


class ZeroKernel(RadialKernel):
    def __init__(self):
        super().__init__(0.0)

    radius = 0.0

    def profile(self, r):
        return np.zeros_like(r)


class IndicatorKernel(RadialKernel):
    """``amplitude * 1{|x - y| <= R}``."""

    def __init__(self, amplitude: float, R: float):
        super().__init__(amplitude)
        self.R = float(R)
        self.radius = self.R

    def profile(self, r):
        return (r <= self.R).astype(float)


class GaussianKernel(RadialKernel):
    """``amplitude * exp(-|u|^2 / (2 sigma^2))`` truncated where it drops below
    ``tail_tol`` relative to its peak."""

    def __init__(self, amplitude: float, sigma: float, tail_tol: float = 1e-16):
        super().__init__(amplitude)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.tail_tol = float(tail_tol)
        self.radius = self.sigma * math.sqrt(-2.0 * math.log(tail_tol))

    def profile(self, r):
        return np.exp(-0.5 * (r / self.sigma) ** 2)


class PowerLawKernel(RadialKernel):
    """``amplitude * (c / (c + |u|^2))^alpha``; no compact support."""

    def __init__(self, amplitude: float, c: float, alpha: float, tail_tol: float = 1e-16):
        super().__init__(amplitude)
        self.c = float(c)
        self.alpha = float(alpha)
        self.tail_tol = float(tail_tol)
        # (c / (c + R^2))^alpha = tail_tol
        self.radius = math.sqrt(self.c * (tail_tol ** (-1.0 / self.alpha) - 1.0))

    def profile(self, r):
        return (self.c / (self.c + r * r)) ** self.alpha


# ---------------------------------------------------------------------------
# spatial hash
# ---------------------------------------------------------------------------


class _SpatialHash:
    """Uniform grid with cell side ``cell``; maps integer cell keys to indices."""

    def __init__(self, points: np.ndarray, cell: float):
        self.cell = cell
        self.dim = points.shape[1]
        keys = np.floor(points / cell).astype(np.int64)
        self.keys = keys
        buckets: dict[tuple, list[int]] = {}
        for i, k in enumerate(map(tuple, keys)):
            buckets.setdefault(k, []).append(i)
        self.buckets = {k: np.asarray(v, dtype=np.intp) for k, v in buckets.items()}
        self.offsets = list(itertools.product((-1, 0, 1), repeat=self.dim))

    def candidates(self, x: np.ndarray) -> np.ndarray:
        base = np.floor(np.asarray(x) / self.cell).astype(np.int64)
        found = []
        for off in self.offsets:
            idx = self.buckets.get(tuple(base + off))
            if idx is not None:
                found.append(idx)
        if not found:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(found)


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------


class Configuration:
    """A finite set of distinct points in R^d.

    Parameters
    ----------
    points : array_like, shape (n, d)
        Particle positions. Rows closer than ``SEPARATION_TOL`` are rejected.
    dim : int, optional
        Ambient dimension; required when ``points`` is empty.
    """

    __slots__ = ("dim", "_points", "_hashes", "_pair_cache", "_key")

    def __init__(self, points=(), dim: Optional[int] = None, *, _trusted: bool = False):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            if dim is None:
                dim = pts.shape[1] if pts.ndim == 2 else 2
            pts = np.empty((0, dim))
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if dim is not None and pts.shape[1] != dim:
            raise ValueError(f"points have dimension {pts.shape[1]}, expected {dim}")
        self.dim = int(pts.shape[1])
        if not _trusted:
            if not np.all(np.isfinite(pts)):
                raise ValueError("points must be finite")
            _check_distinct(pts)
            pts = pts.copy()
        pts.setflags(write=False)
        self._points = pts
        self._hashes: dict[float, _SpatialHash] = {}
        self._pair_cache: dict[int, tuple[PairKernel, np.ndarray]] = {}
        self._key = None

    @classmethod
    def empty(cls, dim: int = 2) -> "Configuration":
        return cls(np.empty((0, dim)), dim=dim, _trusted=True)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._points)

    def __repr__(self) -> str:
        return f"Configuration(n={len(self)}, dim={self.dim})"

    def _sorted_key(self):
        if self._key is None:
            pts = self._points
            order = np.lexsort(pts.T[::-1]) if len(pts) else np.empty(0, dtype=int)
            self._key = (self.dim, pts[order].tobytes())
        return self._key

    def __eq__(self, other) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return self._sorted_key() == other._sorted_key()

    def __hash__(self) -> int:
        return hash(self._sorted_key())

    # -- mutation (returns new objects) --------------------------------------

    def index_of(self, x) -> int:
        """Index of the stored point within ``SEPARATION_TOL`` of ``x``, or -1."""
        if len(self) == 0:
            return -1
        d2 = np.sum((self._points - np.asarray(x, dtype=float)) ** 2, axis=1)
        i = int(np.argmin(d2))
        return i if d2[i] < SEPARATION_TOL**2 else -1

    def insert(self, x) -> "Configuration":
        x = np.asarray(x, dtype=float).reshape(self.dim)
        if self.index_of(x) >= 0:
            raise DuplicatePoint(f"point {x.tolist()} already present")
        return Configuration(np.vstack([self._points, x]), dim=self.dim, _trusted=True)

    def insert_many(self, xs) -> "Configuration":
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        pts = np.vstack([self._points, xs])
        _check_distinct(pts)
        return Configuration(pts, dim=self.dim, _trusted=True)

    def remove(self, x) -> "Configuration":
        i = self.index_of(x)
        if i < 0:
            raise MissingPoint(f"point {np.asarray(x).tolist()} not present")
        return self.remove_index(i)

    def remove_index(self, i: int) -> "Configuration":
        pts = np.delete(self._points, i, axis=0)
        return Configuration(pts, dim=self.dim, _trusted=True)

    # -- pair sums ------------------------------------------------------------

    def spatial_hash(self, cell: float) -> _SpatialHash:
        grid = self._hashes.get(cell)
        if grid is None:
            grid = _SpatialHash(self._points, cell)
            self._hashes[cell] = grid
        return grid

    def pair_sum(self, kernel: PairKernel, x, method: str = "auto") -> float:
        """``sum_{y in eta minus x} a(x, y)`` for an arbitrary point ``x``."""
        x = np.asarray(x, dtype=float).reshape(self.dim)
        if len(self) == 0:
            return 0.0
        if _use_hash(kernel, len(self), method):
            idx = self.spatial_hash(kernel.radius).candidates(x)
            pts = self._points[idx]
        else:
            pts = self._points
        d2 = np.sum((pts - x) ** 2, axis=1)
        pts = pts[d2 >= SEPARATION_TOL**2]
        if len(pts) == 0:
            return 0.0
        return float(np.sum(kernel(x, pts)))

    def pair_sums(self, kernel: PairKernel, method: str = "auto") -> np.ndarray:
        """Per-particle sums ``s_i = sum_{j != i} a(x_i, x_j)``, cached per kernel."""
        cached = self._pair_cache.get(id(kernel))
        if cached is not None and cached[0] is kernel and method == "auto":
            return cached[1]
        n = len(self)
        pts = self._points
        if n < 2 or kernel.radius == 0.0:
            out = np.zeros(n)
        elif _use_hash(kernel, n, method):
            grid = self.spatial_hash(kernel.radius)
            out = np.empty(n)
            for i in range(n):
                idx = grid.candidates(pts[i])
                idx = idx[idx != i]
                out[i] = np.sum(kernel(pts[i], pts[idx])) if len(idx) else 0.0
        else:
            vals = kernel(pts[:, None, :], pts[None, :, :])
            np.fill_diagonal(vals, 0.0)
            out = vals.sum(axis=1)
        out.setflags(write=False)
        if method == "auto":
            self._pair_cache[id(kernel)] = (kernel, out)
        return out

    def energy(self, kernel: PairKernel, method: str = "auto") -> float:
        """Double sum ``sum_x sum_{y != x} a(x, y)``."""
        return float(np.sum(self.pair_sums(kernel, method)))

    # -- serialisation --------------------------------------------------------

    def to_list(self) -> list:
        return self._points.tolist()

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_json(cls, text: str, dim: Optional[int] = None) -> "Configuration":
        return cls(json.loads(text), dim=dim)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{k + 1}" for k in range(self.dim)])
        writer.writerows(self._points.tolist())
        return buf.getvalue()


def _use_hash(kernel: PairKernel, n: int, method: str) -> bool:
    if method == "brute":
        return False
    finite = math.isfinite(kernel.radius) and kernel.radius > 0
    if method == "hash":
        if not finite:
            raise ValueError("spatial hashing needs a finite positive cutoff radius")
        return True
    return finite and n > HASH_THRESHOLD


def _check_distinct(pts: np.ndarray) -> None:
    n = len(pts)
    if n < 2:
        return
    if n <= 512:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        d2[np.diag_indices(n)] = np.inf
        bad = np.argwhere(d2 < SEPARATION_TOL**2)
        if len(bad):
            raise DuplicatePoint(f"points {bad[0].tolist()} coincide")
    else:
        from scipy.spatial import cKDTree

        pairs = cKDTree(pts).query_pairs(SEPARATION_TOL)
        if pairs:
            raise DuplicatePoint(f"points {sorted(pairs)[0]} coincide")


def brute_force_pair_sums(config: Configuration, kernel: PairKernel) -> np.ndarray:
    """Plain double loop; reference for the vectorised and hashed paths."""
    pts = config.points
    out = np.zeros(len(pts))
    for i in range(len(pts)):
        for j in range(len(pts)):
            if i != j:
                out[i] += float(kernel(pts[i], pts[j][None, :])[0])
    return out


def lyapunov_V(config) -> float:
    """``|eta| + |eta|^2``; accepts a configuration or a plain count."""
    n = config if isinstance(config, (int, np.integer)) else len(config)
    return float(n + n * n)


# ---------------------------------------------------------------------------
# Lebesgue-Poisson calculus
# ---------------------------------------------------------------------------


def e_lambda(f: Callable[[np.ndarray], np.ndarray], config: Configuration) -> float:
    """Lebesgue-Poisson exponential: product of ``f`` over the points (1 on the
    empty configuration). ``f`` maps an ``(n, d)`` array to ``n`` values."""
    if len(config) == 0:
        return 1.0
    return float(np.prod(np.asarray(f(config.points), dtype=float)))


def subsets(config: Configuration) -> Iterator[tuple[Configuration, Configuration]]:
    """All ordered splits ``(xi, eta \\ xi)`` of the configuration."""
    n = len(config)
    if n > MAX_ENUMERATION:
        raise TooLarge(f"subset enumeration limited to {MAX_ENUMERATION} points, got {n}")
    pts = config.points
    for mask in range(1 << n):
        sel = np.array([(mask >> k) & 1 for k in range(n)], dtype=bool)
        yield (
            Configuration(pts[sel], dim=config.dim, _trusted=True),
            Configuration(pts[~sel], dim=config.dim, _trusted=True),
        )


@dataclass(frozen=True)
class ProductForm:
    """``G(xi, zeta) = e_lambda(g; xi) * e_lambda(h; zeta)``."""

    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]

    def __call__(self, xi: Configuration, zeta: Configuration) -> float:
        return e_lambda(self.g, xi) * e_lambda(self.h, zeta)


def subset_sum_check(G: ProductForm, config: Configuration) -> tuple[float, float]:
    """Compare ``sum_{xi subset eta} G(xi, eta \\ xi)`` by enumeration with the
    closed form ``e_lambda(g + h; eta)``."""
    if len(config) > MAX_ENUMERATION:
        raise TooLarge(f"subset enumeration limited to {MAX_ENUMERATION} points")
    if not (hasattr(G, "g") and hasattr(G, "h")):
        raise TypeError("G must be of product form (expose g and h)")
    lhs = math.fsum(G(xi, rest) for xi, rest in subsets(config))
    rhs = e_lambda(lambda p: np.asarray(G.g(p)) + np.asarray(G.h(p)), config)
    return lhs, rhs


class IntensityFunction:
    """Density ``f`` on R^d with finite mass, used to sample Poisson point processes.

    Exactly one of ``sampler`` (direct: ``sampler(n, rng) -> (n, d)`` positions
    distributed as ``f / total_mass``) or ``box`` plus ``f_max`` (rejection from
    the uniform law on the box) should be supplied.
    """

    def __init__(self, density, total_mass: float, dim: int, sampler=None,
                 box: Optional[tuple[Sequence[float], Sequence[float]]] = None,
                 f_max: Optional[float] = None):
        if not (math.isfinite(total_mass) and total_mass >= 0):
            raise ValueError("total mass must be finite and non-negative")
        self.density = density
        self.total_mass = float(total_mass)
        self.dim = int(dim)
        self.sampler = sampler
        self.box = None if box is None else (np.asarray(box[0], float), np.asarray(box[1], float))
        self.f_max = f_max

    @classmethod
    def uniform_box(cls, lo, hi, mass: float) -> "IntensityFunction":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        vol = float(np.prod(hi - lo))
        level = mass / vol

        def density(p):
            p = np.atleast_2d(p)
            inside = np.all((p >= lo) & (p <= hi), axis=1)
            return np.where(inside, level, 0.0)

        def sampler(n, rng):
            return lo + (hi - lo) * rng.random((n, len(lo)))

        return cls(density, mass, len(lo), sampler=sampler)

    @classmethod
    def gaussian(cls, center, sigma: float, mass: float) -> "IntensityFunction":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        d = len(center)
        norm = (2 * math.pi * sigma**2) ** (-d / 2)

        def density(p):
            u = np.atleast_2d(p) - center
            return mass * norm * np.exp(-0.5 * np.sum(u * u, axis=1) / sigma**2)

        def sampler(n, rng):
            return center + sigma * rng.standard_normal((n, d))

        return cls(density, mass, d, sampler=sampler)

    def sample_positions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.sampler is not None:
            return np.asarray(self.sampler(n, rng), dtype=float).reshape(n, self.dim)
        if self.box is None or self.f_max is None:
            raise SamplerUnavailable("intensity has neither a direct sampler nor a rejection envelope")
        lo, hi = self.box
        out = np.empty((n, self.dim))
        filled = 0
        while filled < n:
            prop = lo + (hi - lo) * rng.random((max(n - filled, 16), self.dim))
            accept = rng.random(len(prop)) * self.f_max < self.density(prop)
            take = prop[accept][: n - filled]
            out[filled:filled + len(take)] = take
            filled += len(take)
        return out


def sample_poisson_pp(intensity: IntensityFunction, rng: np.random.Generator) -> Configuration:
    """Poisson point process with intensity ``f``: ``Poisson(total_mass)`` points,
    i.i.d. with density ``f / total_mass``."""
    if intensity.sampler is None and (intensity.box is None or intensity.f_max is None):
        raise SamplerUnavailable("intensity has neither a direct sampler nor a rejection envelope")
    n = int(rng.poisson(intensity.total_mass))
    if n == 0:
        return Configuration.empty(intensity.dim)
    pts = intensity.sample_positions(n, rng)
    # coincident draws have probability zero; redraw if floating point produces one
    while True:
        try:
            _check_distinct(pts)
            break
        except DuplicatePoint:
            pts = intensity.sample_positions(n, rng)
    return Configuration(pts, dim=intensity.dim, _trusted=True)
