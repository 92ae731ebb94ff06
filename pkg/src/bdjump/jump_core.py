"""Exact path simulation for time-inhomogeneous pure jump processes.

Paths are sampled by thinning: on a lookahead window ``[t, t + w]`` the kernel
supplies a constant rate dominating its total rate, candidate times are
proposed at that rate and accepted with probability ``q(s, x) / bound``.
The bound is re-derived after every jump and every window expiry, so
continuous-in-time rates are handled without discretisation bias.
"""

from __future__ import annotations

import bisect
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import BoundViolated

HORIZON_REACHED = "horizon_reached"
ABSORBED = "absorbed"
CAP_EXCEEDED = "cap_exceeded"

_BOUND_RTOL = 1e-9


class JumpKernel:
    """Interface every jump mechanism implements.

    Required: :meth:`total_rate`, :meth:`rate_bound`, :meth:`sample_jump`.
    The remaining hooks have usable defaults.
    """

    def total_rate(self, t: float, x) -> float:
        raise NotImplementedError

    def rate_bound(self, t: float, x, window: float) -> float:
        """A value dominating ``total_rate(s, x)`` for all ``s`` in ``[t, t + window]``."""
        raise NotImplementedError

    def sample_jump(self, t: float, x, rng: np.random.Generator):
        """Draw a target from ``Q(t, x, .) / q(t, x)``; never returns ``x``."""
        raise NotImplementedError

    def jump_measure(self, t: float, x) -> Optional[list[tuple[float, Any]]]:
        """``[(rate, target), ...]`` when ``Q(t, x, .)`` is finitely supported, else ``None``."""
        return None

    def count_jump_rates(self, t: float, x) -> Optional[dict[int, float]]:
        """``{k: rate}`` of jumps changing ``len(x)`` by ``k``, if available.

        Lets :func:`evaluate_generator` treat :class:`CountFunctional` exactly
        even when ``Q(t, x, .)`` is diffuse.
        """
        return None

    def is_absorbing(self, x) -> bool:
        """True if ``q(t, x) = 0`` for every ``t``."""
        return False

    def lyapunov(self, x) -> float:
        return 0.0

    def encode_state(self, x):
        if hasattr(x, "to_list"):
            return x.to_list()
        if isinstance(x, np.integer):
            return int(x)
        return x

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class TableKernel(JumpKernel):
    """Kernel with finitely supported jumps given as ``rates(t, x) -> {target: rate}``.

    ``bound(t, x, window)`` must dominate the total rate on the window; when
    omitted, ``sup_rate(x)`` (a time-uniform bound) is used instead.
    """

    def __init__(self, rates: Callable, bound: Optional[Callable] = None,
                 sup_rate: Optional[Callable] = None, absorbing: Optional[Callable] = None):
        if bound is None and sup_rate is None:
            raise ValueError("either a windowed bound or a sup rate is required")
        self._rates = rates
        self._bound = bound
        self._sup = sup_rate
        self._absorbing = absorbing

    def rates(self, t, x) -> dict:
        return {y: r for y, r in self._rates(t, x).items() if r > 0 and y != x}

    def total_rate(self, t, x):
        return float(sum(self.rates(t, x).values()))

    def rate_bound(self, t, x, window):
        if self._bound is not None:
            return float(self._bound(t, x, window))
        return float(self._sup(x))

    def sample_jump(self, t, x, rng):
        table = self.rates(t, x)
        targets = list(table)
        w = np.fromiter(table.values(), dtype=float, count=len(targets))
        u = rng.random() * w.sum()
        k = int(np.searchsorted(np.cumsum(w), u, side="right"))
        return targets[min(k, len(targets) - 1)]

    def jump_measure(self, t, x):
        return [(r, y) for y, r in self.rates(t, x).items()]

    def is_absorbing(self, x):
        return bool(self._absorbing(x)) if self._absorbing is not None else False

    def lyapunov(self, x):
        n = float(x)
        return n + n * n


@dataclass(frozen=True)
class SimOptions:
    horizon: float
    seed: int = 0
    max_events: int = 1_000_000
    lyapunov_cap: float = math.inf
    lookahead_window: float = 1.0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.max_events > 0:
            raise ValueError("max_events must be positive")
        if not self.lookahead_window > 0:
            raise ValueError("lookahead_window must be positive")


@dataclass
class Trajectory:
    """One realised path: start point, jump events and how the run ended."""

    start_time: float
    start_state: Any
    end_time: float
    events: list = field(default_factory=list)
    terminated: str = HORIZON_REACHED

    @property
    def times(self) -> list[float]:
        return [e[0] for e in self.events]

    @property
    def final_state(self):
        return self.events[-1][1] if self.events else self.start_state

    def state_at(self, t: float):
        """State at time ``t`` (right-continuous paths)."""
        if t < self.start_time:
            raise ValueError("time precedes the start of the trajectory")
        k = bisect.bisect_right(self.times, t)
        return self.start_state if k == 0 else self.events[k - 1][1]

    def segments(self):
        """Yield ``(a, b, state)`` holding intervals covering ``[start_time, end_time]``."""
        t, x = self.start_time, self.start_state
        for tau, y in self.events:
            yield t, tau, x
            t, x = tau, y
        yield t, self.end_time, x

    def to_jsonl(self, encode=None, header: Optional[dict] = None) -> str:
        encode = encode or _default_encode
        head = dict(header or {})
        head.update(start_time=self.start_time, end_time=self.end_time,
                    start_state=encode(self.start_state), terminated=self.terminated,
                    n_events=len(self.events))
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps({"t": t, "state": encode(x)}) for t, x in self.events]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, decode=None) -> tuple["Trajectory", dict]:
        decode = decode or (lambda s: s)
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        head = rows[0]
        traj = cls(head["start_time"], decode(head["start_state"]), head["end_time"],
                   [(r["t"], decode(r["state"])) for r in rows[1:]], head["terminated"])
        return traj, head


def _default_encode(x):
    if hasattr(x, "to_list"):
        return x.to_list()
    if isinstance(x, np.integer):
        return int(x)
    return x


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, reproducible stream for replicate ``index`` of master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def next_jump(kernel: JumpKernel, t: float, x, rng: np.random.Generator,
              horizon: float, window: float = 1.0):
    """First jump after ``t`` as ``(tau, y)``, or ``None`` if none occurs before ``horizon``."""
    while t < horizon:
        limit = min(t + window, horizon)
        bound = kernel.rate_bound(t, x, window)
        if bound <= 0.0:
            t = limit
            continue
        cand = t + rng.exponential(1.0 / bound)
        if cand > limit:
            t = limit
            continue
        q = kernel.total_rate(cand, x)
        if q > bound * (1.0 + _BOUND_RTOL):
            raise BoundViolated(f"total rate {q!r} exceeds thinning bound {bound!r} at t={cand!r}")
        if rng.random() * bound < q:
            return cand, kernel.sample_jump(cand, x, rng)
        t = cand
    return None


def simulate_path(kernel: JumpKernel, x0, s: float, opts: SimOptions,
                  rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Sample a path on ``[s, opts.horizon]`` starting from ``x0`` at time ``s``.

    A path stops early with ``cap_exceeded`` when it reaches ``max_events``
    jumps or its Lyapunov value exceeds ``lyapunov_cap``. A path that jumps into
    a state the kernel declares absorbing ends with ``absorbed``; a path that
    starts in such a state simply reaches the horizon.
    """
    if s < 0:
        raise ValueError("start time must be non-negative")
    if rng is None:
        rng = np.random.default_rng(opts.seed)
    traj = Trajectory(s, x0, opts.horizon)
    t, x = s, x0
    if kernel.is_absorbing(x):
        return traj
    while True:
        nxt = next_jump(kernel, t, x, rng, opts.horizon, opts.lookahead_window)
        if nxt is None:
            break
        t, x = nxt
        traj.events.append((t, x))
        if len(traj.events) >= opts.max_events or kernel.lyapunov(x) > opts.lyapunov_cap:
            traj.terminated = CAP_EXCEEDED
            traj.end_time = t
            break
        if kernel.is_absorbing(x):
            traj.terminated = ABSORBED
            break
    return traj


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def _run_chunk(task, seed, indices):
    return [task(replicate_rng(seed, i), i) for i in indices]


def run_replicates(task: Callable[[np.random.Generator, int], Any], replicates: int,
                   seed: int, workers: int = 1) -> list:
    """Evaluate ``task(rng, i)`` for ``i < replicates``; results ordered by index.

    With ``workers > 1`` chunks run in a process pool, so ``task`` must be
    picklable. Streams depend only on ``(seed, i)``, hence the output does not
    depend on ``workers``.
    """
    if workers <= 1 or replicates < 2 * workers:
        return _run_chunk(task, seed, range(replicates))
    chunks = np.array_split(np.arange(replicates), workers * 4)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(partial(_run_chunk, task, seed), [c.tolist() for c in chunks])
        return [r for part in parts for r in part]


class Estimate(NamedTuple):
    mean: float
    stderr: float
    capped: int = 0
    n: int = 0


def summarize(values: Sequence[float], capped: int = 0) -> Estimate:
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise ValueError("need at least two values")
    return Estimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), capped, len(v))


def _endpoint_value(kernel, x0, s, opts, F, rng, i):
    traj = simulate_path(kernel, x0, s, opts, rng)
    return F(traj.state_at(opts.horizon)), traj.terminated == CAP_EXCEEDED


def ensemble_expectation(kernel: JumpKernel, x0, s: float, t: float, F: Callable,
                         replicates: int, seed: int = 0, opts: Optional[SimOptions] = None,
                         workers: int = 1) -> Estimate:
    """Monte Carlo estimate of ``E[F(X(t)) | X(s) = x0]``.

    Capped paths contribute their last state and are counted in ``capped``.
    """
    if replicates < 2:
        raise ValueError("replicates must be at least 2")
    if t == s:
        v = float(F(x0))
        return Estimate(v, 0.0, 0, replicates)
    base = opts or SimOptions(horizon=t, seed=seed)
    opts = SimOptions(t, seed, base.max_events, base.lyapunov_cap, base.lookahead_window)
    task = partial(_endpoint_value, kernel, x0, s, opts, F)
    out = run_replicates(_Task(task), replicates, seed, workers)
    vals = [v for v, _ in out]
    return summarize(vals, sum(c for _, c in out))


class _Task:
    """Picklable wrapper turning ``f(rng, i)`` partials into pool tasks."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, rng, i):
        return self.fn(rng, i)


# ---------------------------------------------------------------------------
# generator and martingale residual
# ---------------------------------------------------------------------------


class CountFunctional:
    """``F(x) = fn(len(x))``; a marker that lets kernels sum the generator exactly."""

    def __init__(self, fn: Callable[[int], float], name: str = ""):
        self.fn = fn
        self.name = name

    def __call__(self, x) -> float:
        return float(self.fn(_count(x)))

    def __repr__(self):
        return f"CountFunctional({self.name or self.fn!r})"


def _count(x) -> int:
    return int(x) if isinstance(x, (int, np.integer)) else len(x)


def evaluate_generator(kernel: JumpKernel, F: Callable, t: float, x,
                       mc_samples: int = 1000,
                       rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """``L(t)F(x) = int (F(y) - F(x)) Q(t, x, dy)`` with its standard error.

    Exact (stderr 0) when the kernel exposes a finite jump measure, otherwise
    ``q(t, x)`` times the Monte Carlo mean over ``sample_jump`` draws.
    """
    fx = F(x)
    if isinstance(F, CountFunctional):
        table = kernel.count_jump_rates(t, x)
        if table is not None:
            n = _count(x)
            return float(math.fsum(r * (F.fn(n + k) - fx) for k, r in table.items())), 0.0
    measure = kernel.jump_measure(t, x)
    if measure is not None:
        return float(math.fsum(r * (F(y) - fx) for r, y in measure)), 0.0
    q = kernel.total_rate(t, x)
    if q == 0.0:
        return 0.0, 0.0
    if rng is None:
        rng = np.random.default_rng()
    diffs = np.array([F(kernel.sample_jump(t, x, rng)) - fx for _ in range(mc_samples)], dtype=float)
    err = q * diffs.std(ddof=1) / math.sqrt(mc_samples) if mc_samples > 1 else 0.0
    return float(q * diffs.mean()), float(err)


def martingale_residual(kernel: JumpKernel, trajectory: Trajectory, F: Callable,
                        quadrature_step: float = 1e-2,
                        rng: Optional[np.random.Generator] = None,
                        mc_samples: int = 1) -> float:
    """``F(X(t)) - F(X(s)) - int_s^t L(r)F(X(r)) dr`` along one path.

    The integral uses midpoint quadrature on each holding interval with
    sub-steps no longer than ``quadrature_step``. Monte Carlo generator
    values are unbiased, so one draw per node keeps the residual unbiased.
    """
    if rng is None:
        rng = np.random.default_rng()
    integral = 0.0
    for a, b, x in trajectory.segments():
        if b <= a:
            continue
        m = max(1, math.ceil((b - a) / quadrature_step - 1e-12))
        h = (b - a) / m
        for k in range(m):
            val, _ = evaluate_generator(kernel, F, a + (k + 0.5) * h, x, mc_samples, rng)
            integral += val * h
    final = trajectory.state_at(trajectory.end_time)
    return float(F(final) - F(trajectory.start_state) - integral)
