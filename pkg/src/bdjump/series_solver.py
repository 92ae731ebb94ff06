"""Finite-state series solver for time-dependent jump rates.

The transition function is built as the series ``P = sum_n P^(n)`` where
``P^(0)(s, i; t, j) = delta_ij exp(-int_s^t q(r, i) dr)`` and each further term
integrates one more jump:

    P^(n+1)(s, i; t, .) = int_s^t exp(-int_s^r q(u, i) du) sum_j R(r, i, j) P^(n)(r, j; t, .) dr.

Terms are tabulated on a uniform grid of start times (backward sweep, end time
fixed) or of end times (forward sweep, start time fixed). On each grid cell the
holding rate is replaced by its trapezoid average, the exponential weight is
integrated exactly and the jump term by its endpoint average. The rule is
second order, keeps every entry non-negative, and for a conservative kernel
reproduces row sums of one exactly, so any remaining defect is escaping mass
or series truncation rather than quadrature error.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import GridError
from .jump_core import JumpKernel

TERM_TOL = 1e-10
DEFAULT_N_MAX = 500


class FiniteKernel:
    """Time-dependent jump rates on states ``0 .. n_states - 1``.

    Rates are stored sparsely as fixed ``(rows, cols)`` index arrays with values
    ``values(t)``. ``escape(t)`` gives per-state rates of leaving the state space
    (a truncation cut); they count toward ``q`` but have no target, so their
    mass shows up as defect.
    """

    def __init__(self, n_states: int, rows, cols, values: Callable[[float], np.ndarray],
                 escape: Optional[Callable[[float], np.ndarray]] = None,
                 name: str = "finite", time_constant: bool = False):
        self.n_states = int(n_states)
        self.rows = np.asarray(rows, dtype=np.intp)
        self.cols = np.asarray(cols, dtype=np.intp)
        if np.any(self.rows == self.cols):
            raise ValueError("self-transitions are not allowed")
        self._values = values
        self._escape = escape
        self.name = name
        self.time_constant = time_constant

    # -- constructors ---------------------------------------------------------

    @classmethod
    def constant(cls, matrix, escape=None, name: str = "constant") -> "FiniteKernel":
        """From a fixed matrix of off-diagonal rates (the diagonal is ignored)."""
        m = np.array(matrix, dtype=float)
        np.fill_diagonal(m, 0.0)
        if np.any(m < 0):
            raise ValueError("rates must be non-negative")
        rows, cols = np.nonzero(m)
        vals = m[rows, cols].copy()
        esc = None if escape is None else np.asarray(escape, dtype=float)
        return cls(len(m), rows, cols, lambda t: vals,
                   None if esc is None else (lambda t: esc), name=name, time_constant=True)

    @classmethod
    def from_matrix_fn(cls, n_states: int, fn: Callable[[float], np.ndarray],
                       escape: Optional[Callable[[float], np.ndarray]] = None,
                       name: str = "matrix_fn") -> "FiniteKernel":
        """From ``fn(t) -> (n, n)`` dense rate matrices; every off-diagonal pair is kept."""
        rows, cols = np.nonzero(~np.eye(n_states, dtype=bool))

        def values(t):
            return np.asarray(fn(t), dtype=float)[rows, cols]

        return cls(n_states, rows, cols, values, escape, name=name)

    @classmethod
    def count_process(cls, cut: int, jumps: dict[int, Callable], boundary: str = "reflect",
                      name: str = "count") -> "FiniteKernel":
        """Counts ``0 .. cut - 1`` with jumps ``n -> n + k`` at rate ``jumps[k](t, n)``.

        ``jumps[k]`` is vectorised over an integer array ``n``. Jumps leaving
        ``[0, cut)`` are dropped with ``boundary="reflect"`` (a conservative
        truncation) or turned into escape rates with ``boundary="escape"``.
        """
        if boundary not in ("reflect", "escape"):
            raise ValueError("boundary must be 'reflect' or 'escape'")
        n = np.arange(cut)
        rows, cols, owners = [], [], []
        esc_parts = []
        for k, fn in jumps.items():
            if k == 0:
                continue
            src = n[(n + k >= 0) & (n + k < cut)]
            rows.append(src)
            cols.append(src + k)
            owners.append((k, fn, src))
            out = n[(n + k < 0) | (n + k >= cut)]
            if len(out):
                esc_parts.append((fn, out))
        rows_a = np.concatenate(rows) if rows else np.empty(0, dtype=np.intp)
        cols_a = np.concatenate(cols) if cols else np.empty(0, dtype=np.intp)

        def values(t):
            if not owners:
                return np.empty(0)
            return np.concatenate([np.broadcast_to(np.asarray(fn(t, src), dtype=float), src.shape)
                                   for _, fn, src in owners])

        escape = None
        if boundary == "escape" and esc_parts:
            def escape(t):
                e = np.zeros(cut)
                for fn, out in esc_parts:
                    e[out] += np.broadcast_to(np.asarray(fn(t, out), dtype=float), out.shape)
                return e

        return cls(cut, rows_a, cols_a, values, escape, name=name)

    # -- evaluation -----------------------------------------------------------

    def values(self, t: float) -> np.ndarray:
        v = np.asarray(self._values(t), dtype=float)
        if v.shape != self.rows.shape:
            raise ValueError(f"rate vector has shape {v.shape}, expected {self.rows.shape}")
        return v

    def escape_rates(self, t: float) -> np.ndarray:
        if self._escape is None:
            return np.zeros(self.n_states)
        return np.asarray(self._escape(t), dtype=float)

    def rate_matrix(self, t: float) -> np.ndarray:
        m = np.zeros((self.n_states, self.n_states))
        np.add.at(m, (self.rows, self.cols), self.values(t))
        return m

    def total_rates(self, t: float) -> np.ndarray:
        q = np.bincount(self.rows, weights=self.values(t), minlength=self.n_states)
        return q + self.escape_rates(t)

    def generator(self, t: float) -> np.ndarray:
        """Sub-generator ``R(t) - diag(q(t))`` (escape included on the diagonal)."""
        g = self.rate_matrix(t)
        g[np.diag_indices(self.n_states)] -= self.total_rates(t)
        return g

    def rate(self, t: float, i: int, j: int) -> float:
        return 0.0 if i == j else float(self.rate_matrix(t)[i, j])


@dataclass
class SeriesSolution:
    """Series terms tabulated on a time grid.

    ``grid`` holds start times (backward sweep) or end times (forward sweep);
    ``partial[k]`` is ``sum_n alpha^n P^(n)`` at grid node ``k``; ``terms`` keeps
    each ``P^(n)`` at the fixed endpoint of the sweep.
    """

    grid: np.ndarray
    partial: np.ndarray
    terms: list = field(default_factory=list)
    alpha: float = 1.0
    direction: str = "backward"
    converged: bool = False
    full_terms: Optional[list] = None

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else 0.0

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def matrix(self) -> np.ndarray:
        """``P(s; t)``: the entry at the fixed start (backward) or final end (forward)."""
        return self.partial[0] if self.direction == "backward" else self.partial[-1]

    def defects(self) -> np.ndarray:
        return 1.0 - self.matrix.sum(axis=1)

    def defect_sequence(self) -> list[tuple[int, float]]:
        """``(N, max_i (1 - row sum of sum_{n <= N} P^(n)))`` for each truncation ``N``."""
        acc = np.zeros_like(self.terms[0])
        out = []
        for n, term in enumerate(self.terms):
            acc = acc + self.alpha**n * term
            out.append((n, float(np.max(1.0 - acc.sum(axis=1)))))
        return out


def time_grid(s: float, t: float, step: float) -> np.ndarray:
    if t < s:
        raise GridError(f"end time {t} precedes start time {s}")
    if t == s:
        return np.array([float(s)])
    if step <= 0:
        raise GridError("step must be positive")
    ratio = (t - s) / step
    m = int(round(ratio))
    if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
        raise GridError(f"step {step} does not tile [{s}, {t}]")
    return s + (t - s) * np.arange(m + 1) / m


def _cell_weights(q: np.ndarray, h: float):
    """Per-cell decay ``exp(-h qbar)`` and exact weight ``int_0^h exp(-qbar u) du``."""
    qbar = 0.5 * (q[:-1] + q[1:])
    x = h * qbar
    decay = np.exp(-x)
    small = x < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(small, h * (1.0 - 0.5 * x), -np.expm1(-x) / np.where(small, 1.0, qbar))
    return decay, phi


def _block_operator(kernel: FiniteKernel, vals: np.ndarray, transpose: bool) -> sp.csr_matrix:
    """Block-diagonal sparse operator applying ``R(r_m)`` (or its transpose) per node."""
    n_nodes, nnz = vals.shape
    S = kernel.n_states
    offs = (np.arange(n_nodes) * S)[:, None]
    r, c = (kernel.cols, kernel.rows) if transpose else (kernel.rows, kernel.cols)
    rows = (offs + r[None, :]).ravel()
    cols = (offs + c[None, :]).ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n_nodes * S, n_nodes * S))


def solve_series(kernel: FiniteKernel, s: float, t: float, step: float,
                 N: Optional[int] = None, alpha: float = 1.0, direction: str = "backward",
                 tol: float = TERM_TOL, keep_full_terms: bool = False,
                 n_max: int = DEFAULT_N_MAX) -> SeriesSolution:
    """Accumulate ``sum_n alpha^n P^(n)`` on the grid.

    With ``N=None`` terms are added until the newest term's largest row sum
    falls below ``tol`` (or ``n_max`` terms); an explicit ``N`` adds
    exactly ``N + 1`` terms unless the terms vanish identically.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if direction not in ("backward", "forward"):
        raise ValueError("direction must be 'backward' or 'forward'")
    grid = time_grid(s, t, step)
    S = kernel.n_states
    G = len(grid) - 1
    eye = np.eye(S)
    if G == 0:
        p = eye[None].copy()
        return SeriesSolution(grid, p, [eye.copy()], alpha, direction, True,
                              [p.copy()] if keep_full_terms else None)
    h = float(grid[1] - grid[0])
    q = np.array([kernel.total_rates(r) for r in grid])
    vals = np.array([kernel.values(r) for r in grid]).reshape(len(grid), -1)
    decay, phi = _cell_weights(q, h)
    C = np.concatenate([np.zeros((1, S)), np.cumsum(0.5 * h * (q[:-1] + q[1:]), axis=0)])

    backward = direction == "backward"
    if backward:
        term = np.exp(-(C[-1] - C))[:, :, None] * eye
        op = _block_operator(kernel, vals, transpose=False)
    else:
        term = np.exp(-(C - C[0]))[:, None, :] * eye
        op = _block_operator(kernel, vals, transpose=True)

    partial = term.copy()
    endpoint = 0 if backward else G
    terms = [term[endpoint].copy()]
    full = [term.copy()] if keep_full_terms else None
    n_max = n_max if N is None else N
    converged = N is not None
    weight = 1.0
    for n in range(1, n_max + 1):
        if alpha == 0.0:
            break
        if backward:
            B = (op @ term.reshape(-1, S)).reshape(G + 1, S, S)
            new = np.zeros_like(term)
            for k in range(G - 1, -1, -1):
                new[k] = decay[k][:, None] * new[k + 1] + (0.5 * phi[k])[:, None] * (B[k] + B[k + 1])
        else:
            # D_m = P_m R_m computed as (R_m^T P_m^T)^T
            Dt = (op @ term.transpose(0, 2, 1).reshape(-1, S)).reshape(G + 1, S, S)
            D = Dt.transpose(0, 2, 1)
            new = np.zeros_like(term)
            for k in range(G):
                new[k + 1] = new[k] * decay[k][None, :] + (D[k] + D[k + 1]) * (0.5 * phi[k])[None, :]
        term = new
        weight *= alpha
        partial += weight * term
        terms.append(term[endpoint].copy())
        if keep_full_terms:
            full.append(term.copy())
        size = float(np.max(term.sum(axis=2)))
        if size == 0.0:
            converged = True
            break
        if N is None and size < tol:
            converged = True
            break
    return SeriesSolution(grid, partial, terms, alpha, direction, converged, full)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def series_term(kernel: FiniteKernel, n: int, s: float, t: float, step: float) -> np.ndarray:
    """The ``n``-jump term ``P^(n)(s, .; t, .)``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    sol = solve_series(kernel, s, t, step, N=n)
    if n < len(sol.terms):
        return sol.terms[n]
    return np.zeros((kernel.n_states, kernel.n_states))


def minimal_solution(kernel: FiniteKernel, s: float, t: float, step: float,
                     N: Optional[int] = None) -> tuple[np.ndarray, float]:
    """Partial sum of the series and its largest row defect ``1 - sum_j P(s, i; t, j)``."""
    sol = solve_series(kernel, s, t, step, N)
    return sol.matrix, float(np.max(sol.defects()))


def regularized_solution(kernel: FiniteKernel, alpha: float, s: float, t: float, step: float,
                         N: Optional[int] = None) -> np.ndarray:
    """``sum_n alpha^n P^(n)``; ``alpha = 0`` keeps only the no-jump term."""
    return solve_series(kernel, s, t, step, N, alpha=alpha).matrix


def backward_residual(kernel: FiniteKernel, s: float, t: float, step: float,
                      N: Optional[int] = None) -> float:
    """Largest ``|dP/ds - q(s) P + R(s) P|`` over interior start nodes (central differences)."""
    sol = solve_series(kernel, s, t, step, N)
    P, grid = sol.partial, sol.grid
    if len(grid) < 3:
        return 0.0
    h = grid[1] - grid[0]
    worst = 0.0
    for k in range(1, len(grid) - 1):
        r = grid[k]
        dP = (P[k + 1] - P[k - 1]) / (2 * h)
        res = dP - kernel.total_rates(r)[:, None] * P[k] + kernel.rate_matrix(r) @ P[k]
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def forward_residual(kernel: FiniteKernel, s: float, t: float, step: float,
                     N: Optional[int] = None) -> float:
    """Largest ``|dP/dt + P diag(q(t)) - P R(t)|`` over interior end nodes."""
    sol = solve_series(kernel, s, t, step, N, direction="forward")
    P, grid = sol.partial, sol.grid
    if len(grid) < 3:
        return 0.0
    h = grid[1] - grid[0]
    worst = 0.0
    for k in range(1, len(grid) - 1):
        r = grid[k]
        dP = (P[k + 1] - P[k - 1]) / (2 * h)
        res = dP + P[k] * kernel.total_rates(r)[None, :] - P[k] @ kernel.rate_matrix(r)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def chernoff_approximation(kernel: FiniteKernel, s: float, t: float, mesh: float) -> np.ndarray:
    """Product of matrix exponentials with rates frozen at the left end of each
    mesh interval ``[s + k mesh, s + (k + 1) mesh)``; the last one is cut at ``t``."""
    if mesh <= 0:
        raise GridError("mesh must be positive")
    if t < s:
        raise GridError(f"end time {t} precedes start time {s}")
    P = np.eye(kernel.n_states)
    a = s
    k = 0
    while a < t:
        b = min(s + (k + 1) * mesh, t)
        if t - b < 1e-12 * max(1.0, abs(t)):
            b = t
        P = P @ scipy.linalg.expm(kernel.generator(a) * (b - a))
        a = b
        k += 1
    return P


@dataclass
class DensityVector:
    weights: np.ndarray
    time: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("density weights must be non-negative")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


def evolve_density(kernel: FiniteKernel, mu0: DensityVector, s: float, t: float, step: float,
                   N: Optional[int] = None) -> DensityVector:
    """Push a (sub-)probability vector forward: ``mu_t(j) = sum_i mu0(i) P(s, i; t, j)``."""
    if mu0.mass > 1.0 + 1e-12:
        raise ValueError("initial density must have mass at most one")
    P, _ = minimal_solution(kernel, s, t, step, N)
    return DensityVector(np.clip(mu0.weights @ P, 0.0, None), t)


def conservativeness_report(kernel: FiniteKernel, s: float, t: float, step: float,
                            N_max: int = DEFAULT_N_MAX) -> list[tuple[int, float]]:
    """Largest row defect of each partial sum, up to convergence or ``N_max`` terms."""
    return solve_series(kernel, s, t, step, None, n_max=N_max).defect_sequence()


def matrix_to_csv(P: np.ndarray, header: dict) -> str:
    """CSV with a ``#`` header line of ``key=value`` pairs; one row per source state."""
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source"] + [f"p{j}" for j in range(P.shape[1])])
    for i, row in enumerate(P):
        w.writerow([i] + [repr(float(v)) for v in row])
    return buf.getvalue()


def defects_to_csv(table: Sequence[tuple[int, float]], header: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "defect"])
    for n, d in table:
        w.writerow([n, repr(float(d))])
    return buf.getvalue()


def read_matrix_csv(text: str) -> tuple[np.ndarray, dict]:
    """Inverse of :func:`matrix_to_csv`; ``# key=value`` lines are collected into the
    header dict, other comment lines are skipped."""
    header = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if not body.startswith("{"):
                for item in body.split():
                    k, _, v = item.partition("=")
                    header[k] = v
        elif line.strip():
            lines.append(line)
    rows = list(csv.reader(lines))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows]), header


class FiniteJumpKernel(JumpKernel):
    """Adapter exposing a :class:`FiniteKernel` to the path simulator.

    Escaping mass moves to the absorbing state ``-1``. Time-dependent kernels
    need either global ``sup_rates`` or an ``envelope(t0, t1)`` returning
    per-state bounds on ``[t0, t1]`` for thinning.
    """

    ESCAPED = -1

    def __init__(self, kernel: FiniteKernel, sup_rates: Optional[np.ndarray] = None,
                 envelope: Optional[Callable[[float, float], np.ndarray]] = None):
        self.kernel = kernel
        self.sup_rates = None if sup_rates is None else np.asarray(sup_rates, dtype=float)
        self.envelope = envelope

    def _row(self, t, i):
        k = self.kernel
        sel = k.rows == i
        return k.cols[sel], k.values(t)[sel], k.escape_rates(t)[i]

    def total_rate(self, t, x):
        if x == self.ESCAPED:
            return 0.0
        return float(self.kernel.total_rates(t)[x])

    def rate_bound(self, t, x, window):
        if x == self.ESCAPED:
            return 0.0
        if self.envelope is not None:
            return float(self.envelope(t, t + window)[x])
        if self.sup_rates is not None:
            return float(self.sup_rates[x])
        if self.kernel.time_constant:
            return self.total_rate(t, x)
        raise ValueError("time-dependent finite kernels need declared sup rates for thinning")

    def sample_jump(self, t, x, rng):
        cols, vals, esc = self._row(t, x)
        w = np.append(vals, esc)
        u = rng.random() * w.sum()
        k = int(np.searchsorted(np.cumsum(w), u, side="right"))
        k = min(k, len(w) - 1)
        return int(cols[k]) if k < len(cols) else self.ESCAPED

    def jump_measure(self, t, x):
        if x == self.ESCAPED:
            return []
        cols, vals, esc = self._row(t, x)
        out = [(float(v), int(c)) for c, v in zip(cols, vals) if v > 0]
        if esc > 0:
            out.append((float(esc), self.ESCAPED))
        return out

    def is_absorbing(self, x):
        return x == self.ESCAPED

    def lyapunov(self, x):
        return 0.0

    def encode_state(self, x):
        return int(x)
