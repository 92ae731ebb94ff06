"""Run configuration files.

A config is flat ``key = value`` text with dotted sections; ``#`` starts a
comment. One file fully determines a run::

    run.command = simulate
    run.t = 2.0
    model.kind = bdlp
    model.m = constant 1.0
    model.a_minus = gaussian amplitude=0.1 sigma=1.0
    initial.kind = uniform_box
    initial.n = 20

Family values are a name followed by ``key=value`` parameters, e.g.
``sinusoid base=1 amplitude=1 omega=1``. ``model.file`` pulls the model
keys from a separate file.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .configuration import (
    Configuration,
    GaussianKernel,
    IndicatorKernel,
    IntensityFunction,
    PowerLawKernel,
    ZeroKernel,
    sample_poisson_pp,
)
from .errors import ParseError, ValidationError
from .models import (
    BdlpParams,
    Constant,
    CountJump,
    CountModel,
    DlParams,
    GaussianDispersal,
    GdlParams,
    Linear,
    PowerLawDispersal,
    RejectionDispersal,
    Sinusoid,
    UniformBallDispersal,
    immigration_death,
)
from .series_solver import FiniteKernel

COMMANDS = ("simulate", "moments", "solve", "verify", "sweep", "cluster-stats")
FORMATS = ("csv", "jsonl")
CHECKS = ("B", "D", "E", "doob", "growth", "moments", "xcheck")
MODEL_KINDS = ("bdlp", "dl", "gdl", "immigration_death", "count", "matrix")


# ---------------------------------------------------------------------------
# raw key-value parsing
# ---------------------------------------------------------------------------


@dataclass
class Entry:
    value: str
    line: int
    source: str = ""


def parse_kv(text: str, source: str = "") -> dict[str, Entry]:
    """Parse ``key = value`` lines; later duplicates are an error."""
    out: dict[str, Entry] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ParseError("malformed key", line=lineno, field=key or None)
        if key in out:
            raise ParseError("duplicate key", line=lineno, field=key)
        out[key] = Entry(value, lineno, source)
    return out


def _err(entry: Entry, key: str, msg: str) -> ParseError:
    return ParseError(msg, line=entry.line, field=key)


def _float(entry: Entry, key: str) -> float:
    try:
        return float(entry.value)
    except ValueError:
        raise _err(entry, key, f"expected a number, got {entry.value!r}") from None


def _int(entry: Entry, key: str) -> int:
    try:
        return int(entry.value)
    except ValueError:
        raise _err(entry, key, f"expected an integer, got {entry.value!r}") from None


def _floats(entry: Entry, key: str) -> list[float]:
    try:
        return [float(v) for v in entry.value.replace(",", " ").split()]
    except ValueError:
        raise _err(entry, key, f"expected a list of numbers, got {entry.value!r}") from None


def _json(entry: Entry, key: str):
    try:
        return json.loads(entry.value)
    except json.JSONDecodeError as exc:
        raise _err(entry, key, f"invalid JSON: {exc.msg}") from None


def _family(entry: Entry, key: str) -> tuple[str, dict[str, float]]:
    """``name k1=v1 k2=v2`` -> ``(name, {k1: v1, ...})``; a bare number is ``constant``."""
    parts = entry.value.split()
    if not parts:
        raise _err(entry, key, "empty value")
    if len(parts) == 1:
        try:
            return "constant", {"c": float(parts[0])}
        except ValueError:
            pass
    name, params = parts[0].lower(), {}
    for i, tok in enumerate(parts[1:]):
        if "=" not in tok:
            if name == "constant" and i == 0:
                tok = f"c={tok}"
            else:
                raise _err(entry, key, f"expected 'name=value', got {tok!r}")
        k, v = tok.split("=", 1)
        try:
            params[k] = float(v)
        except ValueError:
            raise _err(entry, key, f"parameter {k!r} is not a number") from None
    return name, params


def _build(entry: Entry, key: str, table: dict, what: str):
    name, params = _family(entry, key)
    if name not in table:
        raise _err(entry, key, f"unknown {what} family {name!r}; expected one of {sorted(table)}")
    try:
        return table[name](**params)
    except TypeError as exc:
        raise _err(entry, key, f"bad parameters for {name!r}: {exc}") from None
    except ValueError as exc:
        raise _err(entry, key, str(exc)) from None


COEFFICIENTS = {"constant": Constant, "sinusoid": Sinusoid, "linear": Linear}
KERNELS = {
    "zero": ZeroKernel,
    "gaussian": GaussianKernel,
    "indicator": IndicatorKernel,
    "power_law": PowerLawKernel,
}


def _dispersals(dim: int) -> dict:
    return {
        "gaussian": lambda sigma: GaussianDispersal(sigma, dim),
        "power_law": lambda c, alpha: PowerLawDispersal(c, alpha, dim),
        "uniform_ball": lambda radius: UniformBallDispersal(radius, dim),
    }


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixRates:
    """``R(t) = R0 + t * R1`` with zero diagonals."""

    r0: np.ndarray
    r1: np.ndarray

    def __call__(self, t):
        return self.r0 + t * self.r1

    def envelope(self, t0, t1):
        """Per-state bound on the total rate over ``[t0, t1]`` (rates grow in t)."""
        return (self.r0 + t1 * self.r1).sum(axis=1)


def _matrix(entry: Entry, key: str, n: Optional[int] = None) -> np.ndarray:
    m = np.asarray(_json(entry, key), dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        raise _err(entry, key, "expected a square matrix")
    if np.any(m < 0):
        raise _err(entry, key, "rates must be non-negative")
    np.fill_diagonal(m, 0.0)
    return m


MODEL_KEYS = {
    "kind", "dim", "m", "lam", "a_minus", "b_plus", "a_plus", "a_plus.envelope",
    "a_plus.envelope_mass", "a_minus_t", "b_plus_t", "b", "beta", "delta",
    "rates", "rates_slope", "jumps", "sup.m", "sup.lam", "sup.a_minus", "sup.b_plus", "file",
}


def build_model(entries: dict[str, Entry]):
    """Build the model from ``model.*`` entries (prefix stripped)."""
    def get(k):
        return entries.get(k)

    for k, e in entries.items():
        if k not in MODEL_KEYS:
            raise _err(e, f"model.{k}", "unknown model key")
    kind_e = get("kind")
    if kind_e is None:
        raise ValidationError("model.kind is required")
    kind = kind_e.value.lower()
    if kind not in MODEL_KINDS:
        raise _err(kind_e, "model.kind", f"unknown model kind; expected one of {list(MODEL_KINDS)}")

    if kind == "matrix":
        r0 = _matrix(get("rates"), "model.rates") if get("rates") else None
        if r0 is None:
            raise ValidationError("model.rates is required for matrix models")
        r1 = _matrix(get("rates_slope"), "model.rates_slope", len(r0)) if get("rates_slope") else np.zeros_like(r0)
        if not r1.any():
            return FiniteKernel.constant(r0, name="matrix")
        rates = MatrixRates(r0, r1)
        k = FiniteKernel.from_matrix_fn(len(r0), rates, name="matrix")
        k.envelope = rates.envelope
        return k
    if kind == "immigration_death":
        beta = _build(get("beta"), "model.beta", COEFFICIENTS, "coefficient") if get("beta") else Constant(1.0)
        delta = _build(get("delta"), "model.delta", COEFFICIENTS, "coefficient") if get("delta") else Constant(1.0)
        return immigration_death(beta, delta)
    if kind == "count":
        e = get("jumps")
        if e is None:
            raise ValidationError("model.jumps is required for count models")
        spec = _json(e, "model.jumps")
        try:
            jumps = [CountJump(int(j["size"]), _coef_from_json(j["coef"]), float(j.get("scale", 1.0)),
                               int(j.get("power", 1))) for j in spec]
        except (KeyError, TypeError, ValueError) as exc:
            raise _err(e, "model.jumps", f"bad jump list: {exc}") from None
        return CountModel(jumps)

    dim = _int(get("dim"), "model.dim") if get("dim") else 2
    if dim < 1:
        raise _err(get("dim"), "model.dim", "dimension must be positive")
    coef = lambda k, d: _build(get(k), f"model.{k}", COEFFICIENTS, "coefficient") if get(k) else Constant(d)
    kern = lambda k: _build(get(k), f"model.{k}", KERNELS, "kernel") if get(k) else ZeroKernel()
    a_plus = (_build(get("a_plus"), "model.a_plus", _dispersals(dim), "dispersal")
              if get("a_plus") else GaussianDispersal(1.0, dim))
    if get("a_plus.envelope"):
        proposal = _build(get("a_plus.envelope"), "model.a_plus.envelope", _dispersals(dim), "dispersal")
        mass = _float(get("a_plus.envelope_mass"), "model.a_plus.envelope_mass") if get("a_plus.envelope_mass") else None
        a_plus = RejectionDispersal(a_plus, proposal, mass)
    kw = dict(m=coef("m", 0.0), lam=coef("lam", 0.0), a_minus=kern("a_minus"), a_plus=a_plus, dim=dim)
    try:
        if kind == "bdlp":
            model = BdlpParams(**kw)
        elif kind == "dl":
            b = _float(get("b"), "model.b") if get("b") else 0.0
            model = DlParams(b_plus=kern("b_plus"), b=b, **kw)
        else:
            model = GdlParams(b_plus=kern("b_plus"), a_minus_t=coef("a_minus_t", 1.0),
                              b_plus_t=coef("b_plus_t", 1.0), **kw)
    except ValueError as exc:
        raise ValidationError(f"model: {exc}") from None
    for name in ("m", "lam", "a_minus", "b_plus"):
        e = get(f"sup.{name}")
        if e is None:
            continue
        declared, actual = _float(e, f"model.sup.{name}"), model.norms.get(name, 0.0)
        if declared < actual:
            raise ValidationError(f"declared sup norm of {name} ({declared}) is below its value {actual}")
    if isinstance(model, GdlParams):
        worst = model.check_domination()
        if worst > 1e-12:
            raise ValidationError(f"b_plus exceeds a_minus by {worst:.3g} somewhere")
    return model


def _coef_from_json(spec):
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    spec = dict(spec)
    name = spec.pop("family")
    return COEFFICIENTS[name](**spec)


# ---------------------------------------------------------------------------
# initial state
# ---------------------------------------------------------------------------


INITIAL_KEYS = {"kind", "n", "lo", "hi", "seed", "points", "count", "mass"}


def build_initial(entries: dict[str, Entry], dim: int):
    """Initial state: a :class:`Configuration` or, for count/matrix models, an int."""
    for k, e in entries.items():
        if k not in INITIAL_KEYS:
            raise _err(e, f"initial.{k}", "unknown initial-state key")
    kind = entries["kind"].value if "kind" in entries else "uniform_box"
    seed = _int(entries["seed"], "initial.seed") if "seed" in entries else 0
    rng = np.random.default_rng(seed)
    lo = _floats(entries["lo"], "initial.lo") if "lo" in entries else [0.0] * dim
    hi = _floats(entries["hi"], "initial.hi") if "hi" in entries else [1.0] * dim
    if kind == "count":
        return _int(entries["count"], "initial.count") if "count" in entries else 0
    if kind == "points":
        pts = np.asarray(_json(entries["points"], "initial.points"), dtype=float).reshape(-1, dim)
        return Configuration(pts, dim=dim)
    if len(lo) != dim or len(hi) != dim:
        raise ValidationError("initial.lo / initial.hi must have one entry per dimension")
    if kind == "uniform_box":
        n = _int(entries["n"], "initial.n") if "n" in entries else 0
        box = IntensityFunction.uniform_box(lo, hi, 1.0)
        return Configuration(box.sample_positions(n, rng), dim=dim)
    if kind == "poisson":
        mass = _float(entries["mass"], "initial.mass") if "mass" in entries else 1.0
        return sample_poisson_pp(IntensityFunction.uniform_box(lo, hi, mass), rng)
    raise _err(entries["kind"], "initial.kind", f"unknown initial kind {kind!r}")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str = "simulate"
    model_entries: dict = field(default_factory=dict, repr=False)
    initial_entries: dict = field(default_factory=dict, repr=False)
    s: float = 0.0
    t: float = 1.0
    replicates: int = 1
    seed: int = 0
    out: Optional[str] = None
    format: str = "jsonl"
    workers: Optional[int] = None
    max_events: int = 1_000_000
    lyapunov_cap: float = math.inf
    window: float = 1.0
    step: float = 1e-2
    N: Optional[int] = None
    truncation: int = 100
    state: Optional[int] = None
    solver_output: str = "matrix"
    checks: tuple = ("B", "D", "E")
    T: Optional[float] = None
    n_configs: int = 1000
    t_points: int = 1001
    config_seed: int = 0
    c: Optional[float] = None
    a: Optional[float] = None
    b_min: Optional[float] = None
    thresholds: tuple = (2.0, 4.0, 8.0)
    tolerance: float = 0.02
    times: Optional[tuple] = None
    n_times: int = 11
    sweep_key: Optional[str] = None
    sweep_values: tuple = ()
    draws: int = 100_000
    source: Optional[str] = None
    text: str = field(default="", repr=False)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ValidationError(f"command must be one of {COMMANDS}")
        if self.format not in FORMATS:
            raise ValidationError(f"format must be one of {FORMATS}")
        if self.s < 0:
            raise ValidationError("s must be non-negative")
        if self.s > self.t:
            raise ValidationError("s must not exceed t")
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if self.workers is not None and self.workers < 1:
            raise ValidationError("workers must be at least 1")
        if self.step <= 0:
            raise ValidationError("solver.step must be positive")
        if self.truncation < 1:
            raise ValidationError("solver.truncation must be positive")
        if self.solver_output not in ("matrix", "defects", "density"):
            raise ValidationError("solver.output must be matrix, defects or density")
        bad = [c for c in self.checks if c not in CHECKS]
        if bad:
            raise ValidationError(f"unknown verify checks {bad}; expected a subset of {CHECKS}")
        if not self.model_entries:
            raise ValidationError("no model given (model.* keys or model.file)")
        if self.command == "sweep" and (not self.sweep_key or not self.sweep_values):
            raise ValidationError("sweep needs sweep.key and sweep.values")
        return self

    # derived objects -------------------------------------------------------

    def model(self):
        return build_model(self.model_entries)

    def initial_state(self, model=None):
        model = self.model() if model is None else model
        if isinstance(model, (CountModel, FiniteKernel)):
            if "count" in self.initial_entries:
                return _int(self.initial_entries["count"], "initial.count")
            return 0 if self.state is None else self.state
        return build_initial(self.initial_entries, model.dim)

    @property
    def horizon_T(self) -> float:
        return self.t if self.T is None else self.T

    def model_hash(self) -> str:
        canon = "\n".join(f"{k}={e.value}" for k, e in sorted(self.model_entries.items()))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def resolved(self) -> dict:
        """All settings with defaults filled in (model and initial keys verbatim)."""
        out = {}
        for k, v in vars(self).items():
            if k in ("model_entries", "initial_entries", "text", "source"):
                continue
            if isinstance(v, float) and not math.isfinite(v):
                v = str(v)
            out[k] = list(v) if isinstance(v, tuple) else v
        out["model"] = {k: e.value for k, e in sorted(self.model_entries.items())}
        out["initial"] = {k: e.value for k, e in sorted(self.initial_entries.items())}
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()[:16]


_RUN_KEYS = {
    "run.command": ("command", str), "run.s": ("s", float), "run.t": ("t", float),
    "run.replicates": ("replicates", int), "run.seed": ("seed", int), "run.out": ("out", str),
    "run.format": ("format", str), "run.workers": ("workers", int),
    "run.max_events": ("max_events", int), "run.lyapunov_cap": ("lyapunov_cap", float),
    "run.window": ("window", float),
    "solver.step": ("step", float), "solver.N": ("N", "auto_int"),
    "solver.truncation": ("truncation", int), "solver.state": ("state", int),
    "solver.output": ("solver_output", str),
    "verify.checks": ("checks", "names"), "verify.T": ("T", float),
    "verify.configs": ("n_configs", int), "verify.t_points": ("t_points", int),
    "verify.config_seed": ("config_seed", int), "verify.c": ("c", float),
    "verify.a": ("a", float), "verify.b_min": ("b_min", float),
    "verify.thresholds": ("thresholds", "floats"), "verify.tolerance": ("tolerance", float),
    "moments.times": ("times", "floats"), "moments.n_times": ("n_times", int),
    "sweep.key": ("sweep_key", str), "sweep.values": ("sweep_values", "floats"),
    "cluster.draws": ("draws", int),
}


def _convert(entry: Entry, key: str, kind):
    if kind is str:
        return entry.value
    if kind is float:
        return _float(entry, key)
    if kind is int:
        return _int(entry, key)
    if kind == "auto_int":
        return None if entry.value.lower() == "auto" else _int(entry, key)
    if kind == "floats":
        return tuple(_floats(entry, key))
    if kind == "names":
        return tuple(v for v in entry.value.replace(",", " ").split())
    raise AssertionError(kind)


def parse_config_text(text: str, base_dir: Optional[str] = None, source: Optional[str] = None) -> RunConfig:
    entries = parse_kv(text, source or "")
    cfg = RunConfig(source=source, text=text)
    for key, entry in entries.items():
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub == "file":
                path = Path(entry.value)
                if not path.is_absolute() and base_dir:
                    path = Path(base_dir) / path
                if not path.exists():
                    raise ValidationError(f"model file {str(path)!r} does not exist")
                for k, e in parse_kv(path.read_text(), str(path)).items():
                    k = k[len("model."):] if k.startswith("model.") else k
                    cfg.model_entries.setdefault(k, e)
            else:
                cfg.model_entries[sub] = entry
        elif key.startswith("initial."):
            cfg.initial_entries[key[len("initial."):]] = entry
        elif key in _RUN_KEYS:
            attr, kind = _RUN_KEYS[key]
            setattr(cfg, attr, _convert(entry, key, kind))
        else:
            raise ParseError("unknown key", line=entry.line, field=key)
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a config file; defaults are resolved on the returned object."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config_text(text, base_dir=str(path.parent), source=str(path)).validate()


def with_override(cfg: RunConfig, key: str, value: float) -> RunConfig:
    """Copy of ``cfg`` with one model parameter replaced (for sweeps).

    ``key`` is ``model.<name>`` for a numeric entry or ``model.<name>.<param>``
    for a parameter of a family entry.
    """
    import copy

    if not key.startswith("model."):
        raise ValidationError("sweep.key must name a model entry")
    new = copy.copy(cfg)
    new.model_entries = dict(cfg.model_entries)
    parts = key[len("model."):].split(".")
    for cut in range(len(parts), 0, -1):
        name = ".".join(parts[:cut])
        if name in new.model_entries:
            break
    else:
        raise ValidationError(f"sweep.key {key!r} does not match a model entry")
    entry = new.model_entries[name]
    param = ".".join(parts[cut:])
    if not param:
        new.model_entries[name] = Entry(repr(float(value)), entry.line, entry.source)
        return new
    fam, params = _family(entry, f"model.{name}")
    if param not in params:
        raise ValidationError(f"{fam!r} in model.{name} has no parameter {param!r}")
    params[param] = float(value)
    text = fam + " " + " ".join(f"{k}={v!r}" for k, v in params.items())
    new.model_entries[name] = Entry(text, entry.line, entry.source)
    return new


def atomic_write(path, data: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
