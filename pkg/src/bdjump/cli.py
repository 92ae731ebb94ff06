"""Command-line entry point.

Usage::

    bdjump <command> --config run.cfg [--seed N] [--out PATH] [--format csv|jsonl] [--workers N]

Exit status is 0 on success, 1 when a verification check fails and 2 on
any error (bad config, invalid model, runtime failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from functools import partial
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import (
    check_condition_B,
    check_condition_D,
    check_condition_E,
    cluster_size_test,
    doob_bound_test,
    expectation_growth_test,
    moment_bound_test,
    path_statistics,
    reports_to_text,
    sample_configurations,
    simulator_vs_solver,
    VerificationReport,
)
from .config import COMMANDS, FORMATS, RunConfig, atomic_write, parse_config, with_override
from .configuration import lyapunov_V
from .errors import BdjumpError, ValidationError
from .jump_core import (
    CAP_EXCEEDED,
    JumpKernel,
    SimOptions,
    _Task,
    replicate_rng,
    run_replicates,
    simulate_path,
    summarize,
)
from .models import CountModel, DlParams, GdlParams, ParticleKernel, count_model
from .series_solver import (
    DensityVector,
    FiniteJumpKernel,
    FiniteKernel,
    conservativeness_report,
    defects_to_csv,
    evolve_density,
    matrix_to_csv,
    minimal_solution,
)

log = logging.getLogger("bdjump")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def available_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def manifest(cfg: RunConfig) -> dict:
    return {"tool": "bdjump", "version": __version__, "command": cfg.command, "seed": cfg.seed,
            "config_hash": cfg.config_hash(), "model_hash": cfg.model_hash(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}


def _header(cfg: RunConfig, fmt: str) -> str:
    line = json.dumps({"manifest": manifest(cfg)}, sort_keys=True)
    return line + "\n" if fmt == "jsonl" else f"# {line}\n"


def _kernel(model) -> JumpKernel:
    if isinstance(model, FiniteKernel):
        return FiniteJumpKernel(model, envelope=getattr(model, "envelope", None))
    if isinstance(model, JumpKernel):
        return model
    return ParticleKernel(model)


def _opts(cfg: RunConfig, horizon: Optional[float] = None) -> SimOptions:
    return SimOptions(horizon=cfg.t if horizon is None else horizon, seed=cfg.seed,
                      max_events=cfg.max_events, lyapunov_cap=cfg.lyapunov_cap,
                      lookahead_window=cfg.window)


def _count(x) -> int:
    return int(x) if isinstance(x, (int, np.integer)) else len(x)


def _table(fmt: str, columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    if fmt == "jsonl":
        return "".join(json.dumps(dict(zip(columns, r))) + "\n" for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands; each returns (body, exit status)
# ---------------------------------------------------------------------------


def _one_path(kernel, x0, s, opts, rng, i):
    return simulate_path(kernel, x0, s, opts, rng)


def cmd_simulate(cfg: RunConfig, workers: int):
    model = cfg.model()
    kernel = _kernel(model)
    x0 = cfg.initial_state(model)
    opts = _opts(cfg)
    trajs = run_replicates(_Task(partial(_one_path, kernel, x0, cfg.s, opts)), cfg.replicates,
                           cfg.seed, workers)
    if cfg.format == "jsonl":
        head = {"seed": cfg.seed, "model_hash": cfg.model_hash(),
                "options": {"horizon": opts.horizon, "max_events": opts.max_events,
                            "lyapunov_cap": str(opts.lyapunov_cap),
                            "lookahead_window": opts.lookahead_window}}
        body = "".join(tr.to_jsonl(kernel.encode_state, dict(head, replicate=i))
                       for i, tr in enumerate(trajs))
    else:
        rows = []
        for i, tr in enumerate(trajs):
            rows.append([i, tr.start_time, _count(tr.start_state), "start"])
            rows += [[i, t, _count(x), "jump"] for t, x in tr.events]
            rows.append([i, tr.end_time, _count(tr.final_state), tr.terminated])
        body = _table("csv", ["replicate", "t", "n", "event"], rows)
    return body, EXIT_OK


def _counts_on_grid(kernel, x0, s, opts, times, rng, i):
    tr = simulate_path(kernel, x0, s, opts, rng)
    return [_count(tr.state_at(min(t, tr.end_time))) for t in times], tr.terminated == CAP_EXCEEDED


def cmd_moments(cfg: RunConfig, workers: int):
    if cfg.replicates < 2:
        raise ValidationError("moments needs at least 2 replicates")
    model = cfg.model()
    kernel = _kernel(model)
    x0 = cfg.initial_state(model)
    times = list(cfg.times) if cfg.times else list(np.linspace(cfg.s, cfg.t, cfg.n_times))
    if min(times) < cfg.s or max(times) > cfg.t:
        raise ValidationError("moments.times must lie in [s, t]")
    out = run_replicates(_Task(partial(_counts_on_grid, kernel, x0, cfg.s, _opts(cfg), times)),
                         cfg.replicates, cfg.seed, workers)
    counts = np.array([c for c, _ in out], dtype=float)
    capped = sum(c for _, c in out)
    rows = []
    for j, t in enumerate(times):
        n = counts[:, j]
        en, ev = summarize(n), summarize(n + n * n)
        rows.append([float(t), en.mean, en.stderr, ev.mean, ev.stderr, capped])
    return _table(cfg.format, ["t", "mean_n", "stderr_n", "mean_V", "stderr_V", "capped"], rows), EXIT_OK


def _finite(model, cfg: RunConfig) -> FiniteKernel:
    if isinstance(model, FiniteKernel):
        return model
    cm = model if isinstance(model, CountModel) else count_model(model)
    return cm.finite_kernel(cfg.truncation, boundary="escape")


def cmd_solve(cfg: RunConfig, workers: int):
    model = cfg.model()
    fk = _finite(model, cfg)
    info = {"command": "solve", "seed": cfg.seed, "model_hash": cfg.model_hash(), "s": cfg.s,
            "t": cfg.t, "step": cfg.step}
    if cfg.solver_output == "defects":
        table = conservativeness_report(fk, cfg.s, cfg.t, cfg.step, cfg.N or 500)
        if cfg.format == "csv":
            return defects_to_csv(table, info), EXIT_OK
        return _table("jsonl", ["N", "defect"], table), EXIT_OK
    if cfg.solver_output == "density":
        x0 = cfg.initial_state(model)
        mu0 = np.zeros(fk.n_states)
        mu0[int(x0)] = 1.0
        mu = evolve_density(fk, DensityVector(mu0, cfg.s), cfg.s, cfg.t, cfg.step, cfg.N)
        rows = [[j, float(w)] for j, w in enumerate(mu.weights)]
        return _table(cfg.format, ["state", "weight"], rows), EXIT_OK
    P, defect = minimal_solution(fk, cfg.s, cfg.t, cfg.step, cfg.N)
    info["max_defect"] = defect
    if cfg.format == "csv":
        return matrix_to_csv(P, info), EXIT_OK
    return _table("jsonl", ["source", "p"], [[i, [float(v) for v in row]] for i, row in enumerate(P)]), EXIT_OK


def _verify_reports(cfg: RunConfig, workers: int) -> list[VerificationReport]:
    model = cfg.model()
    T = cfg.horizon_T
    reports = []
    particle = not isinstance(model, (FiniteKernel, CountModel))
    if particle and {"B", "D", "E"} & set(cfg.checks):
        configs = sample_configurations(cfg.n_configs, model.dim, cfg.config_seed)
        ts = np.linspace(0.0, T, cfg.t_points)
        if "B" in cfg.checks:
            reports.append(check_condition_B(model, ts, configs, c=cfg.c))
        if "D" in cfg.checks:
            reports.append(check_condition_D(model, T, configs, a=cfg.a, t_points=cfg.t_points))
        if "E" in cfg.checks:
            reports.append(check_condition_E(model, T, configs, b=cfg.b_min, t_points=cfg.t_points))
    elif {"B", "D", "E"} & set(cfg.checks):
        raise ValidationError("conditions B, D, E apply to particle models")
    needs_paths = {"growth", "doob", "moments"} & set(cfg.checks)
    if needs_paths:
        if not particle:
            raise ValidationError("growth, doob and moments checks apply to particle models")
        if cfg.replicates < 2:
            raise ValidationError("ensemble checks need at least 2 replicates")
        eta0 = cfg.initial_state(model)
        stats = path_statistics(model, eta0, cfg.s, cfg.t, cfg.replicates, cfg.seed, workers,
                                opts=_opts(cfg))
        n = cfg.replicates
        if "growth" in cfg.checks:
            reports.append(expectation_growth_test(model, eta0, cfg.s, cfg.t, n, c=cfg.c, stats=stats)
                           .to_report("growth", n))
        if "doob" in cfg.checks:
            v0 = lyapunov_V(eta0)
            for k, r in zip(cfg.thresholds, doob_bound_test(model, eta0, cfg.s, cfg.t,
                                                            [k * v0 for k in cfg.thresholds], n,
                                                            c=cfg.c, stats=stats)):
                reports.append(r.to_report(f"doob@{k:g}V0", n))
        if "moments" in cfg.checks:
            if not isinstance(model, DlParams):
                raise ValidationError("moment bounds are stated for dl models")
            for r in moment_bound_test(model, eta0, cfg.s, cfg.t, n, stats=stats):
                reports.append(r.to_report(f"moments:{r.label.split()[-1]}", n))
    if "xcheck" in cfg.checks:
        if isinstance(model, FiniteKernel):
            raise ValidationError("xcheck needs a count-reducible model")
        x0 = cfg.initial_state(model)
        x0 = _count(x0)
        xc = simulator_vs_solver(model, cfg.s, cfg.t, cfg.truncation, cfg.replicates, cfg.seed,
                                 x0=x0, step=cfg.step, workers=workers, window=cfg.window)
        xc.tolerance = cfg.tolerance
        reports.append(VerificationReport("xcheck", cfg.tolerance, xc.tv_distance,
                                          xc.tv_distance - cfg.tolerance, cfg.replicates, xc.passed,
                                          {"solver_defect": xc.solver_defect}))
    return reports


def cmd_verify(cfg: RunConfig, workers: int):
    reports = _verify_reports(cfg, workers)
    sys.stdout.write(reports_to_text(reports))
    status = EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL
    if cfg.format == "jsonl":
        body = "".join(r.to_json() + "\n" for r in reports)
    else:
        cols = ["condition", "passed", "constant", "estimate", "worst_violation", "n_configs"]
        body = _table("csv", cols, [[getattr(r, c) for c in cols] for r in reports])
    return body, status


def cmd_sweep(cfg: RunConfig, workers: int):
    if cfg.replicates < 2:
        raise ValidationError("sweep needs at least 2 replicates")
    rows = []
    for value in cfg.sweep_values:
        sub = with_override(cfg, cfg.sweep_key, value)
        model = sub.model()
        kernel = _kernel(model)
        x0 = sub.initial_state(model)
        stats = path_statistics(kernel, x0, cfg.s, cfg.t, cfg.replicates, cfg.seed, workers,
                                opts=_opts(cfg))
        n = stats[:, 0]
        en, ev = summarize(n), summarize(n + n * n)
        rows.append([float(value), en.mean, en.stderr, ev.mean, ev.stderr, int(stats[:, 2].sum())])
    cols = ["value", "mean_n", "stderr_n", "mean_V", "stderr_V", "capped"]
    return _table(cfg.format, cols, rows), EXIT_OK


def cmd_cluster_stats(cfg: RunConfig, workers: int):
    model = cfg.model()
    if not isinstance(model, GdlParams):
        raise ValidationError("cluster-stats needs a gdl model")
    res = cluster_size_test(cfg.draws, replicate_rng(cfg.seed, 0))
    sys.stdout.write(f"mean={res.mean:.6f} stderr={res.stderr:.6f} expected={res.expected_mean:.6f} "
                     f"chi2={res.chi2:.4f} p={res.p_value:.4f}\n")
    rows = [[int(k), int(c), float(c) / cfg.draws, float(e) / cfg.draws]
            for k, c, e in zip(res.sizes, res.counts, res.expected)]
    return _table(cfg.format, ["k", "count", "frequency", "expected"], rows), EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "moments": cmd_moments,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "cluster-stats": cmd_cluster_stats,
}


def run(cfg: RunConfig) -> int:
    """Execute a validated config; returns the exit status."""
    workers = cfg.workers or available_workers()
    body, status = HANDLERS[cfg.command](cfg, workers)
    text = _header(cfg, cfg.format) + body
    if cfg.out:
        atomic_write(cfg.out, text)
    else:
        sys.stdout.write(text)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdjump", description="Birth-death jump process toolkit")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=FORMATS, help="output format")
    p.add_argument("--workers", type=int, help="worker processes (default: available CPUs)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        cfg.command = args.command
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.format is not None:
            cfg.format = args.format
        if args.workers is not None:
            cfg.workers = args.workers
        cfg.validate()
        return run(cfg)
    except (BdjumpError, OSError, ValueError) as exc:
        print(f"bdjump: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
