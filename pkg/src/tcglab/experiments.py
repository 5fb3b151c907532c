"""Reproducible experiments behind the ``tcglab`` command line.

Each command takes an :class:`ExperimentSpec`, writes CSV files (17
significant digits) and one ``summary.json`` into the output directory and
returns ``(summary, ok)``.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from .polylab import (
    NotWellDefinedError,
    iterate_comparison,
    ritz_values,
    root_displacement_bound,
    sigma_diagnostics,
    stieltjes,
    verify_rho_identity,
    write_sigma_csv,
)
from .problems import problem_from_name, problem_remark_counterexample
from .spectral import SpectralMeasure, SplitSpectralMeasure, read_measure_csv
from .tcg import TcgParams, tcg, write_trace_csv
from .tr import TrConfig, _jsonable, capture_experiment, evaluate_conditions, tr_minimize


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- instances ----------------------------------------------------------------------

def figure2_split() -> SplitSpectralMeasure:
    """Head: 10 evenly spaced eigenvalues on [0.95, 1.05] with equal weights of
    total norm 1. Tail: one atom at 0 with weight 1e-3."""
    head = SpectralMeasure(np.linspace(1.05, 0.95, 10), np.full(10, 1 / math.sqrt(10)))
    tail = SpectralMeasure(np.array([0.0]), np.array([1e-3]))
    return SplitSpectralMeasure(head, tail)


def random_split(rng: np.random.Generator, max_head: int = 10, max_tail: int = 3,
                 tail_lambda: float = 1e-3, tail_weight: float = 1e-2) -> SplitSpectralMeasure:
    """Random split with a well-separated head in [1, 10] and a small tail.

    Head eigenvalues keep a relative spacing of at least 5% so the head grade
    is the head size. Tail eigenvalues are uniform in ``[-tail_lambda, tail_lambda]``
    and tail weights uniform in ``[0, tail_weight]``.
    """
    d = int(rng.integers(2, max_head + 1))
    while True:
        lam = np.sort(rng.uniform(1.0, 10.0, d))[::-1]
        if d == 1 or np.all(-np.diff(lam) >= 0.05 * lam[1:]):
            break
    w = rng.uniform(0.5, 1.5, d) * rng.choice([-1.0, 1.0], d)
    m = int(rng.integers(1, max_tail + 1))
    tl = np.sort(rng.uniform(-tail_lambda, tail_lambda, m))[::-1]
    tw = rng.uniform(0.0, tail_weight, m)
    return SplitSpectralMeasure(SpectralMeasure(lam, w), SpectralMeasure(tl, tw))


def _load_split(params) -> SplitSpectralMeasure:
    path = params.get("measure")
    if not path:
        return figure2_split()
    m = read_measure_csv(path)
    if isinstance(m, SpectralMeasure):
        raise ValueError(f"{path}: a split measure needs a 'part' column")
    return m


# --- spec -----------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    name: str
    params: Dict[str, str] = field(default_factory=dict)
    seed: int = 0
    out: str = "."


@dataclass(frozen=True)
class Command:
    run: Callable
    defaults: Dict[str, object]


def _coerce(defaults: Dict[str, object], raw: Dict[str, str]) -> Dict[str, object]:
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ValueError(f"unknown parameter(s): {', '.join(sorted(unknown))}; "
                         f"allowed: {', '.join(sorted(defaults))}")
    out = dict(defaults)
    for key, val in raw.items():
        ref = defaults[key]
        if isinstance(ref, bool):
            out[key] = val.lower() in ("1", "true", "yes")
        elif isinstance(ref, int):
            out[key] = int(val)
        elif isinstance(ref, float):
            out[key] = float(val)
        else:
            out[key] = val
    return out


# --- cg-dynamics ------------------------------------------------------------------------

def cmd_cg_dynamics(spec: ExperimentSpec) -> Tuple[dict, bool]:
    p = _coerce(COMMANDS["cg-dynamics"].defaults, spec.params)
    split = _load_split(p)
    A, b = split.head.dense()
    At, bt = split.full().dense()
    plain = TcgParams(mode="plain")
    head_tr = tcg(A, b, params=plain)
    full_tr = tcg(At, bt, params=plain)
    vh, rh = head_tr.v_norms(), head_tr.r_norms()
    vf, rf = full_tr.v_norms(), full_tr.r_norms()
    rows = []
    for n in range(max(vh.size, vf.size)):
        rows.append(dict(
            n=n,
            v_tilde_norm=vf[n] if n < vf.size else None,
            r_tilde_norm=rf[n] if n < rf.size else None,
            v_norm=vh[n] if n < vh.size else None,
            r_norm=rh[n] if n < rh.size else None,
        ))
    write_rows(os.path.join(spec.out, "cg_dynamics.csv"),
               ["n", "v_tilde_norm", "r_tilde_norm", "v_norm", "r_norm"], rows)

    full_rec = stieltjes(split.full())
    ritz_rows = []
    for n in range(1, full_rec.grade + 1):
        for i, z in enumerate(ritz_values(full_rec, n)):
            ritz_rows.append(dict(n=n, index=i + 1, ritz=z))
    write_rows(os.path.join(spec.out, "ritz.csv"), ["n", "index", "ritz"], ritz_rows)
    write_sigma_csv(os.path.join(spec.out, "sigma.csv"), sigma_diagnostics(split))

    trace = tcg(At, bt, p["delta"], TcgParams(kappa=p["kappa"], theta=p["theta"]))
    write_trace_csv(os.path.join(spec.out, "tcg_trace.csv"), trace)
    v_ref = float(np.linalg.norm(np.linalg.solve(A, b)))

    early = None
    for n in range(1, min(11, vf.size, vh.size)):
        if rf[n] <= p["early_residual"] and vf[n] <= 2 * vh[n]:
            early = n
            break
    n_cap = min(12, vf.size)
    explosion = float(vf[:n_cap].max() / vh[: min(12, vh.size)].max())
    out_norm = float(np.linalg.norm(trace.output))
    summary = dict(
        command="cg-dynamics",
        d=split.d,
        tail_size=len(split.tail),
        early_stop_n=early,
        explosion_ratio=explosion,
        tcg_termination=trace.termination,
        tcg_iterations=trace.iterations,
        tcg_output_norm=out_norm,
        v_ref_norm=v_ref,
    )
    ok = (early is not None and explosion >= 100 and trace.termination == "residual_small"
          and out_norm <= 2 * v_ref) if len(split.tail) else True
    summary["figure2_shape"] = bool(ok)
    write_summary(os.path.join(spec.out, "summary.json"), summary)
    return summary, True


# --- tr-run ---------------------------------------------------------------------------

def _tr_config(p) -> TrConfig:
    return TrConfig(
        rho_prime=p["rho_prime"],
        Delta_bar=p["delta_bar"],
        Delta_0=p["delta_0"] if p["delta_0"] > 0 else None,
        max_outer=p["max_outer"],
        grad_tol=p["grad_tol"],
        solver=p["solver"],
        tcg_params=TcgParams(kappa=p["kappa"], theta=p["theta"]),
        hessian=p["hessian"],
    )


def _initial_point(problem, init: str, seed: int) -> np.ndarray:
    if init == "random":
        return problem.initial_point(seed)
    if init.startswith("path:"):
        if problem.path is None:
            raise ValueError(f"{problem.name} has no path parametrization")
        return problem.path(float(init[5:]))
    raise ValueError(f"unknown init {init!r}; use 'random' or 'path:<eps>'")


def cmd_tr_run(spec: ExperimentSpec) -> Tuple[dict, bool]:
    p = _coerce(COMMANDS["tr-run"].defaults, spec.params)
    problem = problem_from_name(p["problem"])
    config = _tr_config(p)
    x0 = _initial_point(problem, p["init"], spec.seed)
    rec = tr_minimize(problem, x0, config)
    rec.to_csv(os.path.join(spec.out, "tr_run.csv"))
    report = evaluate_conditions(rec, problem, p["theta"], p["tail_fraction"])
    extra = dict(
        command="tr-run",
        problem=problem.name,
        solver=config.solver,
        status=rec.status,
        iterations=len(rec.iterations),
        final_grad_norm=rec.grad_norm_final,
        boundary_steps=rec.boundary_steps,
        min_strong_decrease_margin=(float(report.strong_decrease_margins.min())
                                    if report.strong_decrease_margins.size else None),
    )
    if problem.path is not None:
        extra["final_distance_to_c0"] = float(np.linalg.norm(rec.x_final - problem.path(0.0)))
    report.to_json(os.path.join(spec.out, "conditions.json"), extra)
    summary = dict(report.to_dict(), **extra)
    write_summary(os.path.join(spec.out, "summary.json"), summary)
    return summary, rec.status == "converged"


# --- sigma-check ------------------------------------------------------------------------

SIGMA_CHECK_HEADER = ["instance", "n", "identity_residual", "sigma_l1", "root_lhs", "root_rhs",
                      "root_ok", "iterate_head_ok", "iterate_tail_ok", "passed"]


def check_split(split: SplitSpectralMeasure, instance: int, identity_tol: float,
                n_min: int = 1, n_max: int = 0):
    head_rec = stieltjes(split.head)
    top = head_rec.grade if n_max <= 0 else min(n_max, head_rec.grade)
    rows = []
    for n in range(max(1, n_min), top + 1):
        resid = verify_rho_identity(split, n)
        root = root_displacement_bound(split, n)
        head_ok = tail_ok = None
        if root.rhs < 1:
            try:
                cmp_ = iterate_comparison(split, n)
                head_ok, tail_ok = cmp_.head_ok, cmp_.tail_bounds_ok
            except NotWellDefinedError:
                head_ok = tail_ok = False
        passed = resid <= identity_tol and root.holds and head_ok is not False and tail_ok is not False
        rows.append(dict(instance=instance, n=n, identity_residual=resid, sigma_l1=root.rhs,
                         root_lhs=root.lhs, root_rhs=root.rhs, root_ok=root.holds,
                         iterate_head_ok=head_ok, iterate_tail_ok=tail_ok, passed=passed))
    return rows


def cmd_sigma_check(spec: ExperimentSpec) -> Tuple[dict, bool]:
    p = _coerce(COMMANDS["sigma-check"].defaults, spec.params)
    rows = []
    if p["random"] > 0:
        rng = np.random.default_rng(spec.seed)
        for i in range(p["random"]):
            rows += check_split(random_split(rng), i, p["identity_tol"], p["n_min"], p["n_max"])
    else:
        rows = check_split(_load_split(p), 0, p["identity_tol"], p["n_min"], p["n_max"])
    write_rows(os.path.join(spec.out, "sigma_check.csv"), SIGMA_CHECK_HEADER, rows)
    failures = sum(not r["passed"] for r in rows)
    summary = dict(
        command="sigma-check",
        checks=len(rows),
        failures=failures,
        max_identity_residual=max(r["identity_residual"] for r in rows),
    )
    write_summary(os.path.join(spec.out, "summary.json"), summary)
    return summary, failures == 0


# --- remark-asymptotics --------------------------------------------------------------------

REMARK_LIMITS = (1.0, 0.25, 1.0 / 6.0)


def remark_row(eps: float) -> dict:
    """CG on the Hessian at ``c(eps)`` with right-hand side ``-grad f(c(eps))``."""
    prob = problem_remark_counterexample()
    z = prob.path(eps)
    H = prob.hess(z)
    g = prob.grad(z)
    well = bool(np.linalg.eigvalsh(H.dense()).min() > 0)
    trace = tcg(H, -g, params=TcgParams(mode="plain", max_iterations=2))
    row = dict(eps=eps, grad_ratio=float(g @ g) / eps, well_defined=well,
               r1_ratio=None, v2_ratio=None)
    if trace.iterations >= 2 and well:
        row["r1_ratio"] = trace.steps[0].r_norm / eps
        row["v2_ratio"] = eps * trace.steps[1].v_norm
    else:
        row["well_defined"] = False
    return row


def cmd_remark_asymptotics(spec: ExperimentSpec) -> Tuple[dict, bool]:
    p = _coerce(COMMANDS["remark-asymptotics"].defaults, spec.params)
    eps_list = [float(e) for e in str(p["eps"]).split(",") if e.strip()]
    rows = [remark_row(e) for e in eps_list]
    for r in rows:
        for key, lim in zip(("r1_ratio", "grad_ratio", "v2_ratio"), REMARK_LIMITS):
            r[key + "_dev"] = abs(r[key] / lim - 1) if r[key] is not None else None
    header = ["eps", "r1_ratio", "grad_ratio", "v2_ratio",
              "r1_ratio_dev", "grad_ratio_dev", "v2_ratio_dev", "well_defined"]
    write_rows(os.path.join(spec.out, "remark_asymptotics.csv"), header, rows)
    ok = all(r["well_defined"] for r in rows)
    summary = dict(command="remark-asymptotics", rows=len(rows), all_well_defined=ok,
                   limits=list(REMARK_LIMITS))
    write_summary(os.path.join(spec.out, "summary.json"), summary)
    return summary, ok


# --- capture -----------------------------------------------------------------------------

def cmd_capture(spec: ExperimentSpec) -> Tuple[dict, bool]:
    p = _coerce(COMMANDS["capture"].defaults, spec.params)
    problem = problem_from_name(p["problem"])
    if problem.solution_param is None:
        raise ValueError(f"{problem.name} has no parametrization of its solution set")
    rng = np.random.default_rng(spec.seed)
    center = problem.solution_param(rng.uniform(-2.0, 2.0, problem.param_dim))
    config = _tr_config(p)
    res = capture_experiment(problem, center, p["radius_start"], p["radius_stay"], p["trials"],
                             config, seed=spec.seed + 1, theta=p["theta"])
    header = ["trial", "captured", "converged", "max_distance", "iterations",
              "first_step_boundary", "boundary_steps", "first_step_ratio", "c1_max_tail"]
    write_rows(os.path.join(spec.out, "capture.csv"), header,
               [t.__dict__ for t in res.trials])
    c1 = [t.c1_max_tail for t in res.trials if not math.isnan(t.c1_max_tail)]
    summary = dict(
        command="capture",
        problem=problem.name,
        solver=config.solver,
        trials=len(res.trials),
        capture_rate=res.rate,
        boundary_first_step_fraction=res.boundary_first_step_fraction,
        boundary_step_fraction=res.boundary_step_fraction,
        c1_max_tail=max(c1) if c1 else None,
    )
    write_summary(os.path.join(spec.out, "summary.json"), summary)
    return summary, True


_TR_DEFAULTS = dict(
    solver="tcg", kappa=0.1, theta=0.5, rho_prime=0.1, delta_bar=10.0, delta_0=0.0,
    max_outer=100, grad_tol=1e-9, hessian="exact",
)

COMMANDS: Dict[str, Command] = {
    "cg-dynamics": Command(cmd_cg_dynamics, dict(
        measure="", kappa=0.1, theta=0.5, delta=1e3, early_residual=2e-3)),
    "tr-run": Command(cmd_tr_run, dict(
        _TR_DEFAULTS, problem="sine-lsq:n=100", init="random", tail_fraction=0.5)),
    "sigma-check": Command(cmd_sigma_check, dict(
        measure="", random=0, n_min=1, n_max=0, identity_tol=1e-7)),
    "remark-asymptotics": Command(cmd_remark_asymptotics, dict(eps="1e-3,1e-4,1e-5,1e-6")),
    "capture": Command(cmd_capture, dict(
        _TR_DEFAULTS, problem="sine-lsq:n=100", radius_start=1e-2, radius_stay=1e-1, trials=20)),
}


def run_experiment(spec: ExperimentSpec) -> Tuple[dict, bool]:
    if spec.name not in COMMANDS:
        raise ValueError(f"unknown command {spec.name!r}")
    os.makedirs(spec.out, exist_ok=True)
    return COMMANDS[spec.name].run(spec)

