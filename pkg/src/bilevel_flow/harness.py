"""Experiment runner: builds problems, runs solvers, persists artifacts.

Artifacts per run, written under the configured output directory:

    trajectory.csv   columns t, x0..x{n-1}, y0..y{m-1}, norm_grad_y_g, h, f,
                     lambda_norm, grad_evals (17 significant digits)
    energy.csv       columns t, value, objective_gap, barrier, integral
                     (only for solvers with a defined energy)
    summary.json     RunSummary fields; reproducible bit-for-bit from
                     (config, seed) except wall_time

Solver errors are recorded in the summary with whatever artifacts the
partial trajectory allows; grids keep going past failed cells.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import certificates, dynamics
from .config import (
    AidParams,
    ExperimentConfig,
    ProblemSpec,
    config_hash,
    override_config,
    validate_config,
)
from .errors import BilevelFlowError, ConfigError
from .integrator import IntegratorConfig, Snapshot, StepDiagnostics, Trajectory, integrate
from .problems import (
    BilevelProblem,
    SolverState,
    make_hypercleaning,
    make_quadratic_ll,
    make_toy1,
    solve_lower,
)

__all__ = [
    "RunSummary",
    "HypercleaningReport",
    "GridResult",
    "build_problem",
    "init_state",
    "make_field",
    "run",
    "aid_baseline",
    "ablation_grid",
    "hypercleaning_eval",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "write_energy_csv",
]

_QUADRATIC_DEFAULTS = {"n": 20, "m": 20, "cond_max": 10.0}
_HYPERCLEANING_DEFAULTS = {
    "n_train": 200, "n_val": 100, "dim": 10, "classes": 3,
    "corrupt_frac": 0.25, "reg": 0.001,
}


@dataclass
class RunSummary:
    solver: str
    problem: str
    seed: int
    grad_evals: int
    wall_time: float
    stop_reason: str | None
    final_kkt: float | None = None
    final_norm_grad_y_g: float | None = None
    final_f: float | None = None
    f_ref: float | None = None
    f_ref_shifted: bool = True
    energy_violations: int | None = None
    time_to_eps: float | None = None
    error: str | None = None
    extra: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HypercleaningReport:
    times: np.ndarray
    val_loss: np.ndarray
    mean_clean_weight: float
    mean_corrupt_weight: float | None
    weight_separation: float | None


@dataclass
class GridResult:
    keys: list
    cells: list
    summaries: list


def build_problem(spec: ProblemSpec, default_seed: int = 0) -> BilevelProblem:
    """Instantiate a shipped problem from its name + parameter record.

    Generated problems default their instance seed to the run seed so that a
    seed sweep varies the whole experiment.
    """
    params = dict(spec.params)
    try:
        if spec.name == "toy1":
            if params:
                raise ConfigError(f"toy1 takes no parameters, got {sorted(params)}")
            return make_toy1()
        if spec.name == "quadratic_ll":
            merged = {**_QUADRATIC_DEFAULTS, "seed": default_seed, **params}
            unknown = set(merged) - {"seed", "n", "m", "cond_max"}
            if unknown:
                raise ConfigError(f"unknown quadratic_ll parameters: {sorted(unknown)}")
            return make_quadratic_ll(
                seed=int(merged["seed"]), n=int(merged["n"]), m=int(merged["m"]),
                cond_max=float(merged["cond_max"]),
            )
        if spec.name == "hypercleaning":
            merged = {**_HYPERCLEANING_DEFAULTS, "seed": default_seed, **params}
            unknown = set(merged) - {
                "seed", "n_train", "n_val", "dim", "classes", "corrupt_frac", "reg",
            }
            if unknown:
                raise ConfigError(f"unknown hypercleaning parameters: {sorted(unknown)}")
            return make_hypercleaning(
                seed=int(merged["seed"]), n_train=int(merged["n_train"]),
                n_val=int(merged["n_val"]), dim=int(merged["dim"]),
                classes=int(merged["classes"]), corrupt_frac=float(merged["corrupt_frac"]),
                reg=float(merged["reg"]),
            )
    except ValueError as exc:
        raise ConfigError(f"bad problem parameters: {exc}") from exc
    raise ConfigError(f"unknown problem {spec.name!r}")


def init_state(problem: BilevelProblem, config: ExperimentConfig) -> SolverState:
    """Initial state per the init spec; the run seed drives any randomness.

    "feasible" solves the lower level to tolerance eps/2 so the start point
    satisfies h <= eps^2/4, giving the relaxed filter's invariance condition
    margin at t = 0.
    """
    init = config.init
    rng = np.random.default_rng(config.seed)
    if init.kind == "explicit":
        x0 = np.asarray(init.x0, dtype=float)
        y0 = np.asarray(init.y0, dtype=float)
    elif init.kind == "random":
        x0 = init.scale * rng.standard_normal(problem.dim_upper)
        y0 = init.scale * rng.standard_normal(problem.dim_lower)
    else:  # feasible
        if init.x0 is not None:
            x0 = np.asarray(init.x0, dtype=float)
        else:
            x0 = init.scale * rng.standard_normal(problem.dim_upper)
        tol = config.eps / 2.0 if config.eps is not None else 1e-10
        y0 = solve_lower(problem, x0, tol=tol)
    if x0.shape != (problem.dim_upper,) or y0.shape != (problem.dim_lower,):
        raise ConfigError(
            f"init shapes {x0.shape}/{y0.shape} do not match problem dims "
            f"({problem.dim_upper},)/({problem.dim_lower},)"
        )
    return SolverState(x0, y0, 0.0, 0)


def make_field(problem: BilevelProblem, config: ExperimentConfig):
    solver = config.solver
    if solver == "sgf":
        return lambda s: dynamics.safe_flow_velocity(problem, s.x, s.y, config.alpha)
    if solver == "compact":
        return lambda s: dynamics.compact_flow_velocity(problem, s.x, s.y, config.alpha)
    if solver == "rxgf":
        return lambda s: dynamics.relaxed_flow_velocity(problem, s.x, s.y, config.alpha, config.eps)
    if solver == "pc":
        return lambda s: dynamics.prediction_correction_velocity(problem, s.x, s.y, config.beta)
    if solver == "raw-gf":
        return lambda s: dynamics.gradient_flow_velocity(problem, s.x, s.y)
    raise ConfigError(f"no velocity field for solver {config.solver!r}")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_trajectory_csv(trajectory: Trajectory, path: Path, n: int, m: int) -> None:
    header = (
        ["t"]
        + [f"x{i}" for i in range(n)]
        + [f"y{j}" for j in range(m)]
        + ["norm_grad_y_g", "h", "f", "lambda_norm", "grad_evals"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for snap in trajectory.snapshots:
            d = snap.diagnostics
            row = (
                [_fmt(snap.state.t)]
                + [_fmt(v) for v in snap.state.x]
                + [_fmt(v) for v in snap.state.y]
                + [_fmt(d.norm_grad_y_g), _fmt(d.h), _fmt(d.f_value), _fmt(d.lambda_norm)]
                + [str(int(snap.state.grad_evals))]
            )
            writer.writerow(row)


def read_trajectory_csv(path: Path) -> dict:
    """Columns as float arrays keyed by header name (grad_evals as int)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                cols[name].append(value)
    out = {}
    for name, values in cols.items():
        if name == "grad_evals":
            out[name] = np.array([int(v) for v in values])
        else:
            out[name] = np.array([float(v) for v in values])
    return out


def write_energy_csv(series: certificates.EnergySeries, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "value", "objective_gap", "barrier", "integral"])
        for i in range(len(series.times)):
            writer.writerow([
                _fmt(series.times[i]), _fmt(series.values[i]),
                _fmt(series.objective_gap[i]), _fmt(series.barrier[i]),
                _fmt(series.integral[i]),
            ])


def _power_iteration_top_eig(hyy: np.ndarray, rng: np.random.Generator, iters: int = 50) -> float:
    v = rng.standard_normal(hyy.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = hyy @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 1.0
        v = w / lam
    return lam


def aid_baseline(problem: BilevelProblem, config: ExperimentConfig) -> Trajectory:
    """Double-loop discrete baseline under the flows' oracle accounting.

    Each outer cycle runs inner_steps gradient steps on g (one lower bundle
    each) and one surrogate hypergradient step on x (upper bundle plus lower
    bundle with both Hessian blocks, 4 units).  In budget mode any remainder
    too small for a full cycle is spent on single inner steps, so the final
    count matches the budget exactly.

    Step sizes default to 1 / (power-iteration estimate of the top lower
    Hessian eigenvalue at the start point); the values used are recorded in
    the trajectory metadata.  Snapshot times count outer cycles, with inner
    steps at fractional times.
    """
    validate_config(config)
    aid = config.aid
    state = init_state(problem, config)
    rng = np.random.default_rng(config.seed + 1)

    _, _, _, hyy0 = problem.lower(state.x, state.y)
    default_step = 1.0 / _power_iteration_top_eig(hyy0, rng)
    inner_step = aid.inner_step if aid.inner_step is not None else default_step
    outer_step = aid.outer_step if aid.outer_step is not None else default_step

    inner = aid.inner_steps
    cycle_cost = inner + 4
    if aid.outer_steps is not None:
        n_outer = aid.outer_steps
        budget = None
    else:
        budget = aid.budget
        n_outer = budget // cycle_cost

    meta = {
        "solver": "aid", "problem": problem.name,
        "inner_step": inner_step, "outer_step": outer_step,
        "inner_steps": inner, "outer_iterations": n_outer,
    }

    def observe(state):
        f, gx, gy = problem.upper(state.x, state.y)
        _, gyg, _, _ = problem.lower(state.x, state.y)
        F = dynamics.surrogate_hypergradient(problem, state.x, state.y)
        out = dynamics.FilterOutput(
            xdot=-F, ydot=-gyg, dual=None, active=False, evals=0,
            f_value=f, norm_grad_y_g=float(np.linalg.norm(gyg)), h=float(gyg @ gyg),
        )
        return Snapshot(state, out, StepDiagnostics(
            norm_grad_y_g=out.norm_grad_y_g, h=out.h, f_value=f, lambda_norm=0.0,
        ))

    snaps = [observe(state)]
    stride = config.integrator.record_every
    micro = 0

    def maybe_record(state, force=False):
        nonlocal micro
        micro += 1
        if force or micro % stride == 0:
            snaps.append(observe(state))
            return True
        return False

    x, y = state.x.copy(), state.y.copy()
    evals = state.grad_evals
    recorded_last = True
    for k in range(n_outer):
        for j in range(inner):
            _, gyg, _, _ = problem.lower(x, y)
            y = y - inner_step * gyg
            evals += 1
            state = SolverState(x, y, k + (j + 1) / (inner + 1), evals)
            recorded_last = maybe_record(state)
        F = dynamics.surrogate_hypergradient(problem, x, y)
        x = x - outer_step * F
        evals += 4
        state = SolverState(x, y, float(k + 1), evals)
        recorded_last = maybe_record(state)
    if budget is not None:
        tail = budget - evals
        for j in range(tail):
            _, gyg, _, _ = problem.lower(x, y)
            y = y - inner_step * gyg
            evals += 1
            state = SolverState(x, y, n_outer + (j + 1) / (tail + 1), evals)
            recorded_last = maybe_record(state)
    if not recorded_last:
        snaps.append(observe(state))
    meta["stop_reason"] = "budget"
    return Trajectory(snaps, meta)


def hypercleaning_eval(trajectory: Trajectory, problem: BilevelProblem) -> HypercleaningReport:
    """Validation-loss series plus clean-vs-corrupted weight separation.

    The separation (mean sigmoid weight of clean samples minus corrupted
    ones, at the final state) is reported as None when nothing was corrupted.
    """
    data = problem.extras.get("hypercleaning")
    if data is None:
        raise ValueError("problem was not built by make_hypercleaning")
    times = trajectory.times()
    val_loss = trajectory.f_values()
    x_final = trajectory.final_state.x
    weights = 1.0 / (1.0 + np.exp(-x_final))
    mask = data.corrupt_mask
    mean_clean = float(weights[~mask].mean())
    if mask.any():
        mean_corrupt = float(weights[mask].mean())
        separation = mean_clean - mean_corrupt
    else:
        mean_corrupt = None
        separation = None
    return HypercleaningReport(
        times=times, val_loss=val_loss,
        mean_clean_weight=mean_clean,
        mean_corrupt_weight=mean_corrupt,
        weight_separation=separation,
    )


def _energy_for(trajectory, problem, config):
    """Energy series for solvers that define one, else None."""
    truth = problem.ground_truth
    f_ref = truth.optimal_value if truth is not None else None
    shifted = f_ref is None
    ref = 0.0 if shifted else float(f_ref)
    if config.solver == "sgf":
        return certificates.safe_flow_energy(trajectory, problem, config.alpha, ref), ref, shifted
    if config.solver == "rxgf":
        return certificates.relaxed_flow_energy(trajectory, problem, ref), ref, shifted
    if config.solver == "pc":
        series = certificates.prediction_correction_energy(trajectory, problem)
        return series, series.constants["f_ref"], bool(series.constants["shifted"])
    return None, ref, shifted


def run(config: ExperimentConfig) -> RunSummary:
    """Execute one configured experiment; see the module docstring for artifacts.

    With repeats > 1 the run is repeated with seeds seed..seed+repeats-1 in
    rep<i>/ subdirectories and the first repeat's summary is returned.
    """
    validate_config(config)
    if config.repeats > 1:
        summaries = []
        for i in range(config.repeats):
            sub_dir = None
            if config.output_dir is not None:
                sub_dir = str(Path(config.output_dir) / f"rep{i}")
            sub = replace(config, repeats=1, seed=config.seed + i, output_dir=sub_dir)
            summaries.append(run(sub))
        if config.output_dir is not None:
            path = Path(config.output_dir) / "summary.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w") as fh:
                json.dump([s.to_dict() for s in summaries], fh, indent=2, sort_keys=True)
        return summaries[0]

    problem = build_problem(config.problem, default_seed=config.seed)
    state0 = init_state(problem, config)
    meta = {
        "solver": config.solver,
        "problem": problem.name,
        "config_hash": config_hash(config),
    }
    kkt_fn = lambda s: certificates.kkt_residual(problem, s.x, s.y)

    error = None
    trajectory = None
    t_start = time.perf_counter()
    try:
        if config.solver == "aid":
            trajectory = aid_baseline(problem, config)
            trajectory.metadata["config_hash"] = meta["config_hash"]
        else:
            field = make_field(problem, config)
            trajectory = integrate(
                field, state0, config.integrator, metadata=meta, kkt_residual_fn=kkt_fn
            )
    except BilevelFlowError as exc:
        error = f"{type(exc).__name__}: {exc}"
        trajectory = getattr(exc, "partial_trajectory", None)
    wall = time.perf_counter() - t_start

    summary = RunSummary(
        solver=config.solver,
        problem=config.problem.name,
        seed=config.seed,
        grad_evals=0,
        wall_time=wall,
        stop_reason=None,
        error=error,
    )
    energy = None
    if trajectory is not None and trajectory.snapshots:
        final = trajectory.final_state
        summary.grad_evals = int(final.grad_evals)
        summary.stop_reason = trajectory.metadata.get("stop_reason")
        summary.final_norm_grad_y_g = float(trajectory.norm_grad_y_g()[-1])
        summary.final_f = float(trajectory.f_values()[-1])
        try:
            summary.final_kkt = float(certificates.kkt_residual(problem, final.x, final.y))
        except BilevelFlowError:
            summary.final_kkt = None
        if error is None:
            energy, ref, shifted = _energy_for(trajectory, problem, config)
            summary.f_ref = ref
            summary.f_ref_shifted = shifted
            if energy is not None:
                summary.energy_violations = energy.violations()
        if config.eps is not None:
            norms = trajectory.norm_grad_y_g()
            hits = np.nonzero(norms <= config.eps)[0]
            if hits.size:
                summary.time_to_eps = float(trajectory.times()[hits[0]])
        if problem.name == "hypercleaning":
            report = hypercleaning_eval(trajectory, problem)
            summary.extra = {
                "val_loss_initial": float(report.val_loss[0]),
                "val_loss_final": float(report.val_loss[-1]),
                "weight_separation": report.weight_separation,
            }
        if config.solver == "aid":
            summary.extra = dict(summary.extra or {})
            summary.extra.update({
                "inner_step": trajectory.metadata.get("inner_step"),
                "outer_step": trajectory.metadata.get("outer_step"),
            })

    if config.output_dir is not None:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if trajectory is not None and trajectory.snapshots:
            write_trajectory_csv(
                trajectory, out / "trajectory.csv", problem.dim_upper, problem.dim_lower
            )
        if energy is not None:
            write_energy_csv(energy, out / "energy.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
    return summary


def ablation_grid(base: ExperimentConfig, sweep: dict) -> GridResult:
    """Run the cartesian product of the swept parameters over the base config.

    Failed cells (config or solver errors) are recorded and the grid keeps
    going.  When the base config has an output directory, cell artifacts land
    in subdirectories and a combined long-format grid.csv is written.
    """
    if not sweep:
        raise ConfigError("ablation grid requires a non-empty sweep")
    keys = sorted(sweep)
    cells = list(itertools.product(*(sweep[k] for k in keys)))
    summaries = []
    for combo in cells:
        overrides = dict(zip(keys, combo))
        label = "__".join(f"{k.replace('.', '-')}={v}" for k, v in zip(keys, combo))
        try:
            cfg = override_config(base, overrides)
            if base.output_dir is not None:
                cfg = replace(cfg, output_dir=str(Path(base.output_dir) / label))
            summary = run(cfg)
        except BilevelFlowError as exc:
            summary = RunSummary(
                solver=base.solver, problem=base.problem.name, seed=base.seed,
                grad_evals=0, wall_time=0.0, stop_reason=None,
                error=f"{type(exc).__name__}: {exc}",
            )
        summaries.append(summary)

    if base.output_dir is not None:
        out = Path(base.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        float_fields = (
            "final_kkt", "final_norm_grad_y_g", "final_f", "time_to_eps", "wall_time",
        )
        with open(out / "grid.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                list(keys)
                + ["solver", "problem", "seed", "grad_evals", "stop_reason",
                   "energy_violations", "error"]
                + list(float_fields)
            )
            for combo, s in zip(cells, summaries):
                row = [str(v) for v in combo]
                row += [s.solver, s.problem, str(s.seed), str(s.grad_evals),
                        str(s.stop_reason), str(s.energy_violations), str(s.error)]
                row += ["" if getattr(s, f) is None else _fmt(getattr(s, f))
                        for f in float_fields]
                writer.writerow(row)
    return GridResult(keys=keys, cells=cells, summaries=summaries)
