"""Command-line entry point.

    bilevel-flow run <config.yaml>   [--seed N] [--out DIR]
    bilevel-flow grid <config.yaml>  [--seed N] [--out DIR] [--jobs J]
    bilevel-flow check <config.yaml> [--seed N]

Exit codes: 0 success, 1 solver error or failed check, 2 config error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, override_config
from .errors import BilevelFlowError, ConfigError
from .harness import RunSummary, ablation_grid, build_problem, run
from .problems import SolverState, check_derivatives, solve_lower

_FD_POINTS = 10
_FD_STEP = 1e-5
_FD_TOL = 1e-5


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bilevel-flow",
        description="Continuous-time bilevel optimization experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run a single configured experiment"),
        ("grid", "run the sweep section of a config as an ablation grid"),
        ("check", "run derivative and invariant checks on the configured problem"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name != "check":
            p.add_argument("--out", default=None, help="override the output directory")
        if name == "grid":
            p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    return parser


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        config = override_config(config, {"seed": args.seed})
    if getattr(args, "out", None) is not None:
        config = replace(config, output_dir=args.out)
    return config


def _print_summary(summary: RunSummary) -> None:
    s = summary
    print(f"solver={s.solver} problem={s.problem} seed={s.seed}")
    print(f"  stop_reason={s.stop_reason} grad_evals={s.grad_evals} wall={s.wall_time:.3f}s")
    if s.final_kkt is not None:
        print(f"  final_kkt={s.final_kkt:.3e} final_norm_grad_y_g={s.final_norm_grad_y_g:.3e}")
    if s.energy_violations is not None:
        print(f"  energy_violations={s.energy_violations}")
    if s.error is not None:
        print(f"  error: {s.error}")


def _grid_cell(payload):
    base, overrides, out_dir = payload
    cfg = override_config(base, overrides)
    if out_dir is not None:
        cfg = replace(cfg, output_dir=out_dir)
    return run(cfg)


def _cmd_run(args) -> int:
    config, sweep = load_config(args.config)
    if sweep:
        raise ConfigError("config has a sweep section; use the grid subcommand")
    config = _apply_overrides(config, args)
    summary = run(config)
    _print_summary(summary)
    return 1 if summary.error else 0


def _cmd_grid(args) -> int:
    config, sweep = load_config(args.config)
    if not sweep:
        raise ConfigError("grid subcommand needs a sweep section in the config")
    config = _apply_overrides(config, args)
    if args.jobs > 1:
        # cells are independent; parallelize across processes
        import itertools

        keys = sorted(sweep)
        cells = list(itertools.product(*(sweep[k] for k in keys)))
        payloads = []
        for combo in cells:
            label = "__".join(f"{k.replace('.', '-')}={v}" for k, v in zip(keys, combo))
            out_dir = None
            if config.output_dir is not None:
                out_dir = str(Path(config.output_dir) / label)
            payloads.append((config, dict(zip(keys, combo)), out_dir))
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_grid_cell, payloads))
    else:
        summaries = ablation_grid(config, sweep).summaries
    failed = 0
    for summary in summaries:
        _print_summary(summary)
        failed += 1 if summary.error else 0
    print(f"grid finished: {len(summaries) - failed}/{len(summaries)} cells succeeded")
    return 1 if failed else 0


def _cmd_check(args) -> int:
    config, _ = load_config(args.config)
    config = _apply_overrides(config, args)
    problem = build_problem(config.problem, default_seed=config.seed)
    rng = np.random.default_rng(config.seed)
    ok = True

    worst = 0.0
    for _ in range(_FD_POINTS):
        point = SolverState(
            rng.standard_normal(problem.dim_upper), rng.standard_normal(problem.dim_lower)
        )
        worst = max(worst, check_derivatives(problem, point, _FD_STEP).max_error)
    good = worst <= _FD_TOL
    ok &= good
    print(f"derivatives vs finite differences: max rel err {worst:.2e} "
          f"(tol {_FD_TOL:.0e}) {'ok' if good else 'FAIL'}")

    mu = problem.constants.mu_g
    if mu is not None:
        min_eig = np.inf
        for _ in range(_FD_POINTS):
            x = rng.standard_normal(problem.dim_upper)
            y = rng.standard_normal(problem.dim_lower)
            _, _, _, hyy = problem.lower(x, y)
            min_eig = min(min_eig, float(np.linalg.eigvalsh(hyy)[0]))
        good = min_eig >= mu - 1e-8
        ok &= good
        print(f"lower Hessian eigenvalues: min {min_eig:.6g} vs declared mu_g {mu:.6g} "
              f"{'ok' if good else 'FAIL'}")

    truth = problem.ground_truth
    if truth is not None and truth.lower_solution is not None:
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal(problem.dim_upper)
            _, gyg, _, _ = problem.lower(x, truth.lower_solution(x))
            worst = max(worst, float(np.linalg.norm(gyg)))
        good = worst <= 1e-8
        ok &= good
        print(f"ground-truth lower solutions: max ||grad_y g|| {worst:.2e} "
              f"{'ok' if good else 'FAIL'}")
    else:
        x = rng.standard_normal(problem.dim_upper)
        y = solve_lower(problem, x, tol=1e-8)
        _, gyg, _, _ = problem.lower(x, y)
        good = float(np.linalg.norm(gyg)) <= 1e-8
        ok &= good
        print(f"newton lower solve: ||grad_y g|| {np.linalg.norm(gyg):.2e} "
              f"{'ok' if good else 'FAIL'}")

    return 0 if ok else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "grid":
            return _cmd_grid(args)
        return _cmd_check(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BilevelFlowError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
