"""Experiment configuration schema, validation, and YAML loading.

A config file is a single YAML document whose keys map one-to-one onto
ExperimentConfig; the exact grammar is documented in the README.  Grid runs
add a top-level ``sweep`` section mapping parameter names to value lists.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import yaml

from .errors import ConfigError
from .integrator import IntegratorConfig

__all__ = [
    "SOLVERS",
    "PROBLEMS",
    "ProblemSpec",
    "InitSpec",
    "AidParams",
    "ExperimentConfig",
    "validate_config",
    "load_config",
    "config_hash",
    "override_config",
]

SOLVERS = ("sgf", "compact", "rxgf", "pc", "raw-gf", "aid")
PROBLEMS = ("toy1", "quadratic_ll", "hypercleaning")
INIT_KINDS = ("explicit", "random", "feasible")

# Grid-sweepable keys; integrator fields are routed into the nested config.
_SWEEP_DIRECT = ("alpha", "beta", "eps", "seed", "repeats")
_SWEEP_INTEGRATOR = ("dt", "horizon", "record_every", "stop_velocity_tol", "stop_kkt_tol")


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class InitSpec:
    kind: str = "random"
    x0: tuple | None = None
    y0: tuple | None = None
    scale: float = 1.0


@dataclass(frozen=True)
class AidParams:
    inner_steps: int
    outer_steps: int | None = None
    budget: int | None = None
    inner_step: float | None = None
    outer_step: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    solver: str
    integrator: IntegratorConfig
    init: InitSpec = InitSpec()
    alpha: float | None = None
    beta: float | None = None
    eps: float | None = None
    seed: int = 0
    output_dir: str | None = None
    repeats: int = 1
    aid: AidParams | None = None


def validate_config(config: ExperimentConfig) -> None:
    """Raise ConfigError on any inconsistency; cheap enough to call eagerly."""
    if config.solver not in SOLVERS:
        raise ConfigError(f"unknown solver {config.solver!r}; expected one of {SOLVERS}")
    if config.problem.name not in PROBLEMS:
        raise ConfigError(
            f"unknown problem {config.problem.name!r}; expected one of {PROBLEMS}"
        )
    if config.alpha is not None and config.alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {config.alpha}")
    if config.beta is not None and config.beta <= 0:
        raise ConfigError(f"beta must be positive, got {config.beta}")
    if config.eps is not None and config.eps <= 0:
        raise ConfigError(f"eps must be positive, got {config.eps}")
    if config.repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {config.repeats}")

    needs_alpha = config.solver in ("sgf", "compact", "rxgf")
    if needs_alpha and config.alpha is None:
        raise ConfigError(f"solver {config.solver!r} requires alpha")
    if config.solver == "rxgf" and config.eps is None:
        raise ConfigError("solver 'rxgf' requires eps")
    if config.solver == "pc" and config.beta is None:
        raise ConfigError("solver 'pc' requires beta")

    if config.solver == "aid":
        aid = config.aid
        if aid is None:
            raise ConfigError("solver 'aid' requires an aid section")
        if aid.inner_steps < 1:
            raise ConfigError(f"aid.inner_steps must be >= 1, got {aid.inner_steps}")
        if aid.outer_steps is None and aid.budget is None:
            raise ConfigError("aid requires outer_steps or budget")
        if aid.outer_steps is not None and aid.outer_steps < 1:
            raise ConfigError(f"aid.outer_steps must be >= 1, got {aid.outer_steps}")
        if aid.budget is not None and aid.budget < 1:
            raise ConfigError(f"aid.budget must be >= 1, got {aid.budget}")
        for name in ("inner_step", "outer_step"):
            val = getattr(aid, name)
            if val is not None and val <= 0:
                raise ConfigError(f"aid.{name} must be positive, got {val}")

    init = config.init
    if init.kind not in INIT_KINDS:
        raise ConfigError(f"unknown init kind {init.kind!r}; expected one of {INIT_KINDS}")
    if init.kind == "explicit" and (init.x0 is None or init.y0 is None):
        raise ConfigError("explicit init requires both x0 and y0")
    if init.scale <= 0:
        raise ConfigError(f"init.scale must be positive, got {init.scale}")


def _as_tuple(value, name):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of numbers") from exc


def _build(data: dict) -> ExperimentConfig:
    known = {
        "problem", "solver", "integrator", "init", "alpha", "beta", "eps",
        "seed", "output_dir", "repeats", "aid", "sweep",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    prob = data.get("problem")
    if not isinstance(prob, dict) or "name" not in prob:
        raise ConfigError("config needs a problem section with a name")
    extra = set(prob) - {"name", "params"}
    if extra:
        raise ConfigError(f"unknown problem keys: {sorted(extra)}")
    problem = ProblemSpec(name=str(prob["name"]), params=dict(prob.get("params") or {}))

    integ = data.get("integrator")
    if not isinstance(integ, dict):
        raise ConfigError("config needs an integrator section")
    try:
        integrator = IntegratorConfig(
            dt=float(integ["dt"]),
            horizon=float(integ["horizon"]),
            stop_velocity_tol=float(integ.get("stop_velocity_tol", 0.0)),
            stop_kkt_tol=float(integ.get("stop_kkt_tol", 0.0)),
            record_every=int(integ.get("record_every", 1)),
        )
    except KeyError as exc:
        raise ConfigError(f"integrator section is missing {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad integrator section: {exc}") from exc

    init_data = data.get("init") or {}
    if not isinstance(init_data, dict):
        raise ConfigError("init must be a mapping")
    extra = set(init_data) - {"kind", "x0", "y0", "scale"}
    if extra:
        raise ConfigError(f"unknown init keys: {sorted(extra)}")
    init = InitSpec(
        kind=str(init_data.get("kind", "random")),
        x0=_as_tuple(init_data.get("x0"), "init.x0"),
        y0=_as_tuple(init_data.get("y0"), "init.y0"),
        scale=float(init_data.get("scale", 1.0)),
    )

    aid = None
    if data.get("aid") is not None:
        aid_data = data["aid"]
        extra = set(aid_data) - {"inner_steps", "outer_steps", "budget", "inner_step", "outer_step"}
        if extra:
            raise ConfigError(f"unknown aid keys: {sorted(extra)}")
        if "inner_steps" not in aid_data:
            raise ConfigError("aid section requires inner_steps")
        aid = AidParams(
            inner_steps=int(aid_data["inner_steps"]),
            outer_steps=None if aid_data.get("outer_steps") is None else int(aid_data["outer_steps"]),
            budget=None if aid_data.get("budget") is None else int(aid_data["budget"]),
            inner_step=None if aid_data.get("inner_step") is None else float(aid_data["inner_step"]),
            outer_step=None if aid_data.get("outer_step") is None else float(aid_data["outer_step"]),
        )

    def opt_float(key):
        return None if data.get(key) is None else float(data[key])

    config = ExperimentConfig(
        problem=problem,
        solver=str(data.get("solver", "")),
        integrator=integrator,
        init=init,
        alpha=opt_float("alpha"),
        beta=opt_float("beta"),
        eps=opt_float("eps"),
        seed=int(data.get("seed", 0)),
        output_dir=None if data.get("output_dir") is None else str(data["output_dir"]),
        repeats=int(data.get("repeats", 1)),
        aid=aid,
    )
    validate_config(config)
    return config


def load_config(path: str) -> tuple[ExperimentConfig, dict]:
    """Parse a YAML config file; returns (config, sweep) with sweep possibly empty."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")

    config = _build(data)
    sweep_data = data.get("sweep") or {}
    if not isinstance(sweep_data, dict):
        raise ConfigError("sweep must map parameter names to value lists")
    sweep = {}
    for key, values in sweep_data.items():
        if key not in _SWEEP_DIRECT + _SWEEP_INTEGRATOR and not str(key).startswith("problem."):
            raise ConfigError(f"cannot sweep over {key!r}")
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"sweep values for {key!r} must be a non-empty list")
        sweep[str(key)] = list(values)
    return config, sweep


def override_config(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply sweep/CLI overrides, routing integrator and problem-param keys."""
    cfg = config
    for key, value in overrides.items():
        if key in _SWEEP_DIRECT:
            value = int(value) if key in ("seed", "repeats") else float(value)
            cfg = replace(cfg, **{key: value})
        elif key in _SWEEP_INTEGRATOR:
            value = int(value) if key == "record_every" else float(value)
            try:
                cfg = replace(cfg, integrator=replace(cfg.integrator, **{key: value}))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        elif key.startswith("problem."):
            params = dict(cfg.problem.params)
            params[key.split(".", 1)[1]] = value
            cfg = replace(cfg, problem=replace(cfg.problem, params=params))
        else:
            raise ConfigError(f"cannot override {key!r}")
    validate_config(cfg)
    return cfg


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def config_hash(config: ExperimentConfig) -> str:
    """Short stable hash of the full config, excluding the output location."""
    payload = config_to_dict(config)
    payload.pop("output_dir", None)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
