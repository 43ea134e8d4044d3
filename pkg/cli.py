#!/usr/bin/env python3
"""lqpi: run an experiment pipeline from a JSON config.

    lqpi run --config configs/section5.json [--out DIR] [--workers K]
    lqpi scenarios
"""

import argparse
import contextlib
import json
import math
import os
import sys
from typing import Any, Literal, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from model import AssumptionError, LQError, TimeGrid, builtin_scenario, describe_scenarios
from oracle import MAX_DEPTH, NotConvexError, build_tree, estimate_gamma, tree_exact_optimal, tree_gradient, tree_report
from riccati import solve_p1, solve_p2
from simulate import SeparableLambda, sample_ensemble
from solvability import (
    LadderCaps,
    NotConvergedError,
    SolverOptions,
    build_feedback,
    default_ladder,
    epsilon_ladder,
    extract_weak_closed_loop,
    representation_value,
    resolve_backend,
    solve_psd,
)
from util.export import matrix_columns, write_csv, write_json
from util.misc import append_log
from util.utils import HiddenPrints, TimePrints, Timing, env_seed, file_path, str2bool

EXIT_OK, EXIT_CONFIG, EXIT_VERDICT = 0, 1, 2
FAILING_VERDICTS = ("Diverging", "AssumptionViolated", "NotConverged")

Pipeline = Literal["psd-solve", "solvability-ladder", "weak-closed-loop", "section5-repro", "oracle-compare"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioConfig(_Strict):
    name: str = "section5"
    params: dict[str, Any] = Field(default_factory=dict)


class GridConfig(_Strict):
    n_steps: PositiveInt = 2000
    s: float = 0.0


class MonteCarloConfig(_Strict):
    n_steps: PositiveInt = 1000
    K: PositiveInt = 10000
    seed: NonNegativeInt = 0


class Tolerances(_Strict):
    blowup_cap: PositiveFloat = 1e12
    riccati_tol: PositiveFloat = 1e-12
    max_substeps: PositiveInt = 4096
    pinv_rtol: Optional[PositiveFloat] = None
    regression_cond_max: PositiveFloat = 1e12
    basis_degree: NonNegativeInt = 3
    norm_cap: PositiveFloat = 1e8
    cauchy_rtol: PositiveFloat = 1e-3
    diverging_slope: PositiveFloat = 1.0
    screen_depth: PositiveInt = 5
    gamma_tol: PositiveFloat = 1e-10
    weak_rtol: PositiveFloat = 1e-3

    def solver(self) -> SolverOptions:
        return SolverOptions(
            self.blowup_cap, self.riccati_tol, self.max_substeps, self.pinv_rtol, self.regression_cond_max, self.basis_degree
        )

    def caps(self) -> LadderCaps:
        return LadderCaps(
            self.norm_cap, self.cauchy_rtol, self.diverging_slope, self.screen_depth, self.gamma_tol, self.weak_rtol
        )


class ExperimentConfig(_Strict):
    pipeline: Pipeline
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    monte_carlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    ladder: Optional[list[PositiveFloat]] = None
    truncations: list[float] = Field(default_factory=lambda: [0.5, 0.9, 0.99])
    x0: Optional[list[float]] = None
    bsde_backend: Literal["auto", "ode", "lsmc"] = "auto"
    depths: list[PositiveInt] = Field(default_factory=lambda: [3, 4, 5, 6])
    output_dir: str = "output"
    workers: PositiveInt = 1
    dump_paths: NonNegativeInt = 0
    tolerances: Tolerances = Field(default_factory=Tolerances)

    @field_validator("ladder")
    @classmethod
    def _decreasing_ladder(cls, v):
        if v is not None and (not v or any(b >= a for a, b in zip(v, v[1:]))):
            raise ValueError(f"ladder must be non-empty and strictly decreasing: {v}")
        return v

    @field_validator("depths")
    @classmethod
    def _bounded_depths(cls, v):
        if not v or max(v) > MAX_DEPTH:
            raise ValueError(f"depths must be non-empty and at most {MAX_DEPTH}: {v}")
        return v

    @model_validator(mode="after")
    def _section5_scenario(self):
        if self.pipeline == "section5-repro" and self.scenario.name != "section5":
            raise ValueError(f"section5-repro runs the section5 scenario, got {self.scenario.name}")
        return self

    def resolved_ladder(self) -> list[float]:
        if self.ladder is not None:
            return list(self.ladder)
        return default_ladder(15)


def load_config(path: str) -> ExperimentConfig:
    with open(file_path(path), encoding="utf-8") as f:
        return ExperimentConfig.model_validate(json.load(f))


def get_args_parser():
    parser = argparse.ArgumentParser(prog="lqpi", description="LQ stochastic control with partial information")
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="run the pipeline of a JSON config")
    run_parser.add_argument("--config", type=str, required=True)
    run_parser.add_argument("--out", type=str, default=None, help="output directory (overrides output_dir)")
    run_parser.add_argument("--workers", type=int, default=None, help="worker threads; never changes emitted numbers")
    run_parser.add_argument("--quiet", type=str2bool, default=False)
    run_parser.add_argument("--time_prints", type=str2bool, default=True, help="timestamp stdout lines")
    sub.add_parser("scenarios", help="list built-in scenarios")
    return parser


class Context:
    """Resolved inputs shared by every pipeline"""

    def __init__(self, config: ExperimentConfig, out: str):
        self.config = config
        self.out = out
        self.spec = builtin_scenario(config.scenario.name, config.scenario.params)
        self.s = config.grid.s
        self.grid = TimeGrid(self.s, self.spec.T, config.grid.n_steps)
        x0 = self.spec.default_x0() if config.x0 is None else np.asarray(config.x0, dtype=np.float64)
        if x0.shape != (self.spec.n,):
            raise ValueError(f"Invalid x0 {config.x0}: scenario {self.spec.name} has n={self.spec.n}")
        self.x0 = x0
        if config.pipeline in ("weak-closed-loop", "section5-repro"):
            if not all(self.s < t < self.spec.T for t in config.truncations) or not config.truncations:
                raise ValueError(f"Invalid truncations {config.truncations}: need s < T' < T = {self.spec.T}")
        self.seed = env_seed(config.monte_carlo.seed)
        self.workers = config.workers
        self.options = config.tolerances.solver()
        self.caps = config.tolerances.caps()
        self._ensemble = None

    @property
    def ensemble(self):
        if self._ensemble is None:
            mc = self.config.monte_carlo
            with Timing(msg=f"Ensemble (K={mc.K}, N={mc.n_steps}):"):
                grid = TimeGrid(self.s, self.spec.T, mc.n_steps)
                self._ensemble = sample_ensemble(grid, mc.K, self.seed, self.workers)
        return self._ensemble

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def base_report(self) -> dict:
        return {
            "pipeline": self.config.pipeline,
            "scenario": {"name": self.spec.name, "params": dict(self.spec.params)},
            "s": self.s,
            "x0": self.x0,
            "seed": self.seed,
            "n_steps": self.config.grid.n_steps,
            "mc_steps": self.config.monte_carlo.n_steps,
            "K": self.config.monte_carlo.K,
        }


def write_laws_csv(theta_path: str, lambda_path: str, laws):
    """Long-format dumps of (Theta_eps, Lambda_eps): one block of rows per law."""
    if not laws:
        return
    m, n = laws[0].theta.shape
    write_csv(
        theta_path,
        ["epsilon", "t"] + matrix_columns("theta", (m, n)),
        ([law.epsilon, t] + list(v.ravel()) for law in laws for t, v in zip(law.theta.grid.t, law.theta.values)),
    )
    lam = laws[0].lam
    if isinstance(lam, SeparableLambda):
        J = len(lam.exponents)
        header = ["epsilon", "t"] + [f"lambda_{j}_{k}" for j in range(J) for k in range(m)]
        rows = ([law.epsilon, t] + list(c.ravel()) for law in laws for t, c in zip(law.lam.grid.t, law.lam.coef))
    else:
        header = ["epsilon", "t"] + matrix_columns("mean_lambda", (m,))
        rows = ([law.epsilon, t] + list(law.lam.values[:, i].mean(0)) for law in laws for i, t in enumerate(law.lam.grid.t))
    write_csv(lambda_path, header, rows)


def _lambda_info(law) -> dict:
    if isinstance(law.lam, SeparableLambda):
        return {"lambda": "separable", "exponents": [list(e) for e in law.lam.exponents]}
    return {"lambda": "per-path"}


def run_psd(ctx: Context) -> tuple[dict, int]:
    report = ctx.base_report()
    backend = resolve_backend(ctx.spec, ctx.config.bsde_backend)
    try:
        with Timing(msg="Riccati + BSDE + simulation:"):
            sol = solve_psd(ctx.spec, ctx.s, ctx.x0, ctx.grid, backend, ctx.ensemble, ctx.options, ctx.workers)
    except AssumptionError as e:
        report.update(verdict="AssumptionViolated", diagnostics=[str(d) for d in e.diagnostics])
        return report, EXIT_VERDICT
    value = representation_value(ctx.spec, ctx.x0, sol.feedback, ctx.ensemble if backend == "lsmc" else None)
    report.update(
        verdict="Solved", backend=backend, cost=sol.cost.mean, stderr=sol.cost.stderr,
        gamma_hat=sol.gamma_hat, value=value, **_lambda_info(sol.law),
    )
    sol.feedback.p1.to_csv(ctx.path("p1.csv"))
    sol.feedback.p2.to_csv(ctx.path("p2.csv"))
    write_laws_csv(ctx.path("theta.csv"), ctx.path("lambda.csv"), [sol.law])
    if ctx.config.dump_paths:
        sol.trajectories.to_csv(ctx.path("paths.csv"), ctx.config.dump_paths)
        sol.feedback.bsde.to_csv(ctx.path("bsde.csv"), ctx.config.dump_paths)
    return report, EXIT_OK


def _ladder(ctx: Context):
    ladder = ctx.config.resolved_ladder()
    with Timing(msg=f"Ladder ({len(ladder)} rungs):"):
        result = epsilon_ladder(
            ctx.spec, ctx.s, ctx.x0, ladder, ctx.ensemble, ctx.caps, ctx.grid,
            ctx.config.bsde_backend, ctx.options, ctx.workers,
        )
    for rung in result.rungs:
        append_log(ctx.out, {"stage": "rung", **rung.to_dict()})
    result.to_csv(ctx.path("ladder.csv"))
    write_laws_csv(ctx.path("theta_eps.csv"), ctx.path("lambda_eps.csv"), result.laws)
    if ctx.config.dump_paths and result.limit_controls is not None:
        result.limit_controls.to_csv(ctx.path("limit_paths.csv"), ctx.config.dump_paths)
    return result


def run_ladder(ctx: Context) -> tuple[dict, int]:
    result = _ladder(ctx)
    report = {**ctx.base_report(), **result.to_dict()}
    return report, EXIT_VERDICT if result.verdict in FAILING_VERDICTS else EXIT_OK


def _weak(ctx: Context, result, report: dict):
    """(report, exit code, limit law or None)"""
    if result.verdict in FAILING_VERDICTS or len(result.laws) < 2:
        return report, EXIT_VERDICT if result.verdict in FAILING_VERDICTS else EXIT_OK, None
    try:
        with Timing(msg="Weak closed-loop extraction:"):
            limit, table = extract_weak_closed_loop(result.laws, ctx.config.truncations, ctx.caps)
    except NotConvergedError as e:
        if e.table is not None:
            e.table.to_csv(ctx.path("convergence.csv"))
        report.update(verdict="NotConverged", reason=str(e), failed_truncation=e.t_prime)
        return report, EXIT_VERDICT, None
    table.to_csv(ctx.path("convergence.csv"))
    limit.theta.to_csv(ctx.path("theta_limit.csv"))
    report["weak_closed_loop"] = {"valid_until": limit.valid_until, "epsilon": limit.epsilon, **table.to_dict()}
    return report, EXIT_OK, limit


def run_weak(ctx: Context) -> tuple[dict, int]:
    result = _ladder(ctx)
    report, code, _ = _weak(ctx, result, {**ctx.base_report(), **result.to_dict()})
    return report, code


def section5_checks(ctx: Context, limit=None, t_check: float = 0.9) -> dict:
    """Errors against the closed forms P2_eps = eps/(eps+1-t), Theta_eps = -1/(eps+1-t),
    Lambda_eps(t, w) = -exp(sqrt(2) w - 2t) 2 sqrt(1-t)/(eps+1-t) and Theta* = -1/(1-t)."""
    spec, grid = ctx.spec, ctx.grid
    t = grid.t
    p1 = solve_p1(spec, grid)
    out = {}
    for eps in (1.0, 0.1, 0.01):
        p2 = solve_p2(spec, p1, grid, eps)
        law = build_feedback(spec, grid, eps, "ode", options=ctx.options, p1=p1).law
        exact_theta = -1.0 / (eps + 1.0 - t)
        w = np.linspace(-1.0, 1.0, 5)
        lam = np.stack([law.lam.at(i, w)[:, 0] for i in range(len(grid))], axis=1)
        exact_lam = -np.exp(math.sqrt(2.0) * w[:, None] - 2.0 * t[None]) * 2.0 * np.sqrt(1.0 - t)[None] / (eps + 1.0 - t)[None]
        out[f"{eps:g}"] = {
            "p2_max_error": float(np.max(np.abs(p2.values[:, 0, 0] - eps / (eps + 1.0 - t)))),
            "theta_max_error": float(np.max(np.abs(law.theta.values[:, 0, 0] - exact_theta))),
            "lambda_max_error": float(np.max(np.abs(lam - exact_lam))),
        }
    checks = {"closed_form": out}
    if limit is not None:
        keep = limit.theta.grid.t <= t_check + 1e-12
        tt = limit.theta.grid.t[keep]
        checks["theta_star_max_error"] = float(np.max(np.abs(limit.theta.values[keep, 0, 0] + 1.0 / (1.0 - tt))))
        checks["theta_star_check_until"] = t_check
    return checks


def run_section5(ctx: Context) -> tuple[dict, int]:
    result = _ladder(ctx)
    report, code, limit = _weak(ctx, result, {**ctx.base_report(), **result.to_dict()})
    with Timing(msg="Closed-form checks:"):
        report["checks"] = section5_checks(ctx, limit)
    report["norm_bound"] = (2.0 + float(ctx.x0[0])) ** 2
    return report, code


def run_oracle(ctx: Context) -> tuple[dict, int]:
    spec, report = ctx.spec, ctx.base_report()
    backend = resolve_backend(spec, ctx.config.bsde_backend)
    with Timing(msg="Riccati + BSDE (eps=0):"):
        feedback = build_feedback(spec, ctx.grid, 0.0, backend, ctx.ensemble if backend == "lsmc" else None, ctx.options, exact_inverse=True)
        value = representation_value(spec, ctx.x0, feedback, ctx.ensemble if backend == "lsmc" else None)
    rows, trees = [], {}
    for depth in ctx.config.depths:
        with Timing(msg=f"Tree depth {depth}:"):
            tree = build_tree(spec, ctx.s, spec.T, depth)
            gamma_d = estimate_gamma(tree)
            try:
                solution = tree_exact_optimal(tree, ctx.x0)
            except NotConvexError as e:
                report.update(verdict="AssumptionViolated", reason=str(e), depth=depth, gamma_d=gamma_d)
                return report, EXIT_VERDICT
            grad = float(np.max(np.abs(tree_gradient(tree, solution.controls, ctx.x0))))
        rows.append([depth, tree.h, solution.value, value, abs(solution.value - value), gamma_d, grad])
        trees[str(depth)] = tree_report(tree, solution, gamma_d)
        append_log(ctx.out, {"stage": "tree", "depth": depth, "value": solution.value, "gap": rows[-1][4]})
    write_csv(
        ctx.path("oracle_compare.csv"),
        ["depth", "h", "tree_value", "riccati_value", "gap", "gamma_d", "grad_max"],
        rows,
    )
    gaps = np.array([r[4] for r in rows])
    hs = np.array([r[1] for r in rows])
    order = float(np.polyfit(np.log(hs), np.log(gaps), 1)[0]) if len(rows) >= 2 and np.all(gaps > 0) else float("nan")
    report.update(verdict="Solved", backend=backend, riccati_value=value, order=order, trees=trees)
    return report, EXIT_OK


PIPELINES = {
    "psd-solve": run_psd,
    "solvability-ladder": run_ladder,
    "weak-closed-loop": run_weak,
    "section5-repro": run_section5,
    "oracle-compare": run_oracle,
}


def prepare(config: ExperimentConfig, out: str = None, workers: int = None) -> Context:
    """Resolve a validated config; KeyError/ValueError here are configuration errors."""
    if workers is not None:
        config = config.model_copy(update={"workers": workers})
    out = out or config.output_dir
    ctx = Context(config, out)
    os.makedirs(out, exist_ok=True)
    return ctx


def execute(ctx: Context) -> int:
    config = ctx.config
    append_log(ctx.out, {"stage": "config", "config": config.model_dump(), "seed": ctx.seed})
    print(f"Pipeline {config.pipeline} on {ctx.spec.name} (seed {ctx.seed}, workers {ctx.workers})")
    with Timing(msg=f"{config.pipeline} total:") as timer:
        report, code = PIPELINES[config.pipeline](ctx)
    write_json(ctx.path("report.json"), report)
    append_log(ctx.out, {"stage": "done", "verdict": report.get("verdict"), "exit": code, "seconds": timer.elapsed})
    print(f"Verdict: {report.get('verdict')} -> {ctx.path('report.json')}")
    return code


def run(config: ExperimentConfig, out: str = None, workers: int = None) -> int:
    return execute(prepare(config, out, workers))


def main(argv=None) -> int:
    args = get_args_parser().parse_args(argv)
    if args.command == "scenarios":
        for name, doc in describe_scenarios():
            print(f"{name:22s} {doc}")
        return EXIT_OK
    if args.workers is not None and args.workers < 1:
        print(f"Invalid --workers: {args.workers}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(args.config)
        ctx = prepare(config, args.out, args.workers)
    except (OSError, json.JSONDecodeError, ValidationError, KeyError, ValueError) as e:
        print(f"Invalid config {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stamps = TimePrints() if args.time_prints and not args.quiet else contextlib.nullcontext()
    try:
        with HiddenPrints(args.quiet), stamps:
            return execute(ctx)
    except LQError as e:
        print(f"Failed: {e}", file=sys.stderr)
        append_log(ctx.out, {"stage": "failed", "error": type(e).__name__, "message": str(e)})
        return EXIT_VERDICT
    except (ValueError, ArithmeticError) as e:
        # LinAlgError is a ValueError
        print(f"Numerical failure: {e}", file=sys.stderr)
        append_log(ctx.out, {"stage": "failed", "error": type(e).__name__, "message": str(e)})
        return EXIT_VERDICT


if __name__ == "__main__":
    sys.exit(main())
