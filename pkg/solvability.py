"""Perturbation ladder eps -> 0: open-loop solvability verdicts, weak closed-loop limits and the
eps = 0 solution of the convex case."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
import scipy.integrate
from tqdm import tqdm

from bsde import (
    REGRESSION_COND_MAX,
    BsdeSolution,
    NotDeterministicError,
    default_basis,
    separable_groups,
    solve_bsde_deterministic,
    solve_bsde_lsmc,
)
from model import AssumptionError, LQError, ProblemSpec, TimeGrid, check_assumption_3
from oracle import build_tree, estimate_gamma
from riccati import (
    BLOWUP_CAP,
    MAX_SUBSTEPS,
    RK_TOL,
    BlowUpError,
    MatrixPath,
    RiccatiSystem,
    check_uniform_positivity,
    gain_path,
    solve_p1,
    solve_p2,
)
from simulate import (
    EnsembleLambda,
    Estimate,
    FeedbackLaw,
    PathEnsemble,
    SeparableLambda,
    Trajectories,
    control_distance,
    control_l2_norm,
    evaluate_cost,
    mean_stderr,
    simulate_filtered_state,
    simulate_full_state,
)
from util.export import write_csv
from util.misc import MetricLogger

Verdict = Literal["Solvable", "Diverging", "AssumptionViolated", "Inconclusive"]
Backend = Literal["auto", "ode", "lsmc"]


def default_ladder(k_max: int = 15) -> list[float]:
    return [2.0**-k for k in range(k_max + 1)]


@dataclass(frozen=True)
class SolverOptions:
    blowup_cap: float = BLOWUP_CAP
    riccati_tol: float = RK_TOL
    max_substeps: int = MAX_SUBSTEPS
    pinv_rtol: Optional[float] = None
    regression_cond_max: float = REGRESSION_COND_MAX
    basis_degree: int = 3


@dataclass(frozen=True)
class LadderCaps:
    norm_cap: float = 1e8
    cauchy_rtol: float = 1e-3
    diverging_slope: float = 1.0
    screen_depth: int = 5
    gamma_tol: float = 1e-10
    weak_rtol: float = 1e-3
    singular_slope: float = 0.5


class NotConvergedError(LQError):
    def __init__(self, t_prime: float, table: ConvergenceTable = None, detail: str = ""):
        self.t_prime = float(t_prime)
        self.table = table
        super().__init__(f"weak closed-loop laws do not converge on [s, {self.t_prime:.6g}]" + (f": {detail}" if detail else ""))


class Feedback(NamedTuple):
    law: FeedbackLaw
    p1: MatrixPath
    p2: MatrixPath
    bsde: BsdeSolution


def resolve_backend(spec: ProblemSpec, backend: Backend = "auto") -> str:
    if backend not in ("auto", "ode", "lsmc"):
        raise NotImplementedError(f"{backend=}")
    if backend != "auto":
        return backend
    try:
        separable_groups(spec)
    except NotDeterministicError:
        return "lsmc"
    return "ode"


def _separable_lambda(spec: ProblemSpec, system: RiccatiSystem, p1: MatrixPath, p2: MatrixPath, sol: BsdeSolution) -> SeparableLambda:
    """lambda_j = -K^-1 (B'abar_j + a_j D2'abar_j + D1'P1 s1_j + D2'P2 s2_j + rho_j) per exponential"""
    groups = separable_groups(spec)
    grid = sol.grid
    coef = np.empty((len(grid), len(groups), spec.m))
    for i, t in enumerate(grid.t):
        t = float(t)
        c = system.coefficients(t)
        P1, P2 = p1.values[i], p2.values[i]
        for j, group in enumerate(groups):
            data = group.values(t)
            v = c.B.T @ sol.alpha[i, j] + group.a * (c.D2.T @ sol.alpha[i, j])
            if "sigma1" in data:
                v = v + c.D1.T @ P1 @ data["sigma1"]
            if "sigma2" in data:
                v = v + c.D2.T @ P2 @ data["sigma2"]
            if "rho" in data:
                v = v + data["rho"]
            coef[i, j] = system.feedforward(c, P1, P2, v)
    return SeparableLambda(grid, coef, sol.exponents)


def _ensemble_lambda(
    spec: ProblemSpec, system: RiccatiSystem, p1: MatrixPath, p2: MatrixPath, sol: BsdeSolution, ensemble: PathEnsemble
) -> EnsembleLambda:
    grid = sol.grid
    w2 = ensemble.w2.numpy()
    values = np.empty((ensemble.K, len(grid), spec.m))
    for i, t in enumerate(grid.t):
        t = float(t)
        c = system.coefficients(t)
        P1, P2 = p1.values[i], p2.values[i]
        w, prefix = w2[:, i], w2[:, : i + 1]
        v = (
            sol.alpha[:, i] @ c.B + sol.beta[:, i] @ c.D2
            + spec.sigma1.batch(t, w, prefix) @ (P1 @ c.D1)
            + spec.sigma2.batch(t, w, prefix) @ (P2 @ c.D2)
            + spec.rho.batch(t, w, prefix)
        )
        values[:, i] = system.feedforward(c, P1, P2, v.T).T
    return EnsembleLambda(grid, values, ensemble.seed)


def build_feedback(
    spec: ProblemSpec,
    grid: TimeGrid,
    epsilon: float,
    bsde_backend: Backend = "auto",
    ensemble: PathEnsemble = None,
    options: SolverOptions = SolverOptions(),
    exact_inverse=False,
    p1: MatrixPath = None,
) -> Feedback:
    """Riccati -> BSDE -> (Theta, Lambda) for R + epsilon I. BlowUpError propagates."""
    kw = dict(cap=options.blowup_cap, tol=options.riccati_tol, max_substeps=options.max_substeps)
    p1 = p1 if p1 is not None else solve_p1(spec, grid, **kw)
    p2 = solve_p2(spec, p1, grid, epsilon, pinv_rtol=options.pinv_rtol, exact_inverse=exact_inverse, **kw)
    theta = gain_path(spec, p1, p2, options.pinv_rtol, exact_inverse)
    system = RiccatiSystem(spec, float(epsilon), options.pinv_rtol, exact_inverse)
    backend = resolve_backend(spec, bsde_backend)
    if backend == "ode":
        sol = solve_bsde_deterministic(spec, p1, p2, theta, grid, options.pinv_rtol, exact_inverse, **kw)
        lam = _separable_lambda(spec, system, p1, p2, sol)
    else:
        if ensemble is None:
            raise ValueError("Invalid call: the LSMC backend needs a path ensemble")
        sol = solve_bsde_lsmc(
            spec, p1, p2, theta, ensemble.grid, ensemble,
            default_basis(spec, options.basis_degree), options.regression_cond_max,
        )
        p1s, p2s = p1.sample(ensemble.grid), p2.sample(ensemble.grid)
        lam = _ensemble_lambda(spec, system, p1s, p2s, sol, ensemble)
        theta = theta.sample(ensemble.grid)
    label = f"eps={epsilon:g}" if epsilon else "eps=0"
    law = FeedbackLaw(theta, lam, valid_until=spec.T, epsilon=float(epsilon), label=label)
    return Feedback(law, p1, p2, sol)


def perturbed_feedback(
    spec: ProblemSpec,
    grid: TimeGrid,
    epsilon: float,
    bsde_backend: Backend = "auto",
    ensemble: PathEnsemble = None,
    options: SolverOptions = SolverOptions(),
) -> FeedbackLaw:
    if not epsilon > 0:
        raise ValueError(f"Invalid epsilon: {epsilon}")
    return build_feedback(spec, grid, epsilon, bsde_backend, ensemble, options).law


@dataclass
class LadderRung:
    epsilon: float
    norm: Optional[Estimate] = None
    cauchy: Optional[Estimate] = None
    """distance to the previous rung"""
    blowup_t: Optional[float] = None
    law: Optional[FeedbackLaw] = None

    def to_dict(self) -> dict:
        out = {"epsilon": self.epsilon}
        if self.norm is not None:
            out.update(norm=self.norm.mean, norm_stderr=self.norm.stderr)
        if self.cauchy is not None:
            out.update(cauchy=self.cauchy.mean, cauchy_stderr=self.cauchy.stderr)
        if self.blowup_t is not None:
            out["blowup_t"] = self.blowup_t
        return out


@dataclass
class SolvabilityReport:
    s: float
    x0: np.ndarray
    ladder: list[float]
    rungs: list[LadderRung] = field(default_factory=list)
    verdict: Verdict = "Inconclusive"
    reason: str = ""
    gamma_d: Optional[float] = None
    limit_law: Optional[FeedbackLaw] = None
    limit_controls: Optional[Trajectories] = None
    """last u_eps ensemble, the open-loop control approximation"""

    @property
    def norms(self) -> list[Estimate]:
        return [r.norm for r in self.rungs if r.norm is not None]

    @property
    def laws(self) -> list[FeedbackLaw]:
        return [r.law for r in self.rungs if r.law is not None]

    @property
    def cauchy(self) -> list[Estimate]:
        return [r.cauchy for r in self.rungs if r.cauchy is not None]

    def to_dict(self) -> dict:
        out = {
            "s": self.s,
            "x0": self.x0,
            "ladder": self.ladder,
            "verdict": self.verdict,
            "reason": self.reason,
            "rungs": [r.to_dict() for r in self.rungs],
        }
        if self.gamma_d is not None:
            out["gamma_d"] = self.gamma_d
        if self.limit_controls is not None:
            norm = control_l2_norm(self.limit_controls)
            out.update(limit_norm=norm.mean, limit_norm_stderr=norm.stderr, limit_epsilon=self.limit_law.epsilon)
        return out

    def to_csv(self, path: str):
        rows = (
            [r.epsilon]
            + [r.norm.mean if r.norm else float("nan"), r.norm.stderr if r.norm else float("nan")]
            + [r.cauchy.mean if r.cauchy else float("nan"), r.cauchy.stderr if r.cauchy else float("nan")]
            for r in self.rungs
        )
        write_csv(path, ["epsilon", "norm", "norm_stderr", "cauchy", "cauchy_stderr"], rows)


def _loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64)), 1)[0])


def ladder_verdict(rungs: Sequence[LadderRung], caps: LadderCaps) -> tuple[Verdict, str]:
    """Solvable: norms below the cap and the last three Cauchy distances non-increasing, each one below
    cauchy_rtol (1 + norm of its rung). Diverging: a norm above the cap, or norms strictly increasing over
    the last four rungs with log-log slope against 1/eps above diverging_slope."""
    norms = [r.norm.mean for r in rungs]
    eps = [r.epsilon for r in rungs]
    if any(not math.isfinite(v) or v > caps.norm_cap for v in norms):
        return "Diverging", f"control norm above the cap {caps.norm_cap:g}"
    if len(norms) >= 4:
        last = norms[-4:]
        if all(b > a for a, b in zip(last, last[1:])) and min(last) > 0:
            slope = _loglog_slope([1.0 / e for e in eps[-4:]], last)
            if slope > caps.diverging_slope:
                return "Diverging", f"norms grow like (1/eps)^{slope:.3g}"
    tail = [(r.cauchy.mean, caps.cauchy_rtol * (1.0 + r.norm.mean)) for r in rungs if r.cauchy is not None][-3:]
    if len(tail) < 3:
        return "Inconclusive", "ladder too short for the Cauchy test"
    d = [v for v, _ in tail]
    if d[0] >= d[1] >= d[2] and all(v <= threshold for v, threshold in tail):
        return "Solvable", f"last Cauchy distances {[f'{v:.3e}' for v in d]} within {tail[-1][1]:.3e}"
    return "Inconclusive", f"Cauchy distances {[f'{v:.3e}' for v in d]} do not settle below {[f'{t:.3e}' for _, t in tail]}"


def screen_assumptions(spec: ProblemSpec, s: float, caps: LadderCaps) -> float:
    """gamma_d of the depth-`screen_depth` tree"""
    return estimate_gamma(build_tree(spec, s, spec.T, caps.screen_depth))


def epsilon_ladder(
    spec: ProblemSpec,
    s: float,
    x0,
    ladder: Sequence[float],
    ensemble: PathEnsemble,
    caps: LadderCaps = LadderCaps(),
    grid: TimeGrid = None,
    bsde_backend: Backend = "auto",
    options: SolverOptions = SolverOptions(),
    workers=1,
    screen=True,
    print_fn=print,
) -> SolvabilityReport:
    """Solve (P)_eps along the ladder on one shared ensemble and classify the sequence of controls."""
    ladder = [float(e) for e in ladder]
    if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"Invalid ladder (positive, strictly decreasing): {ladder}")
    x0 = np.asarray(x0, dtype=np.float64).reshape(spec.n)
    grid = grid or ensemble.grid
    report = SolvabilityReport(float(s), x0, ladder)

    if screen:
        report.gamma_d = screen_assumptions(spec, s, caps)
        if report.gamma_d < -caps.gamma_tol:
            report.verdict = "AssumptionViolated"
            report.reason = f"tree gamma_d = {report.gamma_d:.6e} < 0 at depth {caps.screen_depth}"
            return report

    kw = dict(cap=options.blowup_cap, tol=options.riccati_tol, max_substeps=options.max_substeps)
    try:
        p1 = solve_p1(spec, grid, **kw)
    except BlowUpError as e:
        report.rungs.append(LadderRung(ladder[0], blowup_t=e.t_star))
        report.verdict, report.reason = "AssumptionViolated", f"P1 blows up at t={e.t_star:.6g}"
        return report

    logger = MetricLogger(delimiter="  ", print_fn=print_fn)
    previous: Optional[Trajectories] = None
    for eps in logger.log_every(ladder, print_freq=1, header="Ladder:"):
        rung = LadderRung(eps)
        report.rungs.append(rung)
        try:
            rung.law = build_feedback(spec, grid, eps, bsde_backend, ensemble, options, p1=p1).law
        except BlowUpError as e:
            rung.blowup_t = e.t_star
            report.verdict, report.reason = "AssumptionViolated", f"{e.label} blows up at t={e.t_star:.6g} for eps={eps:g}"
            return report
        traj = simulate_filtered_state(spec, rung.law, ensemble, s, x0, workers=workers)
        rung.norm = control_l2_norm(traj)
        if previous is not None:
            rung.cauchy = control_distance(previous, traj)
        logger.update(eps=eps, norm=rung.norm.mean, cauchy=rung.cauchy.mean if rung.cauchy else None)
        previous = traj

    report.verdict, report.reason = ladder_verdict(report.rungs, caps)
    if report.verdict == "Solvable":
        report.limit_law = report.rungs[-1].law
        report.limit_controls = previous
    return report


class ConvergenceRow(NamedTuple):
    t_prime: float
    eps_i: float
    eps_j: float
    theta_distance: float
    lambda_distance: float


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow] = field(default_factory=list)
    theta_sq: dict = field(default_factory=dict)
    """t_prime -> int_s^t' |Theta_min|^2"""
    lambda_sq: dict = field(default_factory=dict)
    singular_slope: float = float("nan")
    singular_at_T: bool = False

    def to_dict(self) -> dict:
        return {
            "theta_sq": {f"{k:.17g}": v for k, v in self.theta_sq.items()},
            "lambda_sq": {f"{k:.17g}": v for k, v in self.lambda_sq.items()},
            "singular_slope": self.singular_slope,
            "singular_at_T": self.singular_at_T,
        }

    def to_csv(self, path: str):
        write_csv(path, list(ConvergenceRow._fields), self.rows)


def _lambda_sq(lam, t_prime: float) -> float:
    """E int_s^t' |Lambda|^2"""
    if isinstance(lam, SeparableLambda):
        return lam.sq_integral(t_prime)
    t = lam.grid.t
    keep = t <= t_prime + 1e-12 * max(1.0, abs(t_prime))
    per_path = scipy.integrate.trapezoid(np.square(lam.values[:, keep]).sum(-1), t[keep], axis=1)
    return mean_stderr(per_path).mean


def _difference(a, b):
    if isinstance(a, SeparableLambda):
        b = b.sample(a.grid)
        if a.exponents != b.exponents:
            raise ValueError(f"Invalid comparison: Lambda exponents {a.exponents} vs {b.exponents}")
        return SeparableLambda(a.grid, a.coef - b.coef, a.exponents)
    if a.seed != b.seed or a.values.shape != b.values.shape:
        raise ValueError("Invalid comparison: per-path Lambda on different ensembles")
    return EnsembleLambda(a.grid, a.values - b.values, a.seed)


def extract_weak_closed_loop(
    laws: Sequence[FeedbackLaw],
    truncations: Sequence[float],
    caps: LadderCaps = LadderCaps(),
) -> tuple[FeedbackLaw, ConvergenceTable]:
    """Cauchy test of (Theta_eps, Lambda_eps) on [s, T'] for each truncation; the smallest-eps law,
    restricted to the largest T', stands for the limit."""
    laws = sorted(laws, key=lambda law: -law.epsilon)
    if len(laws) < 2:
        raise ValueError(f"Invalid ladder: need at least two laws, got {len(laws)}")
    truncations = sorted(float(t) for t in truncations)
    grid = laws[0].theta.grid
    if not truncations or truncations[0] <= grid.t0 or truncations[-1] >= grid.T:
        raise ValueError(f"Invalid truncations {truncations}: need s < T' < T")
    thetas = [law.theta.sample(grid) for law in laws]
    last = laws[-1]
    table = ConvergenceTable()
    for t_prime in tqdm(truncations, desc="truncations", leave=False):
        for (law_i, th_i), (law_j, th_j) in zip(zip(laws, thetas), zip(laws[1:], thetas[1:])):
            diff = MatrixPath(grid, th_i.values - th_j.values)
            table.rows.append(
                ConvergenceRow(
                    t_prime, law_i.epsilon, law_j.epsilon,
                    diff.sq_integral(t_prime), _lambda_sq(_difference(law_i.lam, law_j.lam), t_prime),
                )
            )
        table.theta_sq[t_prime] = thetas[-1].sq_integral(t_prime)
        table.lambda_sq[t_prime] = _lambda_sq(last.lam, t_prime)
        row = table.rows[-1]
        theta_limit = caps.weak_rtol * (1.0 + table.theta_sq[t_prime])
        lambda_limit = caps.weak_rtol * (1.0 + table.lambda_sq[t_prime])
        if row.theta_distance > theta_limit:
            raise NotConvergedError(t_prime, table, f"theta distance {row.theta_distance:.3e} > {theta_limit:.3e}")
        if row.lambda_distance > lambda_limit:
            raise NotConvergedError(t_prime, table, f"lambda distance {row.lambda_distance:.3e} > {lambda_limit:.3e}")

    if len(truncations) >= 2:
        t_a, t_b = truncations[-2:]
        T = grid.T
        table.singular_slope = _loglog_slope([1.0 / (T - t_a), 1.0 / (T - t_b)], [table.theta_sq[t_a], table.theta_sq[t_b]])
        table.singular_at_T = table.singular_slope > caps.singular_slope
    limit = FeedbackLaw(
        last.theta, last.lam, valid_until=truncations[-1], singular_at_T=table.singular_at_T,
        epsilon=last.epsilon, label="limit",
    )
    return limit, table


class PsdSolution(NamedTuple):
    law: FeedbackLaw
    cost: Estimate
    gamma_hat: float
    feedback: Feedback
    trajectories: Trajectories


def solve_psd(
    spec: ProblemSpec,
    s: float,
    x0,
    grid: TimeGrid,
    bsde_backend: Backend = "auto",
    ensemble: PathEnsemble = None,
    options: SolverOptions = SolverOptions(),
    workers=1,
) -> PsdSolution:
    """eps = 0 feedback with exact inverses under the convexity assumption, closed-loop cost by Monte Carlo."""
    diagnostics = check_assumption_3(spec, grid)
    if diagnostics:
        raise AssumptionError(diagnostics)
    if ensemble is None:
        raise ValueError("Invalid call: the cost estimate needs a path ensemble")
    feedback = build_feedback(spec, grid, 0.0, bsde_backend, ensemble, options, exact_inverse=True)
    gamma_hat = check_uniform_positivity(spec, feedback.p1, feedback.p2, grid).gamma_hat
    filtered = simulate_filtered_state(spec, feedback.law, ensemble, s, x0, workers=workers)
    full = simulate_full_state(spec, filtered, ensemble, s, x0, workers=workers)
    return PsdSolution(feedback.law, evaluate_cost(spec, full, s, x0), gamma_hat, feedback, full)


def _moments(exponents, t: np.ndarray, t0: float) -> np.ndarray:
    """(N+1, J, J) E[Z_j Z_k] with W2(t0) = 0"""
    a = np.array([e[0] for e in exponents])
    c = np.array([e[1] for e in exponents])
    return np.exp((c[:, None] + c[None])[None] * t[:, None, None] + 0.5 * ((a[:, None] + a[None]) ** 2)[None] * (t[:, None, None] - t0))


def representation_value(
    spec: ProblemSpec, x0, feedback: Feedback, ensemble: PathEnsemble = None
) -> float:
    """Optimal value from the Riccati/BSDE solution:

        x0'P2(s)x0 + 2 x0'E alpha(s)
        + E int [s1'P1 s1 + s2'P2 s2 + 2 s2'beta + 2 b'alpha - Lambda'K Lambda] dt
    """
    law, sol = feedback.law, feedback.bsde
    grid = sol.grid
    p1, p2 = feedback.p1.sample(grid), feedback.p2.sample(grid)
    system = RiccatiSystem(spec, p2.epsilon)
    x0 = np.asarray(x0, dtype=np.float64).reshape(spec.n)
    lam = law.lam.sample(grid)
    t = grid.t
    integrand = np.empty(len(grid))

    if sol.backend == "ode":
        groups = separable_groups(spec)
        E = _moments(sol.exponents, t, grid.t0)
        zero = np.zeros(spec.n)
        for i, ti in enumerate(t):
            ti = float(ti)
            c = system.coefficients(ti)
            K, _ = system.block(c, p1.values[i], p2.values[i])
            values = [group.values(ti) for group in groups]
            s1 = np.stack([v.get("sigma1", zero) for v in values])
            s2 = np.stack([v.get("sigma2", zero) for v in values])
            b = np.stack([v.get("b", zero) for v in values])
            terms = (
                np.einsum("ja,ab,kb->jk", s1, p1.values[i], s1)
                + np.einsum("ja,ab,kb->jk", s2, p2.values[i], s2)
                + 2.0 * s2 @ sol.beta[i].T
                + 2.0 * b @ sol.alpha[i].T
                - np.einsum("ja,ab,kb->jk", lam.coef[i], K, lam.coef[i])
            )
            integrand[i] = float(np.sum(terms * E[i]))
        alpha0 = float(sol.factors(grid.t0, 0.0)[0] @ sol.alpha[0] @ x0)
    else:
        if ensemble is None or ensemble.seed != sol.meta["seed"]:
            raise ValueError("Invalid call: the LSMC value needs the ensemble of the BSDE solution")
        w2 = ensemble.w2.numpy()
        per_path = np.empty((ensemble.K, len(grid)))
        for i, ti in enumerate(t):
            ti = float(ti)
            c = system.coefficients(ti)
            K, _ = system.block(c, p1.values[i], p2.values[i])
            w, prefix = w2[:, i], w2[:, : i + 1]
            s1 = spec.sigma1.batch(ti, w, prefix)
            s2 = spec.sigma2.batch(ti, w, prefix)
            b = spec.b.batch(ti, w, prefix)
            L = lam.values[:, i]
            per_path[:, i] = (
                np.einsum("ka,ab,kb->k", s1, p1.values[i], s1) + np.einsum("ka,ab,kb->k", s2, p2.values[i], s2)
                + 2.0 * np.einsum("ka,ka->k", s2, sol.beta[:, i]) + 2.0 * np.einsum("ka,ka->k", b, sol.alpha[:, i])
                - np.einsum("ka,ab,kb->k", L, K, L)
            )
        integrand = per_path.mean(0)
        alpha0 = float(mean_stderr(sol.alpha[:, 0] @ x0).mean)
    return float(x0 @ p2.values[0] @ x0 + 2.0 * alpha0 + scipy.integrate.trapezoid(integrand, t))
