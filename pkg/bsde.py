"""Adjoint BSDE for the inhomogeneous data:

    d alpha = -[ At'alpha + C2t'beta + C1t'P1 sigma1 + C2t'P2 sigma2 + Theta'rho + P2 b + q ] dt + beta dW2,  alpha(T) = g
    At = A + B Theta,  Ckt = Ck + Dk Theta

Two backends. `solve_bsde_deterministic` handles data that is deterministic or separable in W2
(value = base(t) * (T - t)^-kappa * exp(a W2 + c t)): grouping the data by (a, c) gives
alpha = sum_j abar_j(t) Z_j, beta = sum_j a_j abar_j(t) Z_j with deterministic abar_j. `solve_bsde_lsmc`
regresses conditional expectations over a PathEnsemble for any G-adapted data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Literal, Mapping, Optional

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from model import CoefficientProcess, Coefficients, LQError, ProblemSpec, TimeGrid
from riccati import (
    BLOWUP_CAP,
    MAX_SUBSTEPS,
    RK_TOL,
    BackwardRK4,
    MatrixPath,
    RiccatiSystem,
    symmetric_projector,
)
from simulate import PathEnsemble
from util.export import matrix_columns, write_csv

REGRESSION_COND_MAX = 1e12

Exponent = tuple[float, float]


class NotDeterministicError(LQError, ValueError):
    pass


class IllConditionedRegression(LQError):
    def __init__(self, t: float, cond: float):
        self.t = float(t)
        self.cond = float(cond)
        super().__init__(f"regression at t={self.t:.6g} has condition number {self.cond:.3e}")


def forcing(c: Coefficients, P1, P2, theta, b=None, sigma1=None, sigma2=None, q=None, rho=None) -> np.ndarray:
    """Row form of C1t'P1 sigma1 + C2t'P2 sigma2 + Theta'rho + P2 b + q; data (..., dim), missing = 0."""
    out = 0.0
    if b is not None:
        out = out + b @ P2
    if q is not None:
        out = out + q
    if sigma1 is not None:
        out = out + sigma1 @ P1 @ (c.C1 + c.D1 @ theta)
    if sigma2 is not None:
        out = out + sigma2 @ P2 @ (c.C2 + c.D2 @ theta)
    if rho is not None:
        out = out + rho @ theta
    return np.zeros(P2.shape[0]) + out


def _kappa(process: CoefficientProcess) -> float:
    return 0.0 if process.factor is None else process.factor.kappa


@dataclass(frozen=True)
class ForcingGroup:
    """Data sharing one exponential Z = exp(a W2 + c t); (0, 0) holds the deterministic data."""

    a: float
    c: float
    terms: Mapping[str, tuple[CoefficientProcess, ...]]
    terminal: np.ndarray
    """(n,) coefficient of Z(T) in g"""

    @property
    def exponent(self) -> Exponent:
        return (self.a, self.c)

    def data(self, t: float, kappa_ref: float, T: float) -> tuple[dict, dict]:
        """(regular, singular) base values at t: regular terms have kappa = 0, singular ones are
        rescaled to the common weight (T - t)^-kappa_ref."""
        regular, singular = {}, {}
        for name, processes in self.terms.items():
            for process in processes:
                base = np.asarray(process.base(t), dtype=np.float64)
                kappa = _kappa(process)
                if kappa == 0.0:
                    regular[name] = regular.get(name, 0.0) + base
                else:
                    scale = max(T - t, 0.0) ** (kappa_ref - kappa) if kappa_ref > kappa else 1.0
                    singular[name] = singular.get(name, 0.0) + base * scale
        return regular, singular

    def values(self, t: float) -> dict:
        """Coefficients of Z(t) including the singular weight"""
        out = {}
        for name, processes in self.terms.items():
            for process in processes:
                weight = 1.0 if process.factor is None else float(process.factor.weight(t))
                out[name] = out.get(name, 0.0) + np.asarray(process.base(t), dtype=np.float64) * weight
        return out


def separable_groups(spec: ProblemSpec) -> list[ForcingGroup]:
    """Group the nonzero data by exponential; raises NotDeterministicError for non-separable data."""
    terms: dict[Exponent, dict[str, list]] = {}
    terminal: dict[Exponent, np.ndarray] = {}
    for name, process in list(spec.processes.items()) + [("g", spec.g)]:
        if process.is_zero:
            continue
        if not process.is_separable:
            raise NotDeterministicError(f"{name} is {process.kind} without a separable form; use the LSMC backend")
        key = (0.0, 0.0) if process.factor is None else (process.factor.a, process.factor.c)
        if name == "g":
            weight = 1.0 if process.factor is None else float(process.factor.weight(spec.T))
            value = np.asarray(process.base(spec.T), dtype=np.float64) * weight
            terminal[key] = terminal.get(key, np.zeros(spec.n)) + value
            terms.setdefault(key, {})
        else:
            terms.setdefault(key, {}).setdefault(name, []).append(process)
    for key in terminal:
        terms.setdefault(key, {})
    if not terms:
        terms[(0.0, 0.0)] = {}
    keys = sorted(terms, key=lambda k: (k != (0.0, 0.0), k))
    return [
        ForcingGroup(
            a=float(a), c=float(c),
            terms=MappingProxyType({name: tuple(ps) for name, ps in terms[(a, c)].items()}),
            terminal=terminal.get((a, c), np.zeros(spec.n)),
        )
        for a, c in keys
    ]


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    backend: Literal["ode", "lsmc"]
    grid: TimeGrid
    alpha: np.ndarray
    """ode: (N+1, J, n) coefficient of exp(a_j w + c_j t); lsmc: (K, N+1, n) per path"""
    beta: np.ndarray
    """same layout as alpha"""
    exponents: tuple[Exponent, ...] = ((0.0, 0.0),)
    basis_spec: Optional[str] = None
    epsilon: float = 0.0
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.backend == "ode":
            assert self.alpha.shape[:2] == (len(self.grid), len(self.exponents)), f"{self.alpha.shape=}"
        elif self.backend == "lsmc":
            assert self.alpha.shape[1] == len(self.grid), f"{self.alpha.shape=}"
        else:
            raise NotImplementedError(f"{self.backend=}")
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def is_deterministic(self) -> bool:
        return self.backend == "ode" and self.exponents == ((0.0, 0.0),)

    def factors(self, t: float, w) -> np.ndarray:
        """(K, J) exp(a_j w + c_j t)"""
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        a = np.array([e[0] for e in self.exponents])
        c = np.array([e[1] for e in self.exponents])
        return np.exp(w[:, None] * a[None] + c[None] * t)

    def alpha_at(self, i: int, w) -> np.ndarray:
        """(K, n) at grid point i for W2 levels w (ode) or for every path (lsmc)"""
        if self.backend == "lsmc":
            return self.alpha[:, i]
        return self.factors(float(self.grid.t[i]), w) @ self.alpha[i]

    def beta_at(self, i: int, w) -> np.ndarray:
        if self.backend == "lsmc":
            return self.beta[:, i]
        return self.factors(float(self.grid.t[i]), w) @ self.beta[i]

    def sample(self, grid: TimeGrid) -> BsdeSolution:
        if grid == self.grid:
            return self
        if self.backend != "ode":
            raise ValueError(f"Invalid resampling: LSMC solution is tied to its ensemble grid {self.grid}")
        stride = self.grid.stride_to(grid)
        if stride is not None:
            alpha, beta = self.alpha[::stride], self.beta[::stride]
        else:
            alpha = CubicSpline(self.grid.t, self.alpha, axis=0)(grid.t)
            beta = CubicSpline(self.grid.t, self.beta, axis=0)(grid.t)
        return BsdeSolution("ode", grid, alpha, beta, self.exponents, self.basis_spec, self.epsilon, self.meta)

    def to_csv(self, path: str, n_paths: int = None):
        if self.backend == "ode":
            shape = self.alpha.shape[1:]
            header = ["t"] + matrix_columns("alpha", shape) + matrix_columns("beta", shape)
            rows = ([t] + list(a.ravel()) + list(b.ravel()) for t, a, b in zip(self.grid.t, self.alpha, self.beta))
        else:
            n = self.alpha.shape[-1]
            K = self.alpha.shape[0] if n_paths is None else min(n_paths, self.alpha.shape[0])
            header = ["path_id", "t"] + matrix_columns("alpha", (n,)) + matrix_columns("beta", (n,))
            rows = (
                [k, t] + list(self.alpha[k, i]) + list(self.beta[k, i])
                for k in range(K)
                for i, t in enumerate(self.grid.t)
            )
        write_csv(path, header, rows)


def solve_bsde_deterministic(
    spec: ProblemSpec,
    p1: MatrixPath,
    p2: MatrixPath,
    theta: MatrixPath,
    grid: TimeGrid,
    pinv_rtol: float = None,
    exact_inverse=False,
    cap=BLOWUP_CAP,
    tol=RK_TOL,
    max_substeps=MAX_SUBSTEPS,
) -> BsdeSolution:
    """ODE backend. The abar_j are integrated jointly with (P1, P2) and the gain is recomputed at
    every RK stage; p1, p2 and theta fix the grid and epsilon and are checked against the joint solve."""
    groups = separable_groups(spec)
    for path in (p1, p2, theta):
        if path.grid != grid:
            raise ValueError(f"Invalid {path.label}: lives on {path.grid}, expected {grid}")
    n, J, T = spec.n, len(groups), spec.T
    kappa = spec.singular_exponent
    system = RiccatiSystem(spec, p2.epsilon, pinv_rtol, exact_inverse)
    eye = np.eye(n)
    nn = n * n

    def rhs(t, y):
        c = system.coefficients(t)
        P1, P2 = y[: 2 * nn].reshape(2, n, n)
        abar = y[2 * nn :].reshape(J, n)
        d1 = system.p1_drift(c, P1)
        d2, th = system.p2_drift(c, P1, P2)
        A_cl, C2_cl = c.A + c.B @ th, c.C2 + c.D2 @ th
        regular = np.empty((J, n))
        singular = np.zeros((J, n))
        for j, group in enumerate(groups):
            reg, sing = group.data(t, kappa, T)
            M = A_cl.T + group.a * C2_cl.T + (group.c + 0.5 * group.a**2) * eye
            regular[j] = -(M @ abar[j] + forcing(c, P1, P2, th, **reg))
            if sing:
                singular[j] = -forcing(c, P1, P2, th, **sing)
        regular = np.concatenate([-d1.ravel(), -d2.ravel(), regular.ravel()])
        if kappa == 0.0:
            return regular, None
        return regular, np.concatenate([np.zeros(2 * nn), singular.ravel()])

    y_T = np.concatenate([spec.G.ravel(), spec.G.ravel()] + [group.terminal for group in groups])
    rk = BackwardRK4(
        grid, kappa=kappa, cap=cap, tol=tol, max_substeps=max_substeps,
        project=symmetric_projector(n, 2, J * n), label="alpha",
    )
    values = rk.integrate(rhs, y_T)
    P = values[:, : 2 * nn].reshape(-1, 2, n, n)
    abar = values[:, 2 * nn :].reshape(-1, J, n)
    abar[-1] = np.stack([group.terminal for group in groups])
    a = np.array([group.a for group in groups])
    thetas = np.stack([system.gain(system.coefficients(float(t)), P[i, 0], P[i, 1]) for i, t in enumerate(grid.t)])
    meta = {
        "p1_drift": float(np.max(np.abs(P[:, 0] - p1.values))),
        "p2_drift": float(np.max(np.abs(P[:, 1] - p2.values))),
        "theta_drift": float(np.max(np.abs(thetas - theta.values))),
        "singular_exponent": kappa,
        "substeps": rk.substeps_used,
        "stiff_steps": rk.stiff_steps,
    }
    return BsdeSolution(
        "ode", grid, abar, abar * a[None, :, None],
        exponents=tuple(group.exponent for group in groups), epsilon=p2.epsilon, meta=meta,
    )


@dataclass(frozen=True)
class Basis:
    """Regression features w^k (k <= degree), multiplied by exp(a w + c t) when `exponent` is set."""

    degree: int = 3
    exponent: Optional[Exponent] = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"Invalid basis degree: {self.degree}")

    def features(self, t: float, w: torch.Tensor) -> torch.Tensor:
        """(K, degree+1)"""
        powers = torch.arange(self.degree + 1, dtype=w.dtype, device=w.device)
        phi = w[:, None] ** powers[None]
        if self.exponent is not None:
            a, c = self.exponent
            phi = phi * torch.exp(a * w + c * t)[:, None]
        return phi

    def describe(self) -> str:
        poly = f"w^k, k<={self.degree}"
        if self.exponent is None:
            return poly
        a, c = self.exponent
        return f"exp({a:.17g}*w{c:+.17g}*t) * {poly}"


def default_basis(spec: ProblemSpec, degree=3) -> Basis:
    exponents = [
        (p.factor.a, p.factor.c) for p in list(spec.processes.values()) + [spec.g] if not p.is_zero and p.factor is not None
    ]
    return Basis(degree, exponents[0] if exponents else None)


def regress(phi: torch.Tensor, target: torch.Tensor, t: float, cond_max=REGRESSION_COND_MAX) -> torch.Tensor:
    """Least-squares fit of target (K, d) on features phi (K, p) through the normal equations.

    Columns are scaled to unit RMS; all-zero columns and all but the first constant column are dropped.
    """
    rms = phi.square().mean(0).sqrt()
    phi = phi[:, rms > 1e-300] / rms[rms > 1e-300]
    if phi.shape[1] == 0:
        return torch.zeros_like(target)
    constant = phi.var(0, unbiased=False) < 1e-20
    keep = ~constant
    if constant.any():
        keep[int(torch.nonzero(constant)[0])] = True
    phi = phi[:, keep]
    K = phi.shape[0]
    gram = phi.T @ phi / K
    cond = float(torch.linalg.cond(gram))
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditionedRegression(t, cond)
    coef = torch.linalg.solve(gram, phi.T @ target / K)
    return phi @ coef


class _StepData:
    """Data on the ensemble: regular values and smooth factors of singular separable data, per grid point."""

    def __init__(self, spec: ProblemSpec, grid: TimeGrid, w2: np.ndarray):
        self.spec, self.grid, self.w2 = spec, grid, w2

    def point(self, i: int) -> tuple[dict, dict]:
        t = float(self.grid.t[i])
        w, prefix = self.w2[:, i], self.w2[:, : i + 1]
        regular, smooth = {}, {}
        for name, process in self.spec.processes.items():
            if process.is_zero:
                continue
            if _kappa(process) > 0.0:
                base = np.asarray(process.base(t), dtype=np.float64)
                smooth[name] = (process.factor, base[None] * process.factor.z(t, w)[:, None])
            else:
                regular[name] = process.batch(t, w, prefix)
        return regular, smooth

    def half_step(self, i_point: int, i_step: int) -> dict:
        """Data giving half of the trapezoid integral of step i_step from grid point i_point."""
        regular, smooth = self.point(i_point)
        h = self.grid.h
        out = {name: 0.5 * h * value for name, value in regular.items()}
        t_left, t_right = float(self.grid.t[i_step]), float(self.grid.t[i_step + 1])
        for name, (factor, value) in smooth.items():
            out[name] = out.get(name, 0.0) + 0.5 * factor.step_weight(t_left, t_right) * value
        return out


def solve_bsde_lsmc(
    spec: ProblemSpec,
    p1: MatrixPath,
    p2: MatrixPath,
    theta: MatrixPath,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    basis: Basis = None,
    cond_max=REGRESSION_COND_MAX,
) -> BsdeSolution:
    """Least-squares Monte Carlo, theta-scheme in time:

        beta_i  = E_i[alpha_{i+1} dW_i] / h
        alpha_i = E_i[alpha_{i+1} + h/2 f_{i+1}] + h/2 f_i      (implicit in alpha_i through At)

    The singular weight of separable data is integrated exactly on every step.
    """
    if ensemble.grid != grid:
        raise ValueError(f"Invalid ensemble grid {ensemble.grid}, expected {grid}")
    basis = basis or default_basis(spec)
    p1, p2, theta = p1.sample(grid), p2.sample(grid), theta.sample(grid)
    system = RiccatiSystem(spec, p2.epsilon)
    n, N, K, h = spec.n, grid.n_steps, ensemble.K, grid.h
    w2 = ensemble.w2.numpy()
    dW = ensemble.dW2
    data = _StepData(spec, grid, w2)
    W = torch.from_numpy(w2)

    coefs = [system.coefficients(float(t)) for t in grid.t]
    A_cl = [c.A + c.B @ th for c, th in zip(coefs, theta.values)]
    C2_cl = [c.C2 + c.D2 @ th for c, th in zip(coefs, theta.values)]

    def F(i: int, values: dict) -> torch.Tensor:
        return torch.from_numpy(forcing(coefs[i], p1.values[i], p2.values[i], theta.values[i], **values))

    alpha = torch.zeros(K, N + 1, n, dtype=torch.float64)
    beta = torch.zeros(K, N + 1, n, dtype=torch.float64)
    alpha[:, N] = torch.from_numpy(spec.g.batch(grid.T, w2[:, N], w2))
    stderr = np.zeros((N + 1, n))
    residual_z = np.zeros(N)
    for i in range(N - 1, -1, -1):
        t = float(grid.t[i])
        phi = basis.features(t, W[:, i])
        y_next = alpha[:, i + 1]
        drift_next = y_next @ torch.from_numpy(A_cl[i + 1]) + beta[:, i + 1] @ torch.from_numpy(C2_cl[i + 1])
        target = y_next + 0.5 * h * drift_next + F(i + 1, data.half_step(i + 1, i))
        fitted = regress(phi, target, t, cond_max)
        beta[:, i] = regress(phi, y_next * dW[:, i : i + 1], t, cond_max) / h
        rhs = fitted + 0.5 * h * (beta[:, i] @ torch.from_numpy(C2_cl[i])) + F(i, data.half_step(i, i))
        implicit = np.eye(n) - 0.5 * h * A_cl[i]
        alpha[:, i] = rhs @ torch.from_numpy(np.linalg.inv(implicit))

        res = target - fitted
        sd = res.std(0, unbiased=True) / K**0.5 if K > 1 else torch.zeros(n, dtype=torch.float64)
        stderr[i] = sd.numpy()
        residual_z[i] = float(torch.max(res.mean(0).abs() / sd.clamp_min(1e-300))) if K > 1 else 0.0
    beta[:, N] = beta[:, N - 1]
    meta = {
        "alpha_stderr": stderr,
        "residual_mean_z": residual_z,
        "paths": K,
        "seed": ensemble.seed,
    }
    return BsdeSolution(
        "lsmc", grid, alpha.numpy(), beta.numpy(),
        basis_spec=basis.describe(), epsilon=p2.epsilon, meta=meta,
    )

