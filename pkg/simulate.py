"""Seeded Brownian ensembles, Euler-Maruyama for the filtered state (driven by W2 only) and the full
state, Monte Carlo estimates of the cost and of control L2 norms."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, NamedTuple, Optional, Union

import numpy as np
import scipy.integrate
import torch
from einops import rearrange
from scipy.interpolate import CubicSpline

from model import CoefficientProcess, ProblemSpec, TimeGrid
from riccati import MatrixPath
from util.export import matrix_columns, write_csv
from util.utils import partition_indices


class SingularTerminalWarning(UserWarning):
    pass


def path_seed(seed: int, path_id: int) -> int:
    """64-bit seed of path `path_id`, independent of the ensemble size"""
    return int(np.random.SeedSequence([int(seed), int(path_id)]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    seed: int
    dW1: torch.Tensor
    """(K, N)"""
    dW2: torch.Tensor
    """(K, N)"""

    @property
    def K(self) -> int:
        return self.dW1.shape[0]

    @cached_property
    def w1(self) -> torch.Tensor:
        """(K, N+1), W1(t0) = 0"""
        return torch.cat([torch.zeros(self.K, 1, dtype=torch.float64), torch.cumsum(self.dW1, dim=1)], dim=1)

    @cached_property
    def w2(self) -> torch.Tensor:
        """(K, N+1), W2(t0) = 0"""
        return torch.cat([torch.zeros(self.K, 1, dtype=torch.float64), torch.cumsum(self.dW2, dim=1)], dim=1)


def _draw(n_steps: int, seed: int, begin: int, end: int) -> torch.Tensor:
    """(end-begin, 2, N) standard normals; each path consumes its stream as (W1 steps, W2 steps)"""
    out = torch.empty(end - begin, 2, n_steps, dtype=torch.float64)
    for k in range(begin, end):
        generator = torch.Generator().manual_seed(path_seed(seed, k))
        out[k - begin] = torch.randn(2, n_steps, generator=generator, dtype=torch.float64)
    return out


def sample_ensemble(grid: TimeGrid, K: int, seed: int, workers=1) -> PathEnsemble:
    """Brownian increments on `grid`. Both motions start at grid.t0, which is the initial time of every
    simulation on this ensemble: a start s > 0 needs an ensemble sampled on TimeGrid(s, T, N)."""
    if int(K) != K or K < 1:
        raise ValueError(f"Invalid path count: {K}")
    chunks = partition_indices(int(K), max(1, workers))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(lambda chunk: _draw(grid.n_steps, seed, *chunk), chunks))
    z = torch.cat(parts) * math.sqrt(grid.h)
    return PathEnsemble(grid, int(seed), z[:, 0].contiguous(), z[:, 1].contiguous())


@dataclass(frozen=True, eq=False)
class SeparableLambda:
    """Lambda(t, w) = sum_j coef_j(t) exp(a_j w + c_j t); deterministic when the only exponent is (0, 0)."""

    grid: TimeGrid
    coef: np.ndarray
    """(N+1, J, m)"""
    exponents: tuple[tuple[float, float], ...] = ((0.0, 0.0),)

    def sample(self, grid: TimeGrid) -> SeparableLambda:
        if grid == self.grid:
            return self
        stride = self.grid.stride_to(grid)
        coef = self.coef[::stride] if stride is not None else CubicSpline(self.grid.t, self.coef, axis=0)(grid.t)
        return SeparableLambda(grid, coef, self.exponents)

    def at(self, i: int, w: np.ndarray, rows: slice = None) -> np.ndarray:
        """(K, m) at grid point i for the W2 levels w (K,)"""
        t = float(self.grid.t[i])
        a = np.array([e[0] for e in self.exponents])
        c = np.array([e[1] for e in self.exponents])
        z = np.exp(np.asarray(w, dtype=np.float64)[:, None] * a[None] + c[None] * t)
        return z @ self.coef[i]

    def sq_integral(self, t_prime: float, t0: float = None) -> float:
        """E int_{t0}^{t_prime} |Lambda|^2 dt with W2(t0) = 0, trapezoid on the grid"""
        t0 = self.grid.t0 if t0 is None else t0
        t = self.grid.t
        keep = t <= t_prime + 1e-12 * max(1.0, abs(t_prime))
        a = np.array([e[0] for e in self.exponents])
        c = np.array([e[1] for e in self.exponents])
        # E[Z_j Z_k] = exp((c_j + c_k) t + (a_j + a_k)^2 (t - t0) / 2)
        moments = np.exp(
            (c[:, None] + c[None])[None] * t[keep, None, None]
            + 0.5 * ((a[:, None] + a[None]) ** 2)[None] * (t[keep, None, None] - t0)
        )
        coef = self.coef[keep]
        f = np.einsum("tjm,tkm,tjk->t", coef, coef, moments)
        return float(scipy.integrate.trapezoid(f, t[keep]))


@dataclass(frozen=True, eq=False)
class EnsembleLambda:
    """Per-path values tied to one PathEnsemble (LSMC backend)."""

    grid: TimeGrid
    values: np.ndarray
    """(K, N+1, m)"""
    seed: int

    def sample(self, grid: TimeGrid) -> EnsembleLambda:
        if grid != self.grid:
            raise ValueError(f"Invalid grid {grid}: per-path Lambda lives on {self.grid}")
        return self

    def at(self, i: int, w: np.ndarray, rows: slice = None) -> np.ndarray:
        values = self.values[:, i] if rows is None else self.values[rows, i]
        if values.shape[0] != np.shape(w)[0]:
            raise ValueError(f"Invalid ensemble: Lambda has {values.shape[0]} paths, got {np.shape(w)[0]}")
        return values


LambdaProcess = Union[SeparableLambda, EnsembleLambda]


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """u = Theta x_hat + Lambda on [t0, valid_until]."""

    theta: MatrixPath
    lam: LambdaProcess
    valid_until: float
    singular_at_T: bool = False
    epsilon: float = 0.0
    label: str = ""

    def __post_init__(self):
        grid = self.theta.grid
        if not grid.t0 < self.valid_until <= grid.T + 1e-12:
            raise ValueError(f"Invalid valid_until {self.valid_until} for [{grid.t0}, {grid.T}]")
        if self.lam.grid.t0 != grid.t0 or self.lam.grid.T != grid.T:
            raise ValueError(f"Invalid Lambda grid {self.lam.grid}, theta lives on {grid}")
        valid = grid.t <= self.valid_until + 1e-12
        if self.singular_at_T:
            valid &= grid.t < grid.T
        if not np.all(np.isfinite(self.theta.values[valid])):
            raise ValueError(f"Invalid feedback law {self.label}: theta not finite on [{grid.t0}, {self.valid_until}]")

    def restricted(self, t_prime: float) -> FeedbackLaw:
        return FeedbackLaw(self.theta, self.lam, min(t_prime, self.valid_until), self.singular_at_T, self.epsilon, self.label)


@dataclass(frozen=True, eq=False)
class Trajectories:
    grid: TimeGrid
    x: torch.Tensor
    """(K, steps+1, n)"""
    u: torch.Tensor
    """(K, steps, m) left-endpoint controls"""
    seed: int
    w2: torch.Tensor
    """(K, N+1) W2 levels of the ensemble"""
    kind: Literal["filtered", "full"] = "filtered"

    @property
    def steps(self) -> int:
        return self.u.shape[1]

    @property
    def K(self) -> int:
        return self.x.shape[0]

    def to_csv(self, path: str, n_paths: int = None):
        K = self.K if n_paths is None else min(n_paths, self.K)
        n, m = self.x.shape[-1], self.u.shape[-1]
        x = rearrange(self.x[:K].numpy(), "k t n -> (k t) n")
        u = torch.cat([self.u[:K], torch.full((K, 1, m), float("nan"), dtype=self.u.dtype)], dim=1)
        u = rearrange(u.numpy(), "k t m -> (k t) m")
        t = np.tile(self.grid.t[: self.steps + 1], K)
        ids = np.repeat(np.arange(K), self.steps + 1)
        header = ["path_id", "t"] + matrix_columns("x", (n,)) + matrix_columns("u", (m,))
        write_csv(path, header, ([int(k), ti] + list(xi) + list(ui) for k, ti, xi, ui in zip(ids, t, x, u)))


class Estimate(NamedTuple):
    mean: float
    stderr: float


def mean_stderr(values) -> Estimate:
    """Mean and standard error with fsum reductions (independent of summation order)."""
    values = [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]
    K = len(values)
    if K == 0:
        raise ValueError("Invalid estimate: no samples")
    mean = math.fsum(values) / K
    if K == 1:
        return Estimate(mean, float("nan"))
    var = math.fsum((v - mean) ** 2 for v in values) / (K - 1)
    return Estimate(mean, math.sqrt(var / K))


def _apply(M: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """(k, r) rows of M @ x_row for x (k, c), accumulated column by column so each row is computed
    identically whatever the batch."""
    out = x[:, 0:1] * M[:, 0][None]
    for j in range(1, M.shape[1]):
        out = out + x[:, j : j + 1] * M[:, j][None]
    return out


def _tensor(value) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(value, dtype=np.float64))


def _process_at(process: CoefficientProcess, grid: TimeGrid, i: int, w2: np.ndarray) -> torch.Tensor:
    """(k, dim) left-endpoint value"""
    return _tensor(process.batch(float(grid.t[i]), w2[:, i], w2[:, : i + 1]))


def _process_step(process: CoefficientProcess, grid: TimeGrid, i: int, w2: np.ndarray) -> torch.Tensor:
    """(k, dim) integral over step i; the singular weight of separable data is integrated exactly"""
    if process.factor is not None and process.factor.kappa > 0.0:
        t_left, t_right = float(grid.t[i]), float(grid.t[i + 1])
        base = np.asarray(process.base(t_left), dtype=np.float64)
        smooth = base[None] * process.factor.z(t_left, w2[:, i])[:, None]
        return _tensor(smooth * process.factor.step_weight(t_left, t_right))
    return _process_at(process, grid, i, w2) * grid.h


def _steps_until(grid: TimeGrid, t_end: Optional[float]) -> int:
    if t_end is None or t_end >= grid.T:
        return grid.n_steps
    steps = int(np.searchsorted(grid.t, t_end + 1e-12 * max(1.0, abs(t_end)), side="right")) - 1
    if steps < 1:
        raise ValueError(f"Invalid t_end {t_end}: no full step on {grid}")
    return steps


def _check_start(grid: TimeGrid, s: float, x0, n: int) -> np.ndarray:
    if s is not None and abs(s - grid.t0) > 1e-12 * max(1.0, abs(s)):
        raise ValueError(f"Invalid start time {s}: ensemble starts at {grid.t0}, sample one on [s, T] (W2(s) = 0)")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape != (n,):
        raise ValueError(f"Invalid x0 shape {x0.shape}, expected ({n},)")
    return x0


def _run_chunks(fn, K: int, workers: int):
    chunks = partition_indices(K, max(1, workers))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda chunk: fn(slice(*chunk)), chunks))


def simulate_filtered_state(
    spec: ProblemSpec,
    law: FeedbackLaw,
    ensemble: PathEnsemble,
    s: float,
    x0,
    t_end: float = None,
    workers=1,
) -> Trajectories:
    """dx_hat = [(A + B Theta) x_hat + B Lambda + b] dt + [(C2 + D2 Theta) x_hat + D2 Lambda + sigma2] dW2

    The ensemble starts at s, W2 measured from there.
    """
    grid = ensemble.grid
    x0 = _check_start(grid, s, x0, spec.n)
    if t_end is None and law.valid_until < grid.T:
        raise ValueError(f"Invalid simulation: law {law.label} is valid until {law.valid_until}, pass t_end")
    if t_end is not None and t_end > law.valid_until + 1e-12:
        raise ValueError(f"Invalid t_end {t_end}: law {law.label} is valid until {law.valid_until}")
    steps = _steps_until(grid, t_end)
    if law.singular_at_T and steps == grid.n_steps:
        warnings.warn(
            f"{law.label}: gain singular at T, the last step uses the value at t={grid.t[-2]:.6g}", SingularTerminalWarning
        )
    theta = law.theta.sample(grid).values
    lam = law.lam.sample(grid)
    w2_all = ensemble.w2.numpy()
    coefs = [spec.coefficients(float(t)) for t in grid.t[:steps]]

    def run(rows: slice):
        w2 = w2_all[rows]
        dW2 = ensemble.dW2[rows]
        k = w2.shape[0]
        x = torch.empty(k, steps + 1, spec.n, dtype=torch.float64)
        u = torch.empty(k, steps, spec.m, dtype=torch.float64)
        x[:, 0] = _tensor(x0)[None]
        for i in range(steps):
            c = coefs[i]
            xi = x[:, i]
            ui = _apply(_tensor(theta[i]), xi) + _tensor(lam.at(i, w2[:, i], rows))
            drift = (_apply(_tensor(c.A), xi) + _apply(_tensor(c.B), ui)) * grid.h + _process_step(spec.b, grid, i, w2)
            diffusion = _apply(_tensor(c.C2), xi) + _apply(_tensor(c.D2), ui) + _process_at(spec.sigma2, grid, i, w2)
            x[:, i + 1] = xi + drift + diffusion * dW2[:, i : i + 1]
            u[:, i] = ui
        return x, u

    parts = _run_chunks(run, ensemble.K, workers)
    return Trajectories(grid, torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts]), ensemble.seed, ensemble.w2, "filtered")


def simulate_full_state(
    spec: ProblemSpec,
    u: Union[torch.Tensor, Trajectories],
    ensemble: PathEnsemble,
    s: float,
    x0,
    workers=1,
) -> Trajectories:
    """Euler-Maruyama for the full state under given G-adapted controls, both noises. The ensemble starts at s."""
    grid = ensemble.grid
    x0 = _check_start(grid, s, x0, spec.n)
    if isinstance(u, Trajectories):
        if u.grid != grid or u.seed != ensemble.seed:
            raise ValueError(f"Invalid controls: simulated on {u.grid} with seed {u.seed}, ensemble is {grid} / {ensemble.seed}")
        u = u.u
    u = torch.as_tensor(u, dtype=torch.float64)
    if u.ndim != 3 or u.shape[0] != ensemble.K or u.shape[1] > grid.n_steps or u.shape[2] != spec.m:
        raise ValueError(f"Invalid control shape {tuple(u.shape)} for K={ensemble.K}, N={grid.n_steps}, m={spec.m}")
    steps = u.shape[1]
    w2_all = ensemble.w2.numpy()
    coefs = [spec.coefficients(float(t)) for t in grid.t[:steps]]

    def run(rows: slice):
        w2 = w2_all[rows]
        dW1, dW2, uu = ensemble.dW1[rows], ensemble.dW2[rows], u[rows]
        k = w2.shape[0]
        x = torch.empty(k, steps + 1, spec.n, dtype=torch.float64)
        x[:, 0] = _tensor(x0)[None]
        for i in range(steps):
            c = coefs[i]
            xi, ui = x[:, i], uu[:, i]
            drift = (_apply(_tensor(c.A), xi) + _apply(_tensor(c.B), ui)) * grid.h + _process_step(spec.b, grid, i, w2)
            vol1 = _apply(_tensor(c.C1), xi) + _apply(_tensor(c.D1), ui) + _process_at(spec.sigma1, grid, i, w2)
            vol2 = _apply(_tensor(c.C2), xi) + _apply(_tensor(c.D2), ui) + _process_at(spec.sigma2, grid, i, w2)
            x[:, i + 1] = xi + drift + vol1 * dW1[:, i : i + 1] + vol2 * dW2[:, i : i + 1]
        return x

    x = torch.cat(_run_chunks(run, ensemble.K, workers))
    return Trajectories(grid, x, u, ensemble.seed, ensemble.w2, "full")


def _quad(x: torch.Tensor, M: np.ndarray, y: torch.Tensor) -> torch.Tensor:
    """(k,) x' M y per row"""
    return (x * _apply(_tensor(M), y)).sum(-1)


def path_costs(spec: ProblemSpec, traj: Trajectories) -> np.ndarray:
    """(K,) per-path discrete cost, left-endpoint quadrature"""
    grid = traj.grid
    w2 = traj.w2.numpy()
    if traj.steps != grid.n_steps:
        raise ValueError(f"Invalid trajectories: cost needs the full horizon, got {traj.steps}/{grid.n_steps} steps")
    K = traj.K
    cost = torch.zeros(K, dtype=torch.float64)
    for i in range(grid.n_steps):
        c = spec.coefficients(float(grid.t[i]))
        x, u = traj.x[:, i], traj.u[:, i]
        running = _quad(x, c.Q, x) + 2.0 * _quad(u, c.S, x) + _quad(u, c.R, u)
        cost = cost + running * grid.h
        cost = cost + 2.0 * (_process_step(spec.q, grid, i, w2) * x).sum(-1)
        cost = cost + 2.0 * (_process_step(spec.rho, grid, i, w2) * u).sum(-1)
    xT = traj.x[:, -1]
    g = _tensor(spec.g.batch(grid.T, w2[:, -1], w2))
    cost = cost + _quad(xT, spec.G, xT) + 2.0 * (g * xT).sum(-1)
    return cost.numpy()


def evaluate_cost(spec: ProblemSpec, traj: Trajectories, s: float = None, x0=None) -> Estimate:
    """Monte Carlo estimate of the cost with standard error."""
    if x0 is not None:
        x0 = _check_start(traj.grid, s, x0, spec.n)
        if not torch.all(traj.x[:, 0] == _tensor(x0)[None]):
            raise ValueError("Invalid trajectories: initial state differs from x0")
    return mean_stderr(path_costs(spec, traj))


def control_l2_norm(traj: Trajectories) -> Estimate:
    """E int |u|^2 dt over the simulated steps"""
    return mean_stderr((traj.u.square().sum(-1).sum(-1) * traj.grid.h).numpy())


def control_distance(a: Trajectories, b: Trajectories) -> Estimate:
    """E int |u_a - u_b|^2 dt on shared paths"""
    if a.seed != b.seed or a.grid != b.grid or a.u.shape != b.u.shape:
        raise ValueError("Invalid comparison: trajectories are not on the same ensemble and steps")
    return mean_stderr(((a.u - b.u).square().sum(-1).sum(-1) * a.grid.h).numpy())
