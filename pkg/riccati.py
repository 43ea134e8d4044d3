"""Backward matrix ODEs: P1, P2 (with pseudoinverse), the perturbed P2_eps and the closed-loop Lyapunov pair.

    P1' + A'P1 + P1 A + C1'P1 C1 + C2'P1 C2 + Q = 0,                        P1(T) = G
    P2' + A'P2 + P2 A + C1'P1 C1 + C2'P2 C2 + Q - L'K^+ L = 0,               P2(T) = G
    K = R + eps I + D1'P1 D1 + D2'P2 D2,   L = B'P2 + D1'P1 C1 + D2'P2 C2 + S,   Theta = -K^+ L
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np
import scipy.integrate
import scipy.linalg
from scipy.interpolate import CubicSpline

from model import Coefficients, LQError, ProblemSpec, TimeGrid
from util.export import matrix_columns, write_csv
from util.linalg import is_symmetric, min_eigenvalue, pinv, symmetrize

BLOWUP_CAP = 1e12
RK_TOL = 1e-12
MAX_SUBSTEPS = 4096

Rhs = Callable[[float, np.ndarray], "tuple[np.ndarray, Optional[np.ndarray]]"]


class BlowUpError(LQError):
    def __init__(self, t_star: float, label: str = "", partial: np.ndarray = None):
        self.t_star = float(t_star)
        self.label = label
        self.partial = partial
        """(N+1, d) raw state, NaN before the blow-up point"""
        super().__init__(f"{label or 'solution'} exceeds the magnitude cap at t={self.t_star:.6g}")


class SingularBlockWarning(UserWarning):
    pass


class SubstepLimitWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class MatrixPath:
    grid: TimeGrid
    values: np.ndarray
    """(N+1, r, c)"""
    symmetric: bool = False
    label: str = ""
    epsilon: float = 0.0
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != len(self.grid):
            raise ValueError(f"Invalid MatrixPath values shape {values.shape} for a grid of {len(self.grid)} points")
        if self.symmetric:
            assert values.shape[1] == values.shape[2], f"{self.label}: symmetric path of shape {values.shape[1:]}"
            finite = np.all(np.isfinite(values), axis=(1, 2))
            assert not finite.any() or is_symmetric(values[finite], 1e-10), f"{self.label}: asymmetric values"
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @cached_property
    def _spline(self) -> CubicSpline:
        return CubicSpline(self.grid.t, self.values, axis=0)

    def __call__(self, t: float) -> np.ndarray:
        """Grid value at grid points, cubic-spline interpolation in between."""
        grid = self.grid
        x = (t - grid.t0) / grid.h
        i = int(round(x))
        if 0 <= i <= grid.n_steps and abs(x - i) < 1e-9:
            return self.values[i]
        if not grid.t0 <= t <= grid.T:
            raise ValueError(f"Invalid time {t} outside [{grid.t0}, {grid.T}] for {self.label}")
        value = self._spline(t)
        return symmetrize(value) if self.symmetric else value

    def sample(self, grid: TimeGrid) -> MatrixPath:
        stride = self.grid.stride_to(grid)
        if stride is not None:
            values = self.values[::stride]
        else:
            values = np.stack([self(float(t)) for t in grid.t])
        return MatrixPath(grid, values, self.symmetric, self.label, self.epsilon, self.meta)

    def sq_integral(self, t_prime: float = None) -> float:
        """int_{t0}^{t_prime} |M(t)|_F^2 dt by the trapezoid rule."""
        grid = self.grid
        t_prime = grid.T if t_prime is None else float(t_prime)
        if not grid.t0 < t_prime <= grid.T:
            raise ValueError(f"Invalid truncation {t_prime} for [{grid.t0}, {grid.T}]")
        sq = np.sum(self.values**2, axis=(1, 2))
        k = int(np.searchsorted(grid.t, t_prime + 1e-12 * max(1.0, abs(t_prime)), side="right"))
        t, f = grid.t[:k], sq[:k]
        if t[-1] < t_prime:
            t = np.append(t, t_prime)
            f = np.append(f, np.sum(self(t_prime) ** 2))
        return float(scipy.integrate.trapezoid(f, t))

    def csv_rows(self):
        prefix = self.label or "m"
        header = ["t"] + matrix_columns(prefix, self.shape)
        return header, ([t] + list(v.ravel()) for t, v in zip(self.grid.t, self.values))

    def to_csv(self, path: str):
        write_csv(path, *self.csv_rows())


@dataclass
class BackwardRK4:
    """Classical RK4 from T down to t0, each grid step split into step-doubled substeps.

    `rhs(t, y)` returns `(regular, singular)` with dy/dt = regular + (T - t)^(-kappa) * singular,
    `singular` may be None. The march runs in tau = (T - t)^(1 - kappa), in which both parts are bounded.
    A grid step that `max_substeps` cannot resolve (stiff layers such as P2_eps near T for small eps)
    is redone with the implicit Radau method.
    """

    grid: TimeGrid
    kappa: float = 0.0
    cap: float = BLOWUP_CAP
    tol: float = RK_TOL
    max_substeps: int = MAX_SUBSTEPS
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"Invalid singular exponent: {self.kappa}")
        assert self.max_substeps >= 2, f"{self.max_substeps=}"
        self.p = 1.0 / (1.0 - self.kappa)
        self.projection_drift = 0.0
        self.substeps_used = 0
        self.stiff_steps = 0
        self._warned = False

    def _tau(self, t: float) -> float:
        return max(self.grid.T - t, 0.0) ** (1.0 / self.p)

    def _t(self, tau: float) -> float:
        return self.grid.T - tau**self.p

    def _deriv(self, rhs: Rhs, tau: float, y: np.ndarray) -> np.ndarray:
        # an overshooting trial stage must not reach the linear solves
        if not np.all(np.isfinite(y)):
            return np.full_like(y, np.nan)
        regular, singular = rhs(self._t(tau), y)
        out = -self.p * tau ** (self.p - 1.0) * regular
        if singular is not None:
            out = out - self.p * singular
        return out

    def _march(self, rhs: Rhs, tau0: float, tau1: float, y: np.ndarray, m: int) -> np.ndarray:
        d = (tau1 - tau0) / m
        for j in range(m):
            tau = tau0 + j * d
            k1 = self._deriv(rhs, tau, y)
            k2 = self._deriv(rhs, tau + 0.5 * d, y + 0.5 * d * k1)
            k3 = self._deriv(rhs, tau + 0.5 * d, y + 0.5 * d * k2)
            k4 = self._deriv(rhs, tau + d, y + d * k3)
            y = y + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(y)):
                break
        return y

    def _trial_error(self, coarse: np.ndarray, fine: np.ndarray) -> float:
        if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))) or np.max(np.abs(fine)) > self.cap:
            return np.inf
        return float(np.max(np.abs(fine - coarse)))

    def _implicit_step(self, rhs: Rhs, tau0: float, tau1: float, y: np.ndarray) -> Optional[np.ndarray]:
        """Radau over one grid step; inf once the solution reaches the cap, None when Radau gives up."""

        def reaches_cap(tau, v):
            return np.max(np.abs(v)) - self.cap

        reaches_cap.terminal = True
        sol = scipy.integrate.solve_ivp(
            lambda tau, v: self._deriv(rhs, tau, v),
            (tau0, tau1),
            y,
            method="Radau",
            rtol=max(self.tol, 1e-13),
            atol=1e-3 * self.tol,
            events=reaches_cap,
        )
        if sol.status == 1 or not np.all(np.isfinite(sol.y)) or np.max(np.abs(sol.y)) > self.cap:
            return np.full_like(y, np.inf)
        if sol.status != 0:
            return None
        return sol.y[:, -1]

    def _grid_step(self, rhs: Rhs, tau0: float, tau1: float, y: np.ndarray, m: int):
        coarse = self._march(rhs, tau0, tau1, y, m)
        while True:
            fine = self._march(rhs, tau0, tau1, y, 2 * m)
            err = self._trial_error(coarse, fine)
            if np.isfinite(err) and err <= self.tol * (1.0 + np.max(np.abs(fine))):
                self.substeps_used = max(self.substeps_used, 2 * m)
                # Richardson: both are 4th order
                return fine + (fine - coarse) / 15.0, max(1, m // 2)
            if 2 * m >= self.max_substeps:
                self.substeps_used = max(self.substeps_used, 2 * m)
                implicit = self._implicit_step(rhs, tau0, tau1, y)
                if implicit is not None:
                    self.stiff_steps += 1
                    return implicit, 1
                if np.all(np.isfinite(fine)) and not self._warned:
                    warnings.warn(
                        f"{self.label or 'RK4'}: {2 * m} substeps did not reach tol={self.tol:g} (err {err:.3e})",
                        SubstepLimitWarning,
                    )
                    self._warned = True
                return fine, m
            m *= 2
            coarse = fine

    def integrate(self, rhs: Rhs, y_terminal) -> np.ndarray:
        """(N+1, d) flattened states on the grid, row N equal to `y_terminal` exactly"""
        grid = self.grid
        y = np.array(y_terminal, dtype=np.float64).ravel()
        out = np.full((len(grid), y.size), np.nan)
        out[-1] = y
        taus = [self._tau(float(t)) for t in grid.t]
        m = 1
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(grid.n_steps - 1, -1, -1):
                y, m = self._grid_step(rhs, taus[i + 1], taus[i], y, m)
                if self.project is not None and np.all(np.isfinite(y)):
                    projected = self.project(y)
                    self.projection_drift = max(self.projection_drift, float(np.max(np.abs(projected - y))))
                    y = projected
                if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > self.cap:
                    raise BlowUpError(float(grid.t[i]), self.label, out)
                out[i] = y
        return out


def symmetric_projector(n: int, blocks: int = 1, extra: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    """Symmetrize the leading `blocks` n x n blocks of a flat state, leave `extra` trailing entries."""
    size = blocks * n * n

    def project(y: np.ndarray) -> np.ndarray:
        head = symmetrize(y[:size].reshape(blocks, n, n)).ravel()
        return np.concatenate([head, y[size : size + extra]])

    return project


@dataclass(frozen=True)
class RiccatiSystem:
    spec: ProblemSpec
    epsilon: float = 0.0
    pinv_rtol: Optional[float] = None
    exact_inverse: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"Invalid epsilon: {self.epsilon}")

    @property
    def uses_pinv(self) -> bool:
        return self.epsilon == 0 and not self.exact_inverse

    def coefficients(self, t: float) -> Coefficients:
        c = self.spec.coefficients(t)
        if self.epsilon:
            c = c._replace(R=c.R + self.epsilon * np.eye(self.spec.m))
        return c

    def block(self, c: Coefficients, P1: np.ndarray, P2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """K (m, m) and L (m, n)"""
        K = c.R + c.D1.T @ P1 @ c.D1 + c.D2.T @ P2 @ c.D2
        L = c.B.T @ P2 + c.D1.T @ P1 @ c.C1 + c.D2.T @ P2 @ c.C2 + c.S
        return symmetrize(K), L

    def solve_block(self, K: np.ndarray, M: np.ndarray) -> np.ndarray:
        """K^-1 M, or K^+ M on the unperturbed pseudoinverse branch"""
        if self.uses_pinv:
            return pinv(K, self.pinv_rtol) @ M
        return scipy.linalg.solve(K, M, assume_a="sym")

    def gain(self, c: Coefficients, P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
        K, L = self.block(c, P1, P2)
        return -self.solve_block(K, L)

    def feedforward(self, c: Coefficients, P1: np.ndarray, P2: np.ndarray, v: np.ndarray) -> np.ndarray:
        """-K^-1 v, the affine part of the feedback for the forcing v (m,)"""
        K, _ = self.block(c, P1, P2)
        return -self.solve_block(K, v)

    def p1_drift(self, c: Coefficients, P1: np.ndarray) -> np.ndarray:
        return symmetrize(c.A.T @ P1 + P1 @ c.A + c.C1.T @ P1 @ c.C1 + c.C2.T @ P1 @ c.C2 + c.Q)

    def p2_drift(self, c: Coefficients, P1: np.ndarray, P2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(drift, Theta); P2' = -drift"""
        K, L = self.block(c, P1, P2)
        theta = -self.solve_block(K, L)
        drift = c.A.T @ P2 + P2 @ c.A + c.C1.T @ P1 @ c.C1 + c.C2.T @ P2 @ c.C2 + c.Q + L.T @ theta
        return symmetrize(drift), theta

    def joint_rhs(self, t: float, y: np.ndarray):
        n = self.spec.n
        c = self.coefficients(t)
        P1, P2 = y[: 2 * n * n].reshape(2, n, n)
        d1 = self.p1_drift(c, P1)
        d2, _ = self.p2_drift(c, P1, P2)
        return -np.concatenate([d1.ravel(), d2.ravel()]), None


def _check_grid(spec: ProblemSpec, grid: TimeGrid, *paths: MatrixPath):
    if abs(grid.T - spec.T) > 1e-12 * max(1.0, abs(spec.T)):
        raise ValueError(f"Invalid grid: ends at {grid.T}, horizon is T={spec.T}")
    for path in paths:
        if path.grid != grid:
            raise ValueError(f"Invalid {path.label or 'path'}: lives on {path.grid}, expected {grid}")


def solve_p1(spec: ProblemSpec, grid: TimeGrid, cap=BLOWUP_CAP, tol=RK_TOL, max_substeps=MAX_SUBSTEPS) -> MatrixPath:
    _check_grid(spec, grid)
    n = spec.n
    system = RiccatiSystem(spec)

    def rhs(t, y):
        return -system.p1_drift(spec.coefficients(t), y.reshape(n, n)).ravel(), None

    rk = BackwardRK4(grid, cap=cap, tol=tol, max_substeps=max_substeps, project=symmetric_projector(n), label="P1")
    values = rk.integrate(rhs, spec.G)
    meta = {"projection_drift": rk.projection_drift, "substeps": rk.substeps_used, "stiff_steps": rk.stiff_steps}
    return MatrixPath(grid, values.reshape(-1, n, n), True, "P1", meta=meta)


def block_ranks(system: RiccatiSystem, grid: TimeGrid, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Pseudoinverse rank of K at every grid point"""
    ranks = np.empty(len(grid), dtype=np.int64)
    for i, t in enumerate(grid.t):
        K, _ = system.block(system.coefficients(float(t)), p1[i], p2[i])
        ranks[i] = pinv(K, system.pinv_rtol, return_rank=True)[1]
    return ranks


def solve_p2(
    spec: ProblemSpec,
    p1: MatrixPath,
    grid: TimeGrid,
    epsilon: float = 0.0,
    cap=BLOWUP_CAP,
    tol=RK_TOL,
    max_substeps=MAX_SUBSTEPS,
    pinv_rtol: float = None,
    exact_inverse=False,
) -> MatrixPath:
    """P2 (epsilon = 0) or P2_eps, integrated jointly with P1 so stage values stay consistent.

    With epsilon = 0 the pseudoinverse of K is used unless `exact_inverse`; rank changes of K between
    adjacent grid points are reported as SingularBlockWarning and kept in `meta["rank_changes"]`.
    """
    _check_grid(spec, grid, p1)
    n = spec.n
    system = RiccatiSystem(spec, float(epsilon), pinv_rtol, exact_inverse)
    label = "P2" if epsilon == 0 else "P2_eps"
    rk = BackwardRK4(grid, cap=cap, tol=tol, max_substeps=max_substeps, project=symmetric_projector(n, 2), label=label)
    values = rk.integrate(system.joint_rhs, np.stack([spec.G, spec.G])).reshape(-1, 2, n, n)
    meta = {
        "projection_drift": rk.projection_drift,
        "substeps": rk.substeps_used,
        "stiff_steps": rk.stiff_steps,
        "p1_drift": float(np.max(np.abs(values[:, 0] - p1.values))),
    }
    if system.uses_pinv:
        ranks = block_ranks(system, grid, values[:, 0], values[:, 1])
        changes = [
            (float(grid.t[i + 1]), int(ranks[i]), int(ranks[i + 1]))
            for i in range(grid.n_steps)
            if ranks[i] != ranks[i + 1]
        ]
        if changes:
            t, before, after = changes[0]
            warnings.warn(
                f"{label}: rank of K changes {len(changes)} time(s), first at t={t:.6g} ({after} -> {before} backward)",
                SingularBlockWarning,
            )
        meta.update(rank_changes=changes, min_rank=int(ranks.min()), max_rank=int(ranks.max()))
    return MatrixPath(grid, values[:, 1], True, label, epsilon=float(epsilon), meta=meta)


def gain_path(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, pinv_rtol: float = None, exact_inverse=False) -> MatrixPath:
    """Theta = -K^+ L on the grid of p2, with K built from R + p2.epsilon I"""
    grid = p2.grid
    _check_grid(spec, grid, p1)
    system = RiccatiSystem(spec, p2.epsilon, pinv_rtol, exact_inverse)
    values = [system.gain(system.coefficients(float(t)), p1.values[i], p2.values[i]) for i, t in enumerate(grid.t)]
    return MatrixPath(grid, np.stack(values), False, "theta", epsilon=p2.epsilon)


def solve_lyapunov_pair(
    spec: ProblemSpec,
    theta: Callable[[float], np.ndarray],
    grid: TimeGrid,
    epsilon: float = 0.0,
    closed_loop_first=False,
    cap=BLOWUP_CAP,
    tol=RK_TOL,
    max_substeps=MAX_SUBSTEPS,
) -> tuple[MatrixPath, MatrixPath]:
    """Cost matrices of the feedback x_hat -> Theta x_hat.

    With At = A + B Theta and Ck_t = Ck + Dk Theta:
        P2t' + P2t At + At'P2t + C1_t'P1t C1_t + C2_t'P2t C2_t + Theta'R Theta + S'Theta + Theta'S + Q = 0
    and P1t solves the P1 equation (the estimation error x - x_hat does not feel Theta). With
    `closed_loop_first` P1t uses At, C1_t, C2_t instead. Both end at G; R includes epsilon I.
    """
    _check_grid(spec, grid)
    n, m = spec.n, spec.m
    system = RiccatiSystem(spec, float(epsilon))
    if tuple(np.shape(theta(grid.t0))) != (m, n):
        raise ValueError(f"Invalid theta shape {np.shape(theta(grid.t0))}, expected {(m, n)}")

    def rhs(t, y):
        c = system.coefficients(t)
        P1, P2 = y.reshape(2, n, n)
        th = np.asarray(theta(t), dtype=np.float64)
        A_cl, C1_cl, C2_cl = c.A + c.B @ th, c.C1 + c.D1 @ th, c.C2 + c.D2 @ th
        if closed_loop_first:
            d1 = symmetrize(A_cl.T @ P1 + P1 @ A_cl + C1_cl.T @ P1 @ C1_cl + C2_cl.T @ P1 @ C2_cl + c.Q)
        else:
            d1 = system.p1_drift(c, P1)
        St = c.S.T @ th
        d2 = P2 @ A_cl + A_cl.T @ P2 + C1_cl.T @ P1 @ C1_cl + C2_cl.T @ P2 @ C2_cl + th.T @ c.R @ th + St + St.T + c.Q
        return -np.concatenate([d1.ravel(), symmetrize(d2).ravel()]), None

    rk = BackwardRK4(grid, cap=cap, tol=tol, max_substeps=max_substeps, project=symmetric_projector(n, 2), label="P_tilde")
    values = rk.integrate(rhs, np.stack([spec.G, spec.G])).reshape(-1, 2, n, n)
    meta = {"closed_loop_first": bool(closed_loop_first)}
    return (
        MatrixPath(grid, values[:, 0], True, "P1_tilde", epsilon=float(epsilon), meta=meta),
        MatrixPath(grid, values[:, 1], True, "P2_tilde", epsilon=float(epsilon), meta=meta),
    )


class Positivity(NamedTuple):
    gamma_hat: float
    ok: bool


def check_uniform_positivity(spec: ProblemSpec, p1: MatrixPath, p2: MatrixPath, grid: TimeGrid) -> Positivity:
    """min over the grid of the smallest eigenvalue of R + p2.epsilon I + D1'P1 D1 + D2'P2 D2"""
    _check_grid(spec, grid, p1, p2)
    system = RiccatiSystem(spec, p2.epsilon)
    gamma_hat = min(
        min_eigenvalue(system.block(system.coefficients(float(t)), p1.values[i], p2.values[i])[0])
        for i, t in enumerate(grid.t)
    )
    return Positivity(gamma_hat, gamma_hat > 0)


def ode_residual(spec: ProblemSpec, path: MatrixPath, p1: MatrixPath = None, pinv_rtol: float = None, exact_inverse=False) -> np.ndarray:
    """(N-1,) max-abs residual of the P1 equation (p1 None) or the P2 equation at interior grid points,
    derivative by central differences."""
    grid = path.grid
    system = RiccatiSystem(spec, path.epsilon, pinv_rtol, exact_inverse)
    out = np.empty(grid.n_steps - 1)
    for i in range(1, grid.n_steps):
        c = system.coefficients(float(grid.t[i]))
        dP = (path.values[i + 1] - path.values[i - 1]) / (2.0 * grid.h)
        if p1 is None:
            drift = system.p1_drift(c, path.values[i])
        else:
            drift, _ = system.p2_drift(c, p1.values[i], path.values[i])
        out[i - 1] = np.max(np.abs(dP + drift))
    return out
