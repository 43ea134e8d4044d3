"""Problem data of the partially observed linear-quadratic control problem.

State:   dx = (A x + B u + b) dt + (C1 x + D1 u + sigma1) dW1 + (C2 x + D2 u + sigma2) dW2
Cost:    E[ x(T)'G x(T) + 2 g'x(T) + int_s^T ( x'Q x + 2 u'S x + u'R u + 2 q'x + 2 rho'u ) dt ]
Controls are adapted to the filtration of W2 only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from types import MappingProxyType
from typing import Callable, Literal, Mapping, NamedTuple

import numpy as np

from util.linalg import asymmetry, min_eigenvalue

MatrixFn = Callable[[float], np.ndarray]
BOUND_CAP = 1e10
SYMMETRY_TOL = 1e-12


class LQError(Exception):
    """Base class of the solver's domain errors."""


class UnknownScenarioError(LQError, KeyError):
    pass


class AssumptionError(LQError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(map(str, self.diagnostics[:5])) or "assumption check failed")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.T)) or self.t0 >= self.T:
            raise ValueError(f"Invalid horizon: [{self.t0}, {self.T}]")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"Invalid n_steps: {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @cached_property
    def t(self) -> np.ndarray:
        """(N+1,) grid points, last one exactly T"""
        t = self.t0 + self.h * np.arange(self.n_steps + 1, dtype=np.float64)
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def __len__(self):
        return self.n_steps + 1

    def index_of(self, t: float, tol=1e-9) -> int:
        i = int(round((t - self.t0) / self.h))
        if not 0 <= i <= self.n_steps or abs(self.t[i] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"Invalid time {t} (not a point of {self})")
        return i

    def last_index_before(self, t_prime: float) -> int:
        """Number of left endpoints t_i < t_prime, i.e. steps fully inside [t0, t_prime]."""
        return int(np.searchsorted(self.t, t_prime - 1e-12 * max(1.0, abs(t_prime)), side="left"))

    def stride_to(self, other: TimeGrid) -> int | None:
        """k if every point of `other` is every k-th point of this grid, else None."""
        if other.t0 != self.t0 or other.T != self.T or self.n_steps % other.n_steps:
            return None
        return self.n_steps // other.n_steps

    def refine(self, factor: int) -> TimeGrid:
        return TimeGrid(self.t0, self.T, self.n_steps * factor)


@dataclass(frozen=True)
class ExpFactor:
    """Separable W2 dependence: value(t, w) = base(t) * (T - t)^(-kappa) * exp(a*w + c*t).

    With kappa > 0 the value is defined as 0 at t = T.
    """

    a: float
    c: float
    T: float
    kappa: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError(f"Invalid singular exponent (need 0 <= kappa < 1): {self.kappa}")

    def weight(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kappa == 0.0:
            return np.ones_like(t)
        gap = np.where(t < self.T, self.T - t, 1.0)
        return np.where(t < self.T, gap ** (-self.kappa), 0.0)

    def z(self, t, w) -> np.ndarray:
        return np.exp(self.a * np.asarray(w, dtype=np.float64) + self.c * np.asarray(t, dtype=np.float64))

    def mean(self, t, t0=0.0):
        """E[Z(t)] with W2(t0) = 0"""
        return np.exp(self.c * np.asarray(t) + 0.5 * self.a**2 * (np.asarray(t) - t0))

    def second_moment(self, t, t0=0.0):
        """E[Z(t)^2] with W2(t0) = 0"""
        return np.exp(2.0 * self.c * np.asarray(t) + 2.0 * self.a**2 * (np.asarray(t) - t0))

    def step_weight(self, t_left: float, t_right: float) -> float:
        """Exact integral of the singular weight over [t_left, t_right]."""
        if self.kappa == 0.0:
            return t_right - t_left
        p = 1.0 - self.kappa
        return ((self.T - t_left) ** p - max(self.T - t_right, 0.0) ** p) / p

    def same_exponential(self, other: ExpFactor) -> bool:
        return self.a == other.a and self.c == other.c


Kind = Literal["deterministic", "markov_w2", "path_functional"]


@dataclass(frozen=True, eq=False)
class CoefficientProcess:
    """A G-adapted datum (b, sigma1, sigma2, q, rho or g).

    Batched evaluation signatures of `fn`:
      deterministic:   fn(t) -> shape
      markov_w2:       fn(t, w) -> (K, *shape), w the W2 levels (K,)
      path_functional: fn(t, path) -> (K, *shape), path the W2 levels up to t (K, i+1)
    """

    kind: Kind
    shape: tuple[int, ...]
    fn: Callable
    base: MatrixFn | None = None
    factor: ExpFactor | None = None
    is_zero: bool = False

    @classmethod
    def zero(cls, shape) -> CoefficientProcess:
        shape = tuple(shape)
        value = np.zeros(shape)
        value.setflags(write=False)
        return cls("deterministic", shape, lambda t: value, base=lambda t: value, is_zero=True)

    @classmethod
    def constant(cls, value) -> CoefficientProcess:
        value = np.array(value, dtype=np.float64, ndmin=1)
        value.setflags(write=False)

        def fn(t):
            return value

        return cls("deterministic", value.shape, fn, base=fn, is_zero=not np.any(value))

    @classmethod
    def deterministic(cls, fn: MatrixFn, shape) -> CoefficientProcess:
        return cls("deterministic", tuple(shape), fn, base=fn)

    @classmethod
    def markov(cls, fn: Callable, shape) -> CoefficientProcess:
        return cls("markov_w2", tuple(shape), fn)

    @classmethod
    def separable(cls, base: MatrixFn, factor: ExpFactor, shape) -> CoefficientProcess:
        shape = tuple(shape)

        def fn(t, w):
            w = np.asarray(w, dtype=np.float64)
            scale = factor.weight(t) * factor.z(t, w)
            return np.asarray(base(t), dtype=np.float64)[None] * scale.reshape(scale.shape + (1,) * len(shape))

        return cls("markov_w2", shape, fn, base=base, factor=factor)

    @classmethod
    def path_functional(cls, fn: Callable, shape) -> CoefficientProcess:
        return cls("path_functional", tuple(shape), fn)

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "deterministic"

    @property
    def is_separable(self) -> bool:
        return self.is_deterministic or self.factor is not None

    def batch(self, t: float, w: np.ndarray, path: np.ndarray = None) -> np.ndarray:
        """(K, *shape) values at time t for the W2 levels `w` (K,)"""
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        if self.kind == "deterministic":
            value = np.asarray(self.fn(t), dtype=np.float64)
            return np.broadcast_to(value, (w.shape[0],) + value.shape)
        if self.kind == "markov_w2":
            return np.asarray(self.fn(t, w), dtype=np.float64)
        if self.kind == "path_functional":
            if path is None:
                raise ValueError("Invalid call: path functional needs the W2 path prefix")
            return np.asarray(self.fn(t, np.atleast_2d(path)), dtype=np.float64)
        raise NotImplementedError(f"{self.kind=}")

    def at(self, t: float, w: float = 0.0, path: np.ndarray = None) -> np.ndarray:
        return self.batch(t, np.array([w]), None if path is None else np.atleast_2d(path))[0]


class Coefficients(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C1: np.ndarray
    D1: np.ndarray
    C2: np.ndarray
    D2: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray


MATRIX_FIELDS = ("A", "B", "C1", "D1", "C2", "D2", "Q", "S", "R")
PROCESS_FIELDS = ("b", "sigma1", "sigma2", "q", "rho")


def _const(value: np.ndarray) -> MatrixFn:
    value = np.array(value, dtype=np.float64)
    value.setflags(write=False)
    return lambda t: value


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    n: int
    m: int
    T: float
    A: MatrixFn
    B: MatrixFn
    C1: MatrixFn
    D1: MatrixFn
    C2: MatrixFn
    D2: MatrixFn
    Q: MatrixFn
    S: MatrixFn
    R: MatrixFn
    G: np.ndarray
    b: CoefficientProcess
    sigma1: CoefficientProcess
    sigma2: CoefficientProcess
    q: CoefficientProcess
    rho: CoefficientProcess
    g: CoefficientProcess
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    x0: np.ndarray | None = None

    @classmethod
    def build(cls, n: int, m: int, T: float = 1.0, **kwargs) -> ProblemSpec:
        """Fill unspecified data with zeros; accept constants, callables or CoefficientProcess values."""
        shapes = {
            "A": (n, n), "B": (n, m), "C1": (n, n), "D1": (n, m), "C2": (n, n),
            "D2": (n, m), "Q": (n, n), "S": (m, n), "R": (m, m),
        }
        unknown = set(kwargs) - set(shapes) - set(PROCESS_FIELDS) - {"G", "g", "name", "params", "x0"}
        if unknown:
            raise ValueError(f"Invalid ProblemSpec fields: {sorted(unknown)}")
        data = {}
        for name, shape in shapes.items():
            value = kwargs.get(name)
            if value is None:
                data[name] = _const(np.zeros(shape))
            elif callable(value):
                data[name] = value
            else:
                value = np.asarray(value, dtype=np.float64)
                data[name] = _const(value.reshape(shape) if value.ndim < 2 and value.size == np.prod(shape) else value)
        G = kwargs.get("G")
        G = np.zeros((n, n)) if G is None else np.asarray(G, dtype=np.float64).reshape(n, n)
        G.setflags(write=False)
        for name in PROCESS_FIELDS + ("g",):
            dim = m if name == "rho" else n
            value = kwargs.get(name)
            if value is None:
                data[name] = CoefficientProcess.zero((dim,))
            elif isinstance(value, CoefficientProcess):
                data[name] = value
            elif callable(value):
                data[name] = CoefficientProcess.deterministic(value, (dim,))
            else:
                data[name] = CoefficientProcess.constant(np.asarray(value, dtype=np.float64).reshape(dim))
        x0 = kwargs.get("x0")
        return cls(
            n=n, m=m, T=float(T), G=G, **data,
            name=kwargs.get("name", "custom"),
            params=MappingProxyType(dict(kwargs.get("params") or {})),
            x0=None if x0 is None else np.asarray(x0, dtype=np.float64).reshape(n),
        )

    def coefficients(self, t: float) -> Coefficients:
        return Coefficients(*(np.asarray(getattr(self, name)(t), dtype=np.float64) for name in MATRIX_FIELDS))

    @property
    def processes(self) -> dict[str, CoefficientProcess]:
        return {name: getattr(self, name) for name in PROCESS_FIELDS}

    @property
    def is_homogeneous(self) -> bool:
        return all(p.is_zero for p in self.processes.values()) and self.g.is_zero

    @property
    def has_deterministic_data(self) -> bool:
        return all(p.is_deterministic for p in self.processes.values()) and self.g.is_deterministic

    @property
    def singular_exponent(self) -> float:
        kappas = [p.factor.kappa for p in list(self.processes.values()) + [self.g] if p.factor is not None]
        return max(kappas, default=0.0)

    def homogeneous(self) -> ProblemSpec:
        """Same matrices, all inhomogeneous data zero (the J0 problem)."""
        zeros = {name: CoefficientProcess.zero((self.m if name == "rho" else self.n,)) for name in PROCESS_FIELDS}
        return replace(self, **zeros, g=CoefficientProcess.zero((self.n,)), name=f"{self.name}/homogeneous")

    def perturbed(self, epsilon: float) -> ProblemSpec:
        """R replaced by R + epsilon I."""
        if epsilon == 0:
            return self
        R, eye = self.R, np.eye(self.m)
        return replace(self, R=lambda t: np.asarray(R(t), dtype=np.float64) + epsilon * eye, name=f"{self.name}/eps={epsilon:g}")

    def default_x0(self) -> np.ndarray:
        return np.zeros(self.n) if self.x0 is None else np.array(self.x0)


@dataclass(frozen=True)
class Diagnostic:
    field: str
    t: float | None
    message: str

    def __str__(self):
        where = "" if self.t is None else f" at t={self.t:.6g}"
        return f"{self.field}{where}: {self.message}"


def _check_value(name: str, value, shape, t, diagnostics: list[Diagnostic], symmetric=False) -> bool:
    value = np.asarray(value, dtype=np.float64)
    if value.shape != tuple(shape):
        diagnostics.append(Diagnostic(name, t, f"shape {value.shape} does not match expected {tuple(shape)}"))
        return False
    if not np.all(np.isfinite(value)):
        diagnostics.append(Diagnostic(name, t, "non-finite entries"))
        return True
    if value.size and np.max(np.abs(value)) > BOUND_CAP:
        diagnostics.append(Diagnostic(name, t, f"magnitude {np.max(np.abs(value)):.3e} exceeds bound {BOUND_CAP:.0e}"))
    if symmetric and asymmetry(value) > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(value)))):
        diagnostics.append(Diagnostic(name, t, f"not symmetric (asymmetry {asymmetry(value):.3e})"))
    return True


def validate_spec(spec: ProblemSpec, grid: TimeGrid) -> list[Diagnostic]:
    """Sample-scale check of dimensions, symmetry, finiteness and boundedness; empty list when all hold."""
    n, m = spec.n, spec.m
    diagnostics: list[Diagnostic] = []
    if n < 1 or m < 1:
        return [Diagnostic("n/m", None, f"invalid dimensions n={n}, m={m}")]
    if abs(grid.T - spec.T) > 1e-12 * max(1.0, abs(spec.T)):
        diagnostics.append(Diagnostic("grid", None, f"grid ends at {grid.T} but the horizon is T={spec.T}"))
    expected = {
        "A": (n, n), "B": (n, m), "C1": (n, n), "D1": (n, m), "C2": (n, n),
        "D2": (n, m), "Q": (n, n), "S": (m, n), "R": (m, m),
    }
    for name, shape in expected.items():
        for t in grid.t:
            try:
                value = getattr(spec, name)(float(t))
            except Exception as exc:
                diagnostics.append(Diagnostic(name, float(t), f"evaluation failed: {exc!r}"))
                break
            if not _check_value(name, value, shape, float(t), diagnostics, symmetric=name in ("Q", "R")):
                break
    _check_value("G", spec.G, (n, n), None, diagnostics, symmetric=True)

    for name, process in list(spec.processes.items()) + [("g", spec.g)]:
        dim = m if name == "rho" else n
        if process.shape != (dim,):
            diagnostics.append(Diagnostic(name, None, f"declared shape {process.shape} does not match expected ({dim},)"))
            continue
        times = [grid.T] if name == "g" else grid.t
        for i, t in enumerate(times):
            t = float(t)
            spread = 3.0 * math.sqrt(max(t - grid.t0, 0.0))
            w = np.array([0.0, -spread, spread])
            path = None
            if process.kind == "path_functional":
                steps = grid.n_steps if name == "g" else i
                path = np.linspace(0.0, 1.0, steps + 1)[None] * w[:, None]
            try:
                values = process.batch(t, w, path)
            except Exception as exc:
                diagnostics.append(Diagnostic(name, t, f"evaluation failed: {exc!r}"))
                break
            if values.shape != (3, dim):
                diagnostics.append(Diagnostic(name, t, f"shape {values.shape[1:]} does not match expected ({dim},)"))
                break
            if not np.all(np.isfinite(values)):
                diagnostics.append(Diagnostic(name, t, "non-finite values"))
    return diagnostics


def check_assumption_3(spec: ProblemSpec, grid: TimeGrid, tol=1e-10) -> list[Diagnostic]:
    """R >= delta I with delta > 0, G >= 0 and Q - S'R^-1 S >= 0 at every grid point."""
    diagnostics = []
    if min_eigenvalue(spec.G) < -tol:
        diagnostics.append(Diagnostic("G", None, f"not positive semidefinite (min eigenvalue {min_eigenvalue(spec.G):.3e})"))
    for t in grid.t:
        c = spec.coefficients(float(t))
        r_min = min_eigenvalue(c.R)
        if r_min <= tol:
            diagnostics.append(Diagnostic("R", float(t), f"not uniformly positive (min eigenvalue {r_min:.3e})"))
            continue
        schur = c.Q - c.S.T @ np.linalg.solve(c.R, c.S)
        s_min = min_eigenvalue(0.5 * (schur + schur.T))
        if s_min < -tol:
            diagnostics.append(Diagnostic("Q-S'R^-1S", float(t), f"not positive semidefinite (min eigenvalue {s_min:.3e})"))
    return diagnostics


def _take(params: Mapping, defaults: dict, scenario: str) -> dict:
    extra = set(params) - set(defaults)
    if extra:
        raise ValueError(f"Invalid params for scenario {scenario!r}: {sorted(extra)} (accepted: {sorted(defaults)})")
    return {**defaults, **params}


def _section5(params: Mapping) -> ProblemSpec:
    """Worked example: A=-1, B=1, sigma1=1, C2=sqrt(2), G=1, b = exp(sqrt(2) W2 - 2t) / sqrt(1 - t)."""
    p = _take(params, {"x0": 1.0}, "section5")
    T = 1.0
    b = CoefficientProcess.separable(
        base=_const(np.ones(1)),
        factor=ExpFactor(a=math.sqrt(2.0), c=-2.0, T=T, kappa=0.5),
        shape=(1,),
    )
    return ProblemSpec.build(
        1, 1, T, A=-1.0, B=1.0, C2=math.sqrt(2.0), G=1.0, b=b, sigma1=1.0,
        name="section5", params=p, x0=[p["x0"]],
    )


def _psd_scalar(params: Mapping) -> ProblemSpec:
    """Scalar convex problem: R = delta > 0, Q, G >= 0, deterministic inhomogeneous data."""
    p = _take(
        params,
        {"delta": 1.0, "A": 0.5, "B": 1.0, "C1": 0.3, "C2": 0.4, "Q": 1.0, "G": 1.0, "b": 0.2,
         "sigma1": 0.3, "sigma2": 0.1, "q": 0.1, "rho": 0.0, "g": 0.5, "T": 1.0, "x0": 1.0},
        "psd_scalar",
    )
    if p["delta"] <= 0:
        raise ValueError(f"Invalid delta for psd_scalar: {p['delta']}")
    return ProblemSpec.build(
        1, 1, p["T"], A=p["A"], B=p["B"], C1=p["C1"], C2=p["C2"], Q=p["Q"], R=p["delta"], G=p["G"],
        b=p["b"], sigma1=p["sigma1"], sigma2=p["sigma2"], q=p["q"], rho=p["rho"], g=p["g"],
        name="psd_scalar", params=p, x0=[p["x0"]],
    )


def _psd_random(params: Mapping) -> ProblemSpec:
    """Seeded random time-varying convex problem: G >= 0, Q - S'R^-1 S >= 0, R >= delta I."""
    p = _take(params, {"seed": 0, "n": 2, "m": 1, "delta": 0.5, "T": 1.0}, "psd_random")
    n, m, delta = int(p["n"]), int(p["m"]), float(p["delta"])
    if n < 1 or m < 1 or delta <= 0:
        raise ValueError(f"Invalid params for psd_random: {p}")
    rng = np.random.default_rng(int(p["seed"]))
    A0, A1 = 0.5 * rng.standard_normal((n, n)), 0.3 * rng.standard_normal((n, n))
    B = rng.standard_normal((n, m))
    C1, C2 = 0.3 * rng.standard_normal((n, n)), 0.3 * rng.standard_normal((n, n))
    D1, D2 = 0.2 * rng.standard_normal((n, m)), 0.2 * rng.standard_normal((n, m))
    L = 0.3 * rng.standard_normal((m, m))
    R = delta * np.eye(m) + L @ L.T
    S = 0.3 * rng.standard_normal((m, n))
    M = 0.5 * rng.standard_normal((n, n))
    Q = S.T @ np.linalg.solve(R, S) + M @ M.T
    N = 0.5 * rng.standard_normal((n, n))
    b0, s1, s2, q0 = (0.2 * rng.standard_normal(n) for _ in range(4))
    rho0 = 0.2 * rng.standard_normal(m)
    g0 = 0.3 * rng.standard_normal(n)
    x0 = rng.standard_normal(n)
    return ProblemSpec.build(
        n, m, p["T"],
        A=lambda t: A0 + t * A1, B=B, C1=C1, D1=D1, C2=C2, D2=D2,
        Q=0.5 * (Q + Q.T), S=S, R=0.5 * (R + R.T), G=0.5 * (N @ N.T + (N @ N.T).T),
        b=lambda t: b0 * math.cos(t), sigma1=s1, sigma2=lambda t: s2 * (1.0 + t), q=q0, rho=rho0, g=g0,
        name="psd_random", params=p, x0=x0,
    )


def _indefinite_unbounded(params: Mapping) -> ProblemSpec:
    """Scalar problem with R = -1, Q = G = 0: the cost is unbounded below."""
    p = _take(params, {"A": 0.0, "T": 1.0, "x0": 1.0}, "indefinite_unbounded")
    return ProblemSpec.build(1, 1, p["T"], A=p["A"], B=1.0, R=-1.0, name="indefinite_unbounded", params=p, x0=[p["x0"]])


SCENARIOS = MappingProxyType(
    {
        "section5": _section5,
        "psd_scalar": _psd_scalar,
        "psd_random": _psd_random,
        "indefinite_unbounded": _indefinite_unbounded,
    }
)


def builtin_scenario(name: str, params: Mapping = None) -> ProblemSpec:
    if name not in SCENARIOS:
        raise UnknownScenarioError(f"Unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](dict(params or {}))


def describe_scenarios() -> list[tuple[str, str]]:
    return [(name, (builder.__doc__ or "").strip().splitlines()[0]) for name, builder in SCENARIOS.items()]
