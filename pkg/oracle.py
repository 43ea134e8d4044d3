"""Exact finite-tree version of the problem.

Each step moves W1 and W2 by +-sqrt(h) with probability 1/4 per pair; scenario index = sum_i digit_i 4^i with
digit = (W1 up) + 2 (W2 up). Controls live on the nodes of the binary W2 subtree (2^i nodes at step i), so
the discrete cost is an explicit quadratic

    J(u; x0) = u'H u + 2 u'(Cx x0 + c0) + x0'K0 x0 + 2 k1'x0 + k00

assembled by forward propagation of the affine scenario maps x_i = M_i u + Psi_i x0 + psi_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
from einops import rearrange

from model import LQError, ProblemSpec
from util.linalg import min_eigenvalue, symmetrize

MAX_DEPTH = 7


class NotConvexError(LQError):
    def __init__(self, min_eig: float):
        self.min_eig = float(min_eig)
        super().__init__(f"tree Hessian is not positive definite (min eigenvalue {self.min_eig:.6e})")


class DepthOverflowError(LQError, ValueError):
    pass


def _flat(X: np.ndarray) -> np.ndarray:
    return rearrange(X, "s a j -> (s a) j")


@dataclass(frozen=True, eq=False)
class TreeModel:
    spec: ProblemSpec
    s: float
    T: float
    depth: int

    @property
    def h(self) -> float:
        return (self.T - self.s) / self.depth

    @property
    def n_scenarios(self) -> int:
        return 4**self.depth

    @property
    def n_nodes(self) -> int:
        return 2**self.depth - 1

    @property
    def n_controls(self) -> int:
        return self.n_nodes * self.spec.m

    @cached_property
    def times(self) -> np.ndarray:
        """(d+1,)"""
        t = self.s + self.h * np.arange(self.depth + 1, dtype=np.float64)
        t[-1] = self.T
        return t

    @cached_property
    def digits(self) -> np.ndarray:
        """(S, d) base-4 digit of step i"""
        return (np.arange(self.n_scenarios)[:, None] // 4 ** np.arange(self.depth)[None]) % 4

    @cached_property
    def increments(self) -> np.ndarray:
        """(S, d, 2) (dW1, dW2)"""
        sqrt_h = math.sqrt(self.h)
        up = np.stack([self.digits & 1, self.digits >> 1], axis=-1)
        return np.where(up == 1, sqrt_h, -sqrt_h)

    @cached_property
    def w2(self) -> np.ndarray:
        """(S, d+1) W2 levels, W2(s) = 0"""
        return np.concatenate([np.zeros((self.n_scenarios, 1)), np.cumsum(self.increments[..., 1], axis=1)], axis=1)

    @cached_property
    def node_index(self) -> np.ndarray:
        """(S, d) W2-node of each scenario at each step"""
        bits = self.digits >> 1
        out = np.empty_like(bits)
        for i in range(self.depth):
            out[:, i] = 2**i - 1 + (bits[:, :i] * 2 ** np.arange(i)[None]).sum(1)
        return out

    @cached_property
    def node_level(self) -> np.ndarray:
        """(n_nodes,) step of each node"""
        return np.concatenate([np.full(2**i, i) for i in range(self.depth)])

    @cached_property
    def node_keys(self) -> list[str]:
        """W2 histories over {u, d}, "root" for the root"""
        keys = []
        for i in range(self.depth):
            for k in range(2**i):
                keys.append("".join("u" if (k >> j) & 1 else "d" for j in range(i)) or "root")
        return keys

    @cached_property
    def node_weights(self) -> np.ndarray:
        """(n_controls,) h * P(node) per control coordinate"""
        return np.repeat(self.h * 0.5**self.node_level, self.spec.m)

    @cached_property
    def coefficients(self):
        return [self.spec.coefficients(float(t)) for t in self.times[:-1]]

    @cached_property
    def data(self) -> dict[str, np.ndarray]:
        """(S, d, dim) inhomogeneous data at the step times and g (S, n) at T"""
        out = {}
        for name, process in self.spec.processes.items():
            out[name] = np.stack(
                [process.batch(float(t), self.w2[:, i], self.w2[:, : i + 1]) for i, t in enumerate(self.times[:-1])],
                axis=1,
            )
        out["g"] = np.asarray(self.spec.g.batch(self.T, self.w2[:, -1], self.w2), dtype=np.float64)
        return out

    def step_maps(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Phi (S, n, n), Gamma (S, n, m) and the data shift (S, n) of x_{i+1} = Phi x_i + Gamma u_i + shift"""
        c = self.coefficients[i]
        dW1 = self.increments[:, i, 0][:, None, None]
        dW2 = self.increments[:, i, 1][:, None, None]
        Phi = np.eye(self.spec.n)[None] + c.A[None] * self.h + c.C1[None] * dW1 + c.C2[None] * dW2
        Gamma = c.B[None] * self.h + c.D1[None] * dW1 + c.D2[None] * dW2
        data = self.data
        shift = data["b"][:, i] * self.h + data["sigma1"][:, i] * dW1[:, 0] + data["sigma2"][:, i] * dW2[:, 0]
        return Phi, Gamma, shift


def build_tree(spec: ProblemSpec, s: float, T: float, depth: int) -> TreeModel:
    if int(depth) != depth or depth < 1:
        raise ValueError(f"Invalid depth: {depth}")
    if depth > MAX_DEPTH:
        raise DepthOverflowError(f"Invalid depth {depth}: at most {MAX_DEPTH} ({4**MAX_DEPTH} scenarios)")
    if abs(T - spec.T) > 1e-12 * max(1.0, abs(T)) or not s < T:
        raise ValueError(f"Invalid tree horizon [{s}, {T}] for T={spec.T}")
    return TreeModel(spec, float(s), float(T), int(depth))


class TreeQuadratic(NamedTuple):
    H: np.ndarray
    """(nc, nc)"""
    Cx: np.ndarray
    """(nc, n)"""
    c0: np.ndarray
    K0: np.ndarray
    k1: np.ndarray
    k00: float

    def linear(self, x0) -> np.ndarray:
        return self.Cx @ np.asarray(x0, dtype=np.float64) + self.c0

    def constant(self, x0) -> float:
        x0 = np.asarray(x0, dtype=np.float64)
        return float(x0 @ self.K0 @ x0 + 2.0 * self.k1 @ x0 + self.k00)

    def cost(self, u: np.ndarray, x0) -> float:
        u = np.asarray(u, dtype=np.float64).ravel()
        return float(u @ self.H @ u + 2.0 * u @ self.linear(x0) + self.constant(x0))


def _node_sum(X: np.ndarray, index: np.ndarray, n_nodes: int) -> np.ndarray:
    """Sum the scenario rows of X (S, a, ...) into their nodes -> (n_nodes * a, ...)"""
    out = np.zeros((n_nodes,) + X.shape[1:])
    np.add.at(out, index, X)
    return rearrange(out, "node a ... -> (node a) ...")


def assemble(tree: TreeModel) -> TreeQuadratic:
    spec, h, S = tree.spec, tree.h, tree.n_scenarios
    n, m, nc = spec.n, spec.m, tree.n_controls
    M = np.zeros((S, n, nc))
    Psi = np.broadcast_to(np.eye(n), (S, n, n)).copy()
    psi = np.zeros((S, n))
    H, Cx, c0 = np.zeros((nc, nc)), np.zeros((nc, n)), np.zeros(nc)
    K0, k1, k00 = np.zeros((n, n)), np.zeros(n), 0.0
    rows = np.arange(S)
    for i in range(tree.depth):
        c = tree.coefficients[i]
        idx = tree.node_index[:, i]
        q, rho = tree.data["q"][:, i], tree.data["rho"][:, i]
        QM = np.einsum("ab,sbj->saj", c.Q, M)
        SM = np.einsum("ab,sbj->saj", c.S, M)
        QPsi = np.einsum("ab,sbj->saj", c.Q, Psi)
        SPsi = np.einsum("ab,sbj->saj", c.S, Psi)
        ES = _node_sum(SM, idx, tree.n_nodes) / S
        H += h / S * (_flat(M).T @ _flat(QM)) + h * (ES + ES.T)
        for node in range(2**i - 1, 2 ** (i + 1) - 1):
            H[node * m : (node + 1) * m, node * m : (node + 1) * m] += h * 0.5**i * c.R
        Qpsi_q = psi @ c.Q + q
        Cx += h / S * (_flat(M).T @ _flat(QPsi)) + h / S * _node_sum(SPsi, idx, tree.n_nodes)
        c0 += h / S * np.einsum("sai,sa->i", M, Qpsi_q) + h / S * _node_sum(psi @ c.S.T + rho, idx, tree.n_nodes)
        K0 += h / S * (_flat(Psi).T @ _flat(QPsi))
        k1 += h / S * np.einsum("sai,sa->i", Psi, Qpsi_q)
        k00 += h * float(np.mean(np.einsum("sa,sa->s", psi, psi @ c.Q + 2.0 * q)))

        Phi, Gamma, shift = tree.step_maps(i)
        M = np.einsum("sab,sbj->saj", Phi, M)
        for k in range(m):
            M[rows, :, idx * m + k] += Gamma[:, :, k]
        Psi = np.einsum("sab,sbj->saj", Phi, Psi)
        psi = np.einsum("sab,sb->sa", Phi, psi) + shift

    G, g = spec.G, tree.data["g"]
    Ggpsi = psi @ G + g
    H += _flat(M).T @ _flat(np.einsum("ab,sbj->saj", G, M)) / S
    Cx += _flat(M).T @ _flat(np.einsum("ab,sbj->saj", G, Psi)) / S
    c0 += np.einsum("sai,sa->i", M, Ggpsi) / S
    K0 += _flat(Psi).T @ _flat(np.einsum("ab,sbj->saj", G, Psi)) / S
    k1 += np.einsum("sai,sa->i", Psi, Ggpsi) / S
    k00 += float(np.mean(np.einsum("sa,sa->s", psi, psi @ G + 2.0 * g)))
    return TreeQuadratic(symmetrize(H), Cx, c0, symmetrize(K0), k1, k00)


def _forward(tree: TreeModel, u: np.ndarray, x0, homogeneous=False) -> tuple[np.ndarray, np.ndarray]:
    """x (S, d+1, n) and scenario controls (S, d, m)"""
    spec = tree.spec
    u = np.asarray(u, dtype=np.float64).reshape(tree.n_nodes, spec.m)
    us = u[tree.node_index]
    x = np.empty((tree.n_scenarios, tree.depth + 1, spec.n))
    x[:, 0] = np.asarray(x0, dtype=np.float64).reshape(spec.n)[None]
    for i in range(tree.depth):
        Phi, Gamma, shift = tree.step_maps(i)
        x[:, i + 1] = np.einsum("sab,sb->sa", Phi, x[:, i]) + np.einsum("sab,sb->sa", Gamma, us[:, i])
        if not homogeneous:
            x[:, i + 1] += shift
    return x, us


def scenario_costs(tree: TreeModel, u: np.ndarray, x0, homogeneous=False) -> np.ndarray:
    """(S,) discrete cost of each scenario by direct forward simulation"""
    x, us = _forward(tree, u, x0, homogeneous)
    h = tree.h
    cost = np.zeros(tree.n_scenarios)
    for i in range(tree.depth):
        c = tree.coefficients[i]
        xi, ui = x[:, i], us[:, i]
        cost += h * (
            np.einsum("sa,ab,sb->s", xi, c.Q, xi) + 2.0 * np.einsum("sa,ab,sb->s", ui, c.S, xi)
            + np.einsum("sa,ab,sb->s", ui, c.R, ui)
        )
        if not homogeneous:
            cost += 2.0 * h * (np.einsum("sa,sa->s", tree.data["q"][:, i], xi) + np.einsum("sa,sa->s", tree.data["rho"][:, i], ui))
    xT = x[:, -1]
    cost += np.einsum("sa,ab,sb->s", xT, tree.spec.G, xT)
    if not homogeneous:
        cost += 2.0 * np.einsum("sa,sa->s", tree.data["g"], xT)
    return cost


def tree_cost(tree: TreeModel, u: np.ndarray, x0, homogeneous=False) -> float:
    return math.fsum(scenario_costs(tree, u, x0, homogeneous)) / tree.n_scenarios


class TreeSolution(NamedTuple):
    controls: np.ndarray
    """(n_nodes, m)"""
    value: float
    hessian_min_eig: float


def tree_exact_optimal(tree: TreeModel, x0, quadratic: TreeQuadratic = None) -> TreeSolution:
    quadratic = quadratic or assemble(tree)
    min_eig = min_eigenvalue(quadratic.H)
    if min_eig <= 0:
        raise NotConvexError(min_eig)
    lin = quadratic.linear(x0)
    u = scipy.linalg.solve(quadratic.H, -lin, assume_a="pos")
    value = quadratic.constant(x0) + float(lin @ u)
    return TreeSolution(u.reshape(tree.n_nodes, tree.spec.m), value, min_eig)


def tree_gradient(tree: TreeModel, u: np.ndarray, x0, quadratic: TreeQuadratic = None) -> np.ndarray:
    """(n_nodes, m) exact gradient 2 (H u + c)"""
    quadratic = quadratic or assemble(tree)
    u = np.asarray(u, dtype=np.float64).ravel()
    return (2.0 * (quadratic.H @ u + quadratic.linear(x0))).reshape(tree.n_nodes, tree.spec.m)


def _level(X: np.ndarray, i: int) -> np.ndarray:
    """Rows of the F-nodes at step i: scenarios whose digits from step i on are all zero"""
    return X[: 4**i]


def adjoint_gradient(tree: TreeModel, u: np.ndarray, x0) -> np.ndarray:
    """(n_nodes, m) gradient through the discrete adjoint (Y, Z1, Z2):

        Y_d = G x_d + g
        Zk_i = E_i[Y_{i+1} dWk_i] / h
        Y_i = E_i[Y_{i+1}] + h (A'E_i[Y_{i+1}] + C1'Z1_i + C2'Z2_i + Q x_i + S'u_i + q_i)
        dJ/du(node) = 2 h sum_{F-nodes in node} 4^-i (B'E_i[Y_{i+1}] + D1'Z1_i + D2'Z2_i + S x_i + R u_i + rho_i)
    """
    spec, h = tree.spec, tree.h
    x, us = _forward(tree, u, x0)
    grad = np.zeros((tree.n_nodes, spec.m))
    Y = x[:, -1] @ spec.G + tree.data["g"]
    for i in range(tree.depth - 1, -1, -1):
        c = tree.coefficients[i]
        Y_next = rearrange(_level(Y, i + 1), "(d l) n -> d l n", d=4)
        dW = rearrange(_level(tree.increments[:, i], i + 1), "(d l) k -> d l k", d=4)
        EY = Y_next.mean(0)
        Z1 = (Y_next * dW[..., 0:1]).mean(0) / h
        Z2 = (Y_next * dW[..., 1:2]).mean(0) / h
        xi, ui = _level(x[:, i], i), _level(us[:, i], i)
        q, rho = _level(tree.data["q"][:, i], i), _level(tree.data["rho"][:, i], i)
        local = EY @ c.B + Z1 @ c.D1 + Z2 @ c.D2 + xi @ c.S.T + ui @ c.R + rho
        np.add.at(grad, _level(tree.node_index[:, i], i), 2.0 * h * 0.25**i * local)
        Y = EY + h * (EY @ c.A + Z1 @ c.C1 + Z2 @ c.C2 + xi @ c.Q + ui @ c.S + q)
    return grad


def verify_expansion(tree: TreeModel, u: np.ndarray, v: np.ndarray, lam: float, x0) -> float:
    """|J(u + lam v) - J(u) - lam^2 J0(0; v) - lam <DJ(u), v>| with costs by enumeration and the
    gradient through the adjoint recursion."""
    u = np.asarray(u, dtype=np.float64).reshape(tree.n_nodes, tree.spec.m)
    v = np.asarray(v, dtype=np.float64).reshape(tree.n_nodes, tree.spec.m)
    J_u = tree_cost(tree, u, x0)
    J_uv = tree_cost(tree, u + lam * v, x0)
    J0_v = tree_cost(tree, v, np.zeros(tree.spec.n), homogeneous=True)
    directional = float(np.sum(adjoint_gradient(tree, u, x0) * v))
    return abs(J_uv - J_u - lam**2 * J0_v - lam * directional)


def estimate_gamma(tree: TreeModel, quadratic: TreeQuadratic = None) -> float:
    """Largest gamma with J0(u) >= gamma E sum h |u|^2 on the tree: smallest generalized eigenvalue of (H, W),
    W = diag(h P(node))."""
    quadratic = quadratic or assemble(tree)
    W = np.diag(tree.node_weights)
    return float(scipy.linalg.eigh(quadratic.H, W, eigvals_only=True, subset_by_index=[0, 0])[0])


def tree_value_matrix(tree: TreeModel, quadratic: TreeQuadratic = None) -> np.ndarray:
    """Pi with V0(s, x0) = x0'Pi x0 on the homogeneous tree"""
    quadratic = quadratic or assemble(tree)
    min_eig = min_eigenvalue(quadratic.H)
    if min_eig <= 0:
        raise NotConvexError(min_eig)
    Pi = quadratic.K0 - quadratic.Cx.T @ scipy.linalg.solve(quadratic.H, quadratic.Cx, assume_a="pos")
    return symmetrize(Pi)


class PerturbedValue(NamedTuple):
    epsilon: float
    value: float
    control_norm: float
    """E sum h |u_eps|^2"""


def perturbed_values(tree: TreeModel, x0, epsilons, quadratic: TreeQuadratic = None) -> list[PerturbedValue]:
    """Exact values with R replaced by R + eps I (eps = 0 allowed)."""
    quadratic = quadratic or assemble(tree)
    W = tree.node_weights
    lin, const = quadratic.linear(x0), quadratic.constant(x0)
    out = []
    for eps in epsilons:
        H_eps = quadratic.H + eps * np.diag(W)
        min_eig = min_eigenvalue(H_eps)
        if min_eig <= 0:
            raise NotConvexError(min_eig)
        u = scipy.linalg.solve(H_eps, -lin, assume_a="pos")
        out.append(PerturbedValue(float(eps), const + float(lin @ u), float(np.sum(W * u**2))))
    return out


class LyapunovGap(NamedTuple):
    enumerated: float
    represented: float
    gap: float


def lyapunov_representation_gap(
    tree: TreeModel,
    theta: Callable[[float], np.ndarray],
    v: np.ndarray,
    x0,
    p1_tilde: Callable[[float], np.ndarray],
    p2_tilde: Callable[[float], np.ndarray],
) -> LyapunovGap:
    """J0(s, x0; Theta x_hat + v) by enumeration against x0'P2t(s)x0 + E sum h [v'Kt v + 2 v'Lt x_hat],
    Kt = R + D1'P1t D1 + D2'P2t D2, Lt = B'P2t + D1'P1t C1 + D2'P2t C2 + S + Kt Theta."""
    spec, h = tree.spec, tree.h
    n, m = spec.n, spec.m
    v = np.asarray(v, dtype=np.float64).reshape(tree.n_nodes, m)
    vs = v[tree.node_index]
    x0 = np.asarray(x0, dtype=np.float64).reshape(n)
    S = tree.n_scenarios
    x = np.broadcast_to(x0, (S, n)).copy()
    xhat = x.copy()
    cost = np.zeros(S)
    represented = np.zeros(S)
    for i, t in enumerate(tree.times[:-1]):
        t = float(t)
        c = tree.coefficients[i]
        th = np.asarray(theta(t), dtype=np.float64)
        P1t, P2t = np.asarray(p1_tilde(t)), np.asarray(p2_tilde(t))
        ui = xhat @ th.T + vs[:, i]
        cost += h * (
            np.einsum("sa,ab,sb->s", x, c.Q, x) + 2.0 * np.einsum("sa,ab,sb->s", ui, c.S, x)
            + np.einsum("sa,ab,sb->s", ui, c.R, ui)
        )
        Kt = c.R + c.D1.T @ P1t @ c.D1 + c.D2.T @ P2t @ c.D2
        Lt = c.B.T @ P2t + c.D1.T @ P1t @ c.C1 + c.D2.T @ P2t @ c.C2 + c.S + Kt @ th
        vi = vs[:, i]
        represented += h * (np.einsum("sa,ab,sb->s", vi, Kt, vi) + 2.0 * np.einsum("sa,ab,sb->s", vi, Lt, xhat))

        Phi, Gamma, _ = tree.step_maps(i)
        dW2 = tree.increments[:, i, 1][:, None]
        x = np.einsum("sab,sb->sa", Phi, x) + np.einsum("sab,sb->sa", Gamma, ui)
        xhat = xhat + (xhat @ c.A.T + ui @ c.B.T) * h + (xhat @ c.C2.T + ui @ c.D2.T) * dW2
    cost += np.einsum("sa,ab,sb->s", x, spec.G, x)
    enumerated = math.fsum(cost) / S
    represented_value = float(x0 @ np.asarray(p2_tilde(tree.s)) @ x0) + math.fsum(represented) / S
    return LyapunovGap(enumerated, represented_value, enumerated - represented_value)


def tree_report(tree: TreeModel, solution: TreeSolution, gamma_d: float = None) -> dict:
    report = {
        "depth": tree.depth,
        "h": tree.h,
        "value": solution.value,
        "hessian_min_eig": solution.hessian_min_eig,
        "controls": {key: u.tolist() for key, u in zip(tree.node_keys, solution.controls)},
    }
    if gamma_d is not None:
        report["gamma_d"] = gamma_d
    return report
