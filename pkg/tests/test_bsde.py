import math

import numpy as np
import pytest
import torch

from bsde import (
    Basis,
    IllConditionedRegression,
    NotDeterministicError,
    default_basis,
    regress,
    separable_groups,
    solve_bsde_deterministic,
    solve_bsde_lsmc,
)
from model import CoefficientProcess, ExpFactor, ProblemSpec, TimeGrid, builtin_scenario
from riccati import gain_path, solve_p1, solve_p2
from simulate import sample_ensemble


def _riccati(spec, grid, eps=0.0, exact_inverse=True):
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, eps, exact_inverse=exact_inverse)
    return p1, p2, gain_path(spec, p1, p2, exact_inverse=exact_inverse)


@pytest.mark.parametrize("eps", [1.0, 0.1])
def test_section5_alpha_closed_form(eps):
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 500)
    p1, p2, theta = _riccati(spec, grid, eps)
    sol = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    # sigma1 = 1 forms the deterministic group, which stays at zero since C1 = D1 = 0
    assert sol.exponents == ((0.0, 0.0), (math.sqrt(2.0), -2.0))
    np.testing.assert_array_equal(sol.alpha[:, 0, 0], 0.0)
    # alpha = abar(t) exp(sqrt2 W2 - 2t), abar = 2 eps sqrt(1-t) / (eps + 1 - t)
    exact = 2.0 * eps * np.sqrt(1.0 - grid.t) / (eps + 1.0 - grid.t)
    assert np.max(np.abs(sol.alpha[:, 1, 0] - exact)) <= 1e-6
    np.testing.assert_allclose(sol.beta[:, 1, 0], math.sqrt(2.0) * sol.alpha[:, 1, 0])
    assert sol.alpha[-1, 1, 0] == 0.0
    at_zero = sol.alpha_at(250, np.zeros(1))[0, 0]
    assert at_zero == pytest.approx(exact[250] * math.exp(-1.0), rel=1e-6)


def test_constant_terminal_closed_form():
    a, g0 = -0.4, 1.5
    spec = ProblemSpec.build(1, 1, 1.0, A=a, R=1.0, g=g0)
    grid = TimeGrid(0.0, 1.0, 100)
    p1, p2, theta = _riccati(spec, grid)
    np.testing.assert_array_equal(theta.values, 0.0)
    sol = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    assert sol.is_deterministic
    np.testing.assert_allclose(sol.alpha[:, 0, 0], g0 * np.exp(a * (1.0 - grid.t)), rtol=1e-10)


def test_running_q_closed_form():
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, q=1.0)
    grid = TimeGrid(0.0, 1.0, 100)
    p1, p2, theta = _riccati(spec, grid)
    sol = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    np.testing.assert_allclose(sol.alpha[:, 0, 0], 1.0 - grid.t, atol=1e-12)


def test_separable_groups():
    spec = builtin_scenario("psd_scalar")
    groups = separable_groups(spec)
    assert [g.exponent for g in groups] == [(0.0, 0.0)]
    assert set(groups[0].terms) == {"b", "sigma1", "sigma2", "q"}
    np.testing.assert_array_equal(groups[0].terminal, [0.5])

    homogeneous = separable_groups(spec.homogeneous())
    assert len(homogeneous) == 1 and not homogeneous[0].terms


def test_non_separable_data_needs_lsmc():
    b = CoefficientProcess.markov(lambda t, w: np.sin(w)[:, None], (1,))
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, G=1.0, b=b)
    with pytest.raises(NotDeterministicError):
        separable_groups(spec)
    grid = TimeGrid(0.0, 1.0, 20)
    p1, p2, theta = _riccati(spec, grid)
    with pytest.raises(NotDeterministicError):
        solve_bsde_deterministic(spec, p1, p2, theta, grid)


def test_lsmc_matches_ode_on_deterministic_data():
    spec = builtin_scenario("psd_scalar", {"C2": 0.0})
    grid = TimeGrid(0.0, 1.0, 50)
    p1, p2, theta = _riccati(spec, grid)
    ode = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    ensemble = sample_ensemble(grid, 2000, seed=3)
    lsmc = solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble)
    assert lsmc.backend == "lsmc" and lsmc.meta["seed"] == 3
    np.testing.assert_array_equal(lsmc.alpha[:, -1, 0], 0.5)
    alpha0 = lsmc.alpha[:, 0, 0]
    assert np.ptp(alpha0) < 1e-12
    assert abs(alpha0[0] - ode.alpha[0, 0, 0]) <= 1e-3 * (1.0 + abs(ode.alpha[0, 0, 0]))


@pytest.mark.slow
def test_lsmc_matches_ode_on_section5():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 100)
    p1, p2, theta = _riccati(spec, grid, eps=0.5)
    ode = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    ensemble = sample_ensemble(grid, 10000, seed=11)
    lsmc = solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble, default_basis(spec))
    assert lsmc.basis_spec.startswith("exp(")
    i = 50
    exact = ode.alpha_at(i, ensemble.w2[:, i].numpy())[:, 0]
    error = np.sqrt(np.mean((lsmc.alpha[:, i, 0] - exact) ** 2))
    assert error <= 0.1 * np.sqrt(np.mean(exact**2))
    stderr = lsmc.meta["alpha_stderr"][0, 0]
    assert abs(lsmc.alpha[0, 0, 0] - ode.alpha[0, 0, 0]) <= 3.0 * stderr + 0.05 * abs(ode.alpha[0, 0, 0])


def test_lsmc_terminal_brownian_is_a_martingale():
    # g = W2(T) with no dynamics: alpha = W2, beta = 1
    g = CoefficientProcess.markov(lambda t, w: np.asarray(w, dtype=np.float64)[:, None], (1,))
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, g=g)
    grid = TimeGrid(0.0, 1.0, 20)
    p1, p2, theta = _riccati(spec, grid)
    ensemble = sample_ensemble(grid, 10000, seed=12)
    sol = solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble)
    w2 = ensemble.w2.numpy()
    np.testing.assert_array_equal(sol.alpha[:, -1, 0], w2[:, -1])
    assert np.sqrt(np.mean((sol.alpha[:, :, 0] - w2) ** 2)) <= 0.05
    assert abs(float(sol.beta[:, :-1, 0].mean()) - 1.0) <= 0.05
    assert np.max(sol.meta["residual_mean_z"]) <= 1e-6


@pytest.mark.slow
def test_lsmc_matches_ode_with_state_noise():
    g = CoefficientProcess.separable(lambda t: np.ones(1), ExpFactor(a=0.5, c=-0.125, T=1.0), (1,))
    spec = ProblemSpec.build(1, 1, 1.0, A=-0.5, B=1.0, C2=0.5, R=1.0, G=1.0, g=g)
    grid = TimeGrid(0.0, 1.0, 200)
    p1, p2, theta = _riccati(spec, grid)
    ode = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    ensemble = sample_ensemble(grid, 10000, seed=13)
    lsmc = solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble, default_basis(spec))
    expected = ode.alpha_at(0, np.zeros(1))[0, 0]
    stderr = lsmc.meta["alpha_stderr"][0, 0]
    assert abs(lsmc.alpha[0, 0, 0] - expected) <= 3.0 * stderr + 5e-3 * abs(expected)
    assert np.max(lsmc.meta["residual_mean_z"]) <= 1e-6


def test_regression_recovers_polynomial(rng):
    w = torch.from_numpy(rng.standard_normal(500))
    target = (1.0 + 2.0 * w - 0.5 * w**3)[:, None]
    phi = Basis(3).features(0.3, w)
    fitted = regress(phi, target, 0.3)
    assert torch.allclose(fitted, target, atol=1e-10)


def test_regression_ill_conditioned(rng):
    w = torch.from_numpy(rng.standard_normal(200))
    phi = torch.stack([w, w * (1.0 + 1e-9)], dim=1)
    with pytest.raises(IllConditionedRegression):
        regress(phi, w[:, None], 0.5)


def test_bsde_csv_layouts(tmp_path):
    spec = builtin_scenario("psd_scalar", {"C2": 0.0})
    grid = TimeGrid(0.0, 1.0, 10)
    p1, p2, theta = _riccati(spec, grid)
    ode = solve_bsde_deterministic(spec, p1, p2, theta, grid)
    ode.to_csv(str(tmp_path / "ode.csv"))
    assert (tmp_path / "ode.csv").read_text().split("\n")[0] == "t,alpha_0_0,beta_0_0"

    ensemble = sample_ensemble(grid, 50, seed=0)
    lsmc = solve_bsde_lsmc(spec, p1, p2, theta, grid, ensemble)
    lsmc.to_csv(str(tmp_path / "lsmc.csv"), n_paths=2)
    lines = (tmp_path / "lsmc.csv").read_text().strip().split("\n")
    assert lines[0] == "path_id,t,alpha_0,beta_0"
    assert len(lines) == 1 + 2 * len(grid)
