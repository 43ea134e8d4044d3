import math

import numpy as np
import pytest

from model import ProblemSpec, TimeGrid, builtin_scenario
from riccati import (
    BlowUpError,
    MatrixPath,
    check_uniform_positivity,
    gain_path,
    ode_residual,
    solve_lyapunov_pair,
    solve_p1,
    solve_p2,
)


@pytest.fixture(scope="module")
def section5():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 2000)
    return spec, grid, solve_p1(spec, grid)


def test_section5_p1_is_constant(section5):
    spec, grid, p1 = section5
    np.testing.assert_allclose(p1.values[:, 0, 0], 1.0, atol=1e-12)


@pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
def test_section5_perturbed_p2_closed_form(section5, eps):
    spec, grid, p1 = section5
    p2 = solve_p2(spec, p1, grid, eps)
    exact = eps / (eps + 1.0 - grid.t)
    assert np.max(np.abs(p2.values[:, 0, 0] - exact)) <= 1e-8
    theta = gain_path(spec, p1, p2)
    assert np.max(np.abs(theta.values[:, 0, 0] + 1.0 / (eps + 1.0 - grid.t))) <= 1e-6 / eps


def test_section5_unperturbed_uses_pseudoinverse(section5):
    spec, grid, p1 = section5
    p2 = solve_p2(spec, p1, grid)
    # K = 0 on the whole horizon: K^+ = 0, no feedback and P2 stays at G
    np.testing.assert_allclose(p2.values[:, 0, 0], 1.0, atol=1e-12)
    assert p2.meta["max_rank"] == 0
    np.testing.assert_array_equal(gain_path(spec, p1, p2).values, 0.0)


@pytest.mark.parametrize("n_steps", [1000, 2000])
@pytest.mark.parametrize("eps", [2.0**-15, 2.0**-20])
def test_section5_small_eps_closed_form(n_steps, eps):
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, n_steps)
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, eps)
    exact = eps / (eps + 1.0 - grid.t)
    assert np.all(np.isfinite(p2.values))
    assert np.max(np.abs(p2.values[:, 0, 0] / exact - 1.0)) <= 1e-6
    theta = gain_path(spec, p1, p2)
    assert np.max(np.abs(theta.values[:, 0, 0] * (eps + 1.0 - grid.t) + 1.0)) <= 1e-6


def test_section5_p2_increases_with_eps(section5):
    spec, grid, p1 = section5
    paths = [solve_p2(spec, p1, grid, eps).values[:, 0, 0] for eps in (2.0**-10, 0.01, 0.1, 1.0)]
    for lower, upper in zip(paths, paths[1:]):
        assert np.all(lower[:-1] < upper[:-1])
        assert lower[-1] == upper[-1] == 1.0


def test_scalar_p1_closed_form():
    a, g0 = 0.3, 2.0
    spec = ProblemSpec.build(1, 1, 1.0, A=a, G=g0)
    grid = TimeGrid(0.0, 1.0, 50)
    p1 = solve_p1(spec, grid)
    np.testing.assert_allclose(p1.values[:, 0, 0], g0 * np.exp(2 * a * (1.0 - grid.t)), rtol=1e-10)


@pytest.mark.parametrize("name", ["section5", "psd_scalar", "psd_random"])
def test_symmetry_and_terminal(name):
    spec = builtin_scenario(name)
    grid = TimeGrid(0.0, spec.T, 100)
    p1 = solve_p1(spec, grid)
    for eps in (0.0, 0.5):
        p2 = solve_p2(spec, p1, grid, eps, exact_inverse=name != "section5")
        for path in (p1, p2):
            np.testing.assert_array_equal(path.terminal, spec.G)
            np.testing.assert_array_equal(path.values, path.values.swapaxes(-1, -2))


def test_p2_equals_p1_without_control_channels():
    base = builtin_scenario("psd_random", {"seed": 5, "n": 3, "m": 2})
    spec = ProblemSpec.build(
        3, 2, 1.0, A=base.A, C1=base.C1, C2=base.C2, Q=base.Q, R=base.R, G=base.G,
    )
    grid = TimeGrid(0.0, 1.0, 100)
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, exact_inverse=True)
    assert np.max(np.abs(p2.values - p1.values)) <= 1e-8


def test_residual_small_on_psd_random():
    spec = builtin_scenario("psd_random", {"seed": 1})
    grid = TimeGrid(0.0, 1.0, 400)
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, exact_inverse=True)
    assert np.max(ode_residual(spec, p1)) < 1e-4
    assert np.max(ode_residual(spec, p2, p1, exact_inverse=True)) < 1e-4


def test_residual_is_second_order_in_the_step():
    spec = builtin_scenario("psd_random", {"seed": 1})
    residuals = []
    for n_steps in (100, 200, 400):
        grid = TimeGrid(0.0, 1.0, n_steps)
        p1 = solve_p1(spec, grid)
        p2 = solve_p2(spec, p1, grid, exact_inverse=True)
        residuals.append(np.max(ode_residual(spec, p2, p1, exact_inverse=True)))
    ratios = np.array(residuals[:-1]) / np.array(residuals[1:])
    assert np.all((3.0 < ratios) & (ratios < 5.0)), ratios


def test_blowup_on_indefinite_problem():
    # P2' = -P2^2 backward from P2(2) = 1 gives P2 = 1/(t - 1)
    spec = ProblemSpec.build(1, 1, 2.0, B=1.0, R=-1.0, G=1.0)
    grid = TimeGrid(0.0, 2.0, 100)
    p1 = solve_p1(spec, grid)
    with pytest.raises(BlowUpError) as info:
        solve_p2(spec, p1, grid, exact_inverse=True, cap=1e4)
    assert abs(info.value.t_star - 1.0) < 0.03
    assert info.value.label == "P2"
    assert np.isnan(info.value.partial[0]).all()


def test_uniform_positivity():
    spec = builtin_scenario("psd_scalar")
    grid = TimeGrid(0.0, 1.0, 50)
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, exact_inverse=True)
    positivity = check_uniform_positivity(spec, p1, p2, grid)
    assert positivity.ok and positivity.gamma_hat >= 1.0 - 1e-12


def test_lyapunov_pair_at_optimal_gain():
    spec = builtin_scenario("psd_random", {"seed": 2})
    grid = TimeGrid(0.0, 1.0, 400)
    p1 = solve_p1(spec, grid)
    p2 = solve_p2(spec, p1, grid, exact_inverse=True)
    theta = gain_path(spec, p1, p2, exact_inverse=True)
    p1_tilde, p2_tilde = solve_lyapunov_pair(spec, theta, grid)
    assert np.max(np.abs(p1_tilde.values - p1.values)) <= 1e-8
    assert np.max(np.abs(p2_tilde.values - p2.values)) <= 1e-5 * (1.0 + np.max(np.abs(p2.values)))

    worse = MatrixPath(grid, theta.values + 0.3)
    _, p2_worse = solve_lyapunov_pair(spec, worse, grid)
    x0 = spec.default_x0()
    assert x0 @ p2_worse.initial @ x0 >= x0 @ p2.initial @ x0


def test_matrix_path_interpolation_and_integral():
    grid = TimeGrid(0.0, 1.0, 200)
    path = MatrixPath(grid, grid.t[:, None, None] ** 2, label="m")
    assert path(0.5)[0, 0] == pytest.approx(0.25)
    assert path(0.5031)[0, 0] == pytest.approx(0.5031**2, rel=1e-8)
    # int_0^1 t^4 dt
    assert path.sq_integral() == pytest.approx(0.2, rel=1e-4)
    assert path.sq_integral(0.5) == pytest.approx(0.5**5 / 5, rel=1e-4)
    coarse = path.sample(TimeGrid(0.0, 1.0, 50))
    np.testing.assert_array_equal(coarse.values, path.values[::4])
    with pytest.raises(ValueError):
        path(1.5)


def test_matrix_path_csv(tmp_path):
    grid = TimeGrid(0.0, 1.0, 2)
    path = MatrixPath(grid, np.stack([np.eye(2) * v for v in (1.0, 1.0 / 3.0, 0.1)]), True, "P2")
    out = tmp_path / "p2.csv"
    path.to_csv(str(out))
    lines = out.read_bytes().decode("utf-8").split("\n")
    assert lines[0] == "t,P2_0_0,P2_0_1,P2_1_0,P2_1_1"
    assert lines[2].split(",")[1] == "0.33333333333333331"
    assert b"\r" not in out.read_bytes()
