import math

import numpy as np
import pytest

from model import AssumptionError, CoefficientProcess, ProblemSpec, TimeGrid, builtin_scenario
from simulate import Estimate, sample_ensemble
from solvability import (
    LadderCaps,
    LadderRung,
    NotConvergedError,
    build_feedback,
    default_ladder,
    epsilon_ladder,
    extract_weak_closed_loop,
    ladder_verdict,
    perturbed_feedback,
    representation_value,
    resolve_backend,
    solve_psd,
)


def _rungs(eps, norms, distances):
    return [
        LadderRung(e, Estimate(v, 0.0), None if d is None else Estimate(d, 0.0))
        for e, v, d in zip(eps, norms, distances)
    ]


def test_default_ladder():
    ladder = default_ladder(4)
    assert ladder == [1.0, 0.5, 0.25, 0.125, 0.0625]


@pytest.mark.parametrize("eps", [1.0, 0.1, 0.01])
def test_section5_perturbed_feedback(eps):
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 400)
    law = perturbed_feedback(spec, grid, eps)
    t = grid.t
    assert law.epsilon == eps and law.valid_until == 1.0
    np.testing.assert_allclose(law.theta.values[:, 0, 0], -1.0 / (eps + 1.0 - t), rtol=1e-8)
    assert law.lam.exponents == ((0.0, 0.0), (math.sqrt(2.0), -2.0))
    np.testing.assert_array_equal(law.lam.coef[:, 0, 0], 0.0)
    exact = -2.0 * np.sqrt(1.0 - t) / (eps + 1.0 - t)
    assert np.max(np.abs(law.lam.coef[:, 1, 0] - exact)) <= 1e-6 * np.max(np.abs(exact))
    # E Z^2 = 1 for Z = exp(sqrt2 W2 - 2t)
    lam_sq = law.lam.sq_integral(0.5)
    assert lam_sq == pytest.approx(4.0 * (math.log((eps + 1.0) / (eps + 0.5)) + eps * (1.0 / (eps + 1.0) - 1.0 / (eps + 0.5))), rel=1e-4)


@pytest.mark.parametrize("n_steps", [1000, 2000])
@pytest.mark.parametrize("eps", [2.0**-15, 2.0**-20])
def test_section5_perturbed_feedback_small_eps(n_steps, eps):
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, n_steps)
    law = perturbed_feedback(spec, grid, eps)
    t = grid.t
    np.testing.assert_allclose(law.theta.values[:, 0, 0], -1.0 / (eps + 1.0 - t), rtol=1e-6)
    exact = -2.0 * np.sqrt(1.0 - t) / (eps + 1.0 - t)
    assert np.max(np.abs(law.lam.coef[:, 1, 0] - exact)) <= 1e-6 * np.max(np.abs(exact))


def test_perturbed_feedback_needs_positive_eps():
    spec = builtin_scenario("section5")
    with pytest.raises(ValueError):
        perturbed_feedback(spec, TimeGrid(0.0, 1.0, 10), 0.0)


def test_resolve_backend():
    assert resolve_backend(builtin_scenario("section5")) == "ode"
    b = CoefficientProcess.markov(lambda t, w: np.cos(w)[:, None], (1,))
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, b=b)
    assert resolve_backend(spec) == "lsmc"
    assert resolve_backend(spec, "ode") == "ode"
    with pytest.raises(NotImplementedError):
        resolve_backend(spec, "mc")


def test_lsmc_feedback_needs_ensemble():
    b = CoefficientProcess.markov(lambda t, w: np.cos(w)[:, None], (1,))
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, G=1.0, b=b)
    grid = TimeGrid(0.0, 1.0, 20)
    with pytest.raises(ValueError):
        build_feedback(spec, grid, 0.1)
    ensemble = sample_ensemble(grid, 200, seed=0)
    law = build_feedback(spec, grid, 0.1, ensemble=ensemble).law
    assert law.lam.values.shape == (200, 21, 1)


def test_verdict_rules():
    caps = LadderCaps()
    eps = [1.0, 0.5, 0.25, 0.125, 0.0625]

    verdict, _ = ladder_verdict(_rungs(eps, [1.0, 2.0, 1e9, 1.0, 1.0], [None] * 5), caps)
    assert verdict == "Diverging"

    verdict, reason = ladder_verdict(_rungs(eps, [1.0, 1.0, 4.0, 16.0, 64.0], [None, 1.0, 2.0, 3.0, 4.0]), caps)
    assert verdict == "Diverging" and "1/eps" in reason

    converging = _rungs(eps, [8.0, 8.5, 8.8, 8.9, 8.95], [None, 1e-2, 1e-3, 1e-4, 1e-5])
    verdict, _ = ladder_verdict(converging, caps)
    assert verdict == "Solvable"

    verdict, _ = ladder_verdict(_rungs(eps, [8.0] * 5, [None, 1e-3, 1e-2, 1e-1, 1.0]), caps)
    assert verdict == "Inconclusive"

    # a small last distance after large ones is not enough
    verdict, reason = ladder_verdict(_rungs(eps, [8.0] * 5, [None, 1.0, 1.0, 0.5, 1e-6]), caps)
    assert verdict == "Inconclusive", reason

    verdict, reason = ladder_verdict(_rungs(eps[:2], [1.0, 1.0], [None, 0.0]), caps)
    assert verdict == "Inconclusive" and "too short" in reason


def test_ladder_screens_indefinite_problem():
    spec = builtin_scenario("indefinite_unbounded")
    ensemble = sample_ensemble(TimeGrid(0.0, 1.0, 10), 4, seed=0)
    report = epsilon_ladder(spec, 0.0, [1.0], default_ladder(3), ensemble)
    assert report.verdict == "AssumptionViolated"
    assert report.gamma_d < 0
    assert report.rungs == []


def test_ladder_rejects_bad_ladders():
    spec = builtin_scenario("psd_scalar")
    ensemble = sample_ensemble(TimeGrid(0.0, 1.0, 10), 4, seed=0)
    for ladder in ([], [0.5, 1.0], [1.0, 0.0]):
        with pytest.raises(ValueError):
            epsilon_ladder(spec, 0.0, [1.0], ladder, ensemble, screen=False)


def test_ladder_on_convex_problem():
    spec = builtin_scenario("psd_scalar")
    grid = TimeGrid(0.0, 1.0, 50)
    ensemble = sample_ensemble(grid, 500, seed=4)
    report = epsilon_ladder(spec, 0.0, [1.0], default_ladder(12), ensemble, print_fn=lambda *a, **k: None)
    assert report.gamma_d >= 1.0 - 1e-10
    assert report.verdict == "Solvable", report.reason
    assert len(report.rungs) == 13 and report.rungs[0].cauchy is None
    assert report.limit_controls is not None and report.limit_law.epsilon == 2.0**-12
    assert report.to_dict()["limit_norm"] == pytest.approx(report.rungs[-1].norm.mean)


@pytest.mark.slow
def test_section5_ladder_is_solvable():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 1000)
    ensemble = sample_ensemble(grid, 10_000, seed=0, workers=4)
    report = epsilon_ladder(spec, 0.0, [1.0], default_ladder(15), ensemble, print_fn=lambda *a, **k: None)
    assert report.verdict == "Solvable", report.reason
    assert -1e-12 <= report.gamma_d <= 0.5
    # |u_eps|^2 integrates to 9 / (1 + eps)^2
    half = report.rungs[1]
    assert half.epsilon == 0.5
    assert abs(half.norm.mean - 4.0) <= 3.0 * half.norm.stderr
    for rung in report.rungs:
        assert rung.norm.mean <= 9.0 + 3.0 * rung.norm.stderr


def test_section5_weak_closed_loop():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 1000)
    laws = [perturbed_feedback(spec, grid, eps) for eps in default_ladder(17)[-4:]]
    limit, table = extract_weak_closed_loop(laws, [0.5, 0.9, 0.99])
    assert limit.valid_until == 0.99 and limit.singular_at_T
    assert table.singular_slope > 0.5
    keep = grid.t <= 0.9 + 1e-12
    error = np.max(np.abs(limit.theta.values[keep, 0, 0] + 1.0 / (1.0 - grid.t[keep])))
    assert error <= 1e-3
    for t_prime, value in table.theta_sq.items():
        assert value == pytest.approx(1.0 / (1.0 - t_prime) - 1.0, rel=0.02)
    assert len(table.rows) == 3 * 3


def test_weak_closed_loop_not_converged():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 200)
    laws = [perturbed_feedback(spec, grid, eps) for eps in (1.0, 0.5)]
    with pytest.raises(NotConvergedError) as info:
        extract_weak_closed_loop(laws, [0.5, 0.9])
    assert info.value.t_prime == 0.5
    with pytest.raises(ValueError):
        extract_weak_closed_loop(laws[:1], [0.5])
    with pytest.raises(ValueError):
        extract_weak_closed_loop(laws, [1.0])


def test_solve_psd_zero_problem():
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0)
    grid = TimeGrid(0.0, 1.0, 20)
    ensemble = sample_ensemble(grid, 16, seed=0)
    solution = solve_psd(spec, 0.0, [1.0], grid, ensemble=ensemble)
    np.testing.assert_array_equal(solution.law.theta.values, 0.0)
    assert solution.cost.mean == 0.0
    assert solution.gamma_hat == pytest.approx(1.0)


def test_solve_psd_rejects_indefinite():
    spec = builtin_scenario("indefinite_unbounded")
    grid = TimeGrid(0.0, 1.0, 20)
    with pytest.raises(AssumptionError):
        solve_psd(spec, 0.0, [1.0], grid, ensemble=sample_ensemble(grid, 4, seed=0))


@pytest.mark.slow
def test_solve_psd_cost_matches_value():
    spec = builtin_scenario("psd_scalar")
    grid = TimeGrid(0.0, 1.0, 400)
    ensemble = sample_ensemble(grid, 20000, seed=8, workers=4)
    solution = solve_psd(spec, 0.0, [1.0], grid, ensemble=ensemble, workers=4)
    value = representation_value(spec, [1.0], solution.feedback)
    assert abs(solution.cost.mean - value) <= 4.0 * solution.cost.stderr + 0.02 * (1.0 + abs(value))


def test_representation_value_of_pure_terminal_noise():
    # u = 0 optimal, cost E x(T)^2 = x0^2 + sigma^2 T
    spec = ProblemSpec.build(1, 1, 1.0, R=1.0, G=1.0, sigma1=0.5)
    grid = TimeGrid(0.0, 1.0, 50)
    feedback = build_feedback(spec, grid, 0.0, exact_inverse=True)
    assert representation_value(spec, [2.0], feedback) == pytest.approx(4.25, rel=1e-8)
