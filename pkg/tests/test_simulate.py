import math

import numpy as np
import pytest
import torch

from model import ProblemSpec, TimeGrid, builtin_scenario
from riccati import MatrixPath
from simulate import (
    FeedbackLaw,
    SeparableLambda,
    control_distance,
    control_l2_norm,
    evaluate_cost,
    mean_stderr,
    path_seed,
    sample_ensemble,
    simulate_filtered_state,
    simulate_full_state,
)
from solvability import perturbed_feedback


def _zero_law(grid: TimeGrid, n: int, m: int, lam=0.0) -> FeedbackLaw:
    theta = MatrixPath(grid, np.zeros((len(grid), m, n)), label="theta")
    coef = np.full((len(grid), 1, m), lam)
    return FeedbackLaw(theta, SeparableLambda(grid, coef), valid_until=grid.T, label="zero")


def test_path_seed_is_stable():
    assert path_seed(7, 3) == path_seed(7, 3)
    assert path_seed(7, 3) != path_seed(7, 4)
    assert path_seed(7, 3) != path_seed(8, 3)


def test_ensemble_reproducible_across_workers():
    grid = TimeGrid(0.0, 1.0, 40)
    one = sample_ensemble(grid, 37, seed=5, workers=1)
    four = sample_ensemble(grid, 37, seed=5, workers=4)
    assert torch.equal(one.dW1, four.dW1) and torch.equal(one.dW2, four.dW2)
    prefix = sample_ensemble(grid, 10, seed=5)
    assert torch.equal(prefix.dW2, one.dW2[:10])
    assert not torch.equal(sample_ensemble(grid, 10, seed=6).dW2, prefix.dW2)


def test_ensemble_levels_and_scale():
    grid = TimeGrid(0.0, 2.0, 50)
    ensemble = sample_ensemble(grid, 4000, seed=0)
    assert ensemble.w1.shape == (4000, 51)
    assert torch.all(ensemble.w2[:, 0] == 0)
    var = float(ensemble.w2[:, -1].var())
    assert abs(var - 2.0) < 0.2
    with pytest.raises(ValueError):
        sample_ensemble(grid, 0, seed=0)


def test_mean_stderr():
    est = mean_stderr([1.0, 2.0, 3.0, 4.0])
    assert est.mean == 2.5
    assert est.stderr == pytest.approx(math.sqrt(np.var([1, 2, 3, 4], ddof=1) / 4))
    assert math.isnan(mean_stderr([3.0]).stderr)
    with pytest.raises(ValueError):
        mean_stderr([])


def test_deterministic_decay_cost():
    spec = ProblemSpec.build(1, 1, 1.0, A=-1.0, G=1.0)
    grid = TimeGrid(0.0, 1.0, 1000)
    ensemble = sample_ensemble(grid, 16, seed=1)
    traj = simulate_full_state(spec, torch.zeros(16, 1000, 1, dtype=torch.float64), ensemble, 0.0, [1.0])
    cost = evaluate_cost(spec, traj, 0.0, [1.0])
    assert cost.stderr == 0.0
    assert cost.mean == pytest.approx(math.exp(-2.0), rel=5e-3)


def test_filtered_matches_full_without_w1_noise():
    spec = builtin_scenario("psd_scalar", {"C1": 0.0, "sigma1": 0.0})
    grid = TimeGrid(0.0, 1.0, 50)
    ensemble = sample_ensemble(grid, 64, seed=2)
    law = _zero_law(grid, 1, 1, lam=0.3)
    filtered = simulate_filtered_state(spec, law, ensemble, 0.0, [1.0])
    full = simulate_full_state(spec, filtered, ensemble, 0.0, [1.0])
    assert torch.allclose(filtered.x, full.x, atol=1e-12)
    assert torch.all(filtered.u == 0.3)


def test_filtered_simulation_is_bit_reproducible():
    spec = builtin_scenario("psd_random", {"seed": 1})
    grid = TimeGrid(0.0, 1.0, 30)
    ensemble = sample_ensemble(grid, 25, seed=9)
    theta = MatrixPath(grid, np.tile(np.array([[-0.5, 0.2]]), (len(grid), 1, 1)))
    law = FeedbackLaw(theta, SeparableLambda(grid, np.full((len(grid), 1, 1), 0.1)), valid_until=1.0)
    x0 = spec.default_x0()
    one = simulate_filtered_state(spec, law, ensemble, 0.0, x0, workers=1)
    three = simulate_filtered_state(spec, law, ensemble, 0.0, x0, workers=3)
    assert torch.equal(one.x, three.x) and torch.equal(one.u, three.u)
    full_one = simulate_full_state(spec, one, ensemble, 0.0, x0, workers=1)
    full_three = simulate_full_state(spec, one, ensemble, 0.0, x0, workers=3)
    assert torch.equal(full_one.x, full_three.x)


def test_control_norms():
    grid = TimeGrid(0.0, 1.0, 20)
    ensemble = sample_ensemble(grid, 8, seed=0)
    spec = ProblemSpec.build(1, 1, 1.0)
    a = simulate_filtered_state(spec, _zero_law(grid, 1, 1, lam=1.0), ensemble, 0.0, [0.0])
    b = simulate_filtered_state(spec, _zero_law(grid, 1, 1, lam=0.5), ensemble, 0.0, [0.0])
    assert control_l2_norm(a).mean == pytest.approx(1.0)
    assert control_distance(a, b).mean == pytest.approx(0.25)


def test_truncated_law_needs_t_end():
    grid = TimeGrid(0.0, 1.0, 20)
    ensemble = sample_ensemble(grid, 4, seed=0)
    spec = ProblemSpec.build(1, 1, 1.0)
    law = _zero_law(grid, 1, 1).restricted(0.5)
    with pytest.raises(ValueError):
        simulate_filtered_state(spec, law, ensemble, 0.0, [0.0])
    traj = simulate_filtered_state(spec, law, ensemble, 0.0, [0.0], t_end=0.5)
    assert traj.steps == 10
    with pytest.raises(ValueError):
        evaluate_cost(spec, traj)


def test_feedback_law_rejects_non_finite_gain():
    grid = TimeGrid(0.0, 1.0, 10)
    values = np.zeros((len(grid), 1, 1))
    values[-1] = np.inf
    theta = MatrixPath(grid, values)
    lam = SeparableLambda(grid, np.zeros((len(grid), 1, 1)))
    with pytest.raises(ValueError):
        FeedbackLaw(theta, lam, valid_until=1.0)
    law = FeedbackLaw(theta, lam, valid_until=1.0, singular_at_T=True)
    assert law.restricted(0.9).valid_until == 0.9


def test_trajectory_csv(tmp_path):
    grid = TimeGrid(0.0, 1.0, 4)
    ensemble = sample_ensemble(grid, 3, seed=0)
    spec = ProblemSpec.build(1, 1, 1.0, sigma2=1.0)
    traj = simulate_filtered_state(spec, _zero_law(grid, 1, 1), ensemble, 0.0, [1.0])
    traj.to_csv(str(tmp_path / "paths.csv"), n_paths=2)
    lines = (tmp_path / "paths.csv").read_text().strip().split("\n")
    assert lines[0] == "path_id,t,x_0,u_0"
    assert len(lines) == 1 + 2 * 5
    assert lines[5].endswith(",nan")


def test_section5_pathwise_control():
    spec = builtin_scenario("section5")
    grid = TimeGrid(0.0, 1.0, 1000)
    ensemble = sample_ensemble(grid, 500, seed=3)
    eps = 0.5
    traj = simulate_filtered_state(spec, perturbed_feedback(spec, grid, eps), ensemble, 0.0, [1.0])
    i = grid.n_steps // 2
    t = grid.t[i]
    exact = -(2.0 + 1.0) / (eps + 1.0) * np.exp(math.sqrt(2.0) * ensemble.w2[:, i].numpy() - 2.0 * t)
    ratio = traj.u[:, i, 0].numpy() / exact
    assert np.sqrt(np.mean((ratio - 1.0) ** 2)) <= 0.1
    assert abs(ratio.mean() - 1.0) <= 0.01


def test_unit_state_noise_reproduces_w1():
    spec = ProblemSpec.build(1, 1, 1.0, sigma1=1.0)
    grid = TimeGrid(0.0, 1.0, 200)
    ensemble = sample_ensemble(grid, 32, seed=4)
    traj = simulate_full_state(spec, torch.zeros(32, 200, 1, dtype=torch.float64), ensemble, 0.0, [0.0])
    assert torch.allclose(traj.x[:, :, 0], ensemble.w1, atol=1e-12)


def test_geometric_filter_moments():
    grid = TimeGrid(0.0, 1.0, 1000)
    ensemble = sample_ensemble(grid, 4000, seed=5)
    w = ensemble.w2[:, -1].numpy()

    # x_hat(1) = exp(sqrt2 W2(1) - 1); its second moment e^2 is too heavy-tailed to sample, its log is not
    steep = ProblemSpec.build(1, 1, 1.0, C2=math.sqrt(2.0))
    x = simulate_filtered_state(steep, _zero_law(grid, 1, 1), ensemble, 0.0, [1.0]).x[:, -1, 0].numpy()
    assert np.median(np.abs(x / np.exp(math.sqrt(2.0) * w - 1.0) - 1.0)) <= 0.05
    log_sq = mean_stderr(np.log(x**2))
    assert abs(log_sq.mean + 2.0) <= 4.0 * log_sq.stderr + 0.01

    mild = ProblemSpec.build(1, 1, 1.0, C2=0.5)
    x = simulate_filtered_state(mild, _zero_law(grid, 1, 1), ensemble, 0.0, [1.0]).x[:, -1, 0].numpy()
    second = mean_stderr(x**2)
    assert abs(second.mean - math.exp(0.25)) <= 3.0 * second.stderr + 1e-3


def test_state_bound_is_quadratic_in_data():
    spec = ProblemSpec.build(1, 1, 1.0, A=-0.5, B=1.0, C1=0.3, C2=0.4, D1=0.2, D2=0.1)
    grid = TimeGrid(0.0, 1.0, 200)
    ensemble = sample_ensemble(grid, 400, seed=6)

    def sup_sq(x0, level):
        u = torch.full((400, 200, 1), level, dtype=torch.float64)
        traj = simulate_full_state(spec, u, ensemble, 0.0, [x0])
        data = x0**2 + control_l2_norm(traj).mean
        return float(traj.x.square().sum(-1).amax(-1).mean()), data

    ratios = []
    for x0, level in [(1.0, 0.0), (0.0, 1.0), (1.0, 3.0), (5.0, 1.0), (0.0, 10.0)]:
        bound, data = sup_sq(x0, level)
        ratios.append(bound / data)
        scaled, scaled_data = sup_sq(3.0 * x0, 3.0 * level)
        assert scaled == pytest.approx(9.0 * bound, rel=1e-10)
        assert scaled_data == pytest.approx(9.0 * data, rel=1e-10)
    assert max(ratios) <= 5.0


def test_shared_paths_reduce_distance_variance():
    spec = ProblemSpec.build(1, 1, 1.0, A=-0.5, B=1.0, C2=0.5, sigma2=0.3)
    grid = TimeGrid(0.0, 1.0, 100)
    theta = MatrixPath(grid, np.full((len(grid), 1, 1), -1.0))

    def law(lam):
        return FeedbackLaw(theta, SeparableLambda(grid, np.full((len(grid), 1, 1), lam)), valid_until=1.0)

    ensemble, other = sample_ensemble(grid, 1000, seed=7), sample_ensemble(grid, 1000, seed=8)
    a = simulate_filtered_state(spec, law(0.3), ensemble, 0.0, [1.0])
    b = simulate_filtered_state(spec, law(0.35), ensemble, 0.0, [1.0])
    b_other = simulate_filtered_state(spec, law(0.35), other, 0.0, [1.0])
    shared = control_distance(a, b)
    independent = mean_stderr(((a.u - b_other.u).square().sum(-1).sum(-1) * grid.h).numpy())
    assert shared.mean < independent.mean
    assert shared.stderr < 0.1 * independent.stderr
    with pytest.raises(ValueError):
        control_distance(a, b_other)


def test_late_start_needs_its_own_ensemble():
    spec = ProblemSpec.build(1, 1, 1.0, C2=0.5)
    grid = TimeGrid(0.5, 1.0, 50)
    ensemble = sample_ensemble(grid, 8, seed=0)
    traj = simulate_filtered_state(spec, _zero_law(grid, 1, 1), ensemble, 0.5, [1.0])
    assert traj.steps == 50 and torch.all(traj.x[:, 0] == 1.0)
    assert torch.all(ensemble.w2[:, 0] == 0)
    with pytest.raises(ValueError, match="ensemble starts at"):
        simulate_filtered_state(spec, _zero_law(grid, 1, 1), ensemble, 0.0, [1.0])
