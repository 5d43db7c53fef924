import numpy as np
import pytest
from numpy.testing import assert_allclose

from packages import space_time_grid as stg
from packages.diffusion_profile import ModifiedProfile, branch_inverses
from packages.errors import Incompatible
from packages.parabolic_solver import (assemble_vstar, build_boundary_function, normalize_initial, partition_domain,
                                       solve_parabolic, solve_poisson_neumann)


def _heat_error(nodes, steps, horizon):
    grid = stg.interval_grid(nodes=nodes, horizon=horizon, steps=steps)
    x = grid.axes[0]
    solution = solve_parabolic(ModifiedProfile.linear(), np.cos(np.pi * x), grid)
    exact = np.exp(-np.pi ** 2 * horizon) * np.cos(np.pi * x)
    return np.abs(solution.u[-1] - exact).max()


def test_heat_equation_accuracy():
    assert _heat_error(nodes=129, steps=1000, horizon=0.1) <= 1e-3


def test_heat_equation_second_order_under_refinement():
    # dt = h^2 keeps the time error at the order of the space error
    errors = [_heat_error(nodes=n + 1, steps=n * n // 16, horizon=1 / 16) for n in (16, 32, 64)]
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    assert all(3.0 <= ratio <= 5.0 for ratio in ratios), ratios


def test_mass_is_conserved_by_the_nonlinear_solve(modified):
    grid = stg.interval_grid(nodes=65, horizon=0.004, steps=40)
    u0 = normalize_initial(3.25 * (grid.axes[0] - 0.5) + 0.1 * np.sin(3 * grid.axes[0]), grid)
    solution = solve_parabolic(modified, u0, grid)
    mass = stg.node_integral(solution.u, grid)
    assert np.abs(np.diff(mass)).max() <= 1e-12
    assert len(solution.picard_iterations) == grid.steps
    assert solution.gradient_max.shape == (grid.steps + 1,)


def test_gradient_monitor_is_non_increasing_for_the_heat_equation():
    grid = stg.interval_grid(nodes=65, horizon=0.05, steps=50)
    solution = solve_parabolic(ModifiedProfile.linear(), np.cos(np.pi * grid.axes[0]), grid)
    assert np.all(np.diff(solution.gradient_max) <= 1e-12)


def test_solver_rejects_a_degenerate_profile(line):
    with pytest.raises(ValueError):
        solve_parabolic(ModifiedProfile.linear(0.0), np.zeros(line.nodes), line)


class TestPoisson:
    def test_cosine_potential(self):
        grid = stg.interval_grid(nodes=129)
        x = grid.axes[0]
        potential = solve_poisson_neumann(np.cos(np.pi * x), grid)
        assert_allclose(potential, -np.cos(np.pi * x) / np.pi ** 2, atol=1e-4)
        assert stg.node_mean(potential, grid) == pytest.approx(0.0, abs=1e-14)

    def test_two_dimensional_residual(self, square, rng):
        u0 = normalize_initial(rng.normal(size=square.nodes), square)
        potential = solve_poisson_neumann(u0, square)
        laplacian = stg.divergence(stg.face_gradient(potential, square), square)
        assert_allclose(laplacian, u0, atol=1e-9)

    def test_nonzero_mean_is_incompatible(self, line):
        with pytest.raises(Incompatible):
            solve_poisson_neumann(np.ones(line.nodes), line)

    def test_zero_data(self, line):
        assert not np.any(solve_poisson_neumann(np.zeros(line.nodes), line))


class TestBoundaryFunction:
    @pytest.fixture(scope="class")
    def heat_pair(self):
        grid = stg.interval_grid(nodes=129, horizon=0.1, steps=1000)
        u0 = np.cos(np.pi * grid.axes[0])
        return grid, {rule: build_boundary_function(ModifiedProfile.linear(), u0, grid, rule=rule)
                      for rule in ("trapezoid", "implicit")}

    def test_divergence_matches_u_star(self, heat_pair):
        grid, pairs = heat_pair
        for rule, tolerance in (("trapezoid", 5e-3), ("implicit", 1e-6)):
            pair = pairs[rule]
            defect = np.abs(stg.divergence(pair.v_star, grid) - pair.u_star).max()
            assert defect <= tolerance, rule

    def test_closed_form_heat_potential(self, heat_pair):
        grid, pairs = heat_pair
        (faces,) = stg.face_coordinates(grid, 0)
        exact = np.sin(np.pi * faces)[None, :] * np.exp(-np.pi ** 2 * grid.times)[:, None] / np.pi
        assert_allclose(pairs["implicit"].v_star[0], exact, atol=2e-3)

    def test_zero_normal_trace(self, heat_pair):
        grid, pairs = heat_pair
        pair = pairs["implicit"]
        assert_allclose(stg.node_integral(stg.divergence(pair.v_star, grid), grid), 0.0, atol=1e-12)
        assert len(pair.v_star[0][0]) == grid.nodes[0] - 1

    def test_unknown_time_rule(self, line, heat):
        u = np.zeros((line.steps + 1,) + line.nodes)
        with pytest.raises(ValueError):
            assemble_vstar(heat, u, (np.zeros(line.cells),), line, rule="midpoint")


def test_partition_domain(profile):
    s_plus_r = branch_inverses(profile, 1.125).s_plus_r
    du = np.array([0.0, 1.0, s_plus_r, 5.0, -4.0]).reshape(1, 5, 1)
    masks = partition_domain(du, 1.125, profile)
    assert masks.omega0.tolist() == [[True, False, False, False, False]]
    assert masks.omega1.tolist() == [[False, True, False, False, False]]
    assert masks.omega2.tolist() == [[False, False, True, False, False]]
    assert masks.omega3.tolist() == [[False, False, False, True, True]]
    assert masks.initial_trace.tolist() == [False, False, False, True, True]
    assert masks.counts()["omega3"] == 2
    assert masks.s_plus_r == pytest.approx(s_plus_r)


def test_gradient_monitor_never_grows_for_the_modified_law(modified):
    grid = stg.interval_grid(nodes=65, horizon=0.004, steps=40)
    x = grid.axes[0]
    solution = solve_parabolic(modified, 0.2 * np.sin(6 * np.pi * x) + 1.5 * x, grid)
    bound = solution.gradient_max[0]
    assert np.all(solution.gradient_max <= bound * (1 + 1e-8) + 1e-7)


def test_zero_data_gives_the_zero_pair(modified, line):
    pair = build_boundary_function(modified, np.zeros(line.nodes), line)
    assert not np.any(pair.u_star)
    assert not np.any(pair.v_star[0])
    assert not np.any(pair.potential)
    assert pair.gradient_bound == 0.0


class TestNormalizeInitial:
    def test_idempotent(self, square, rng):
        once = normalize_initial(rng.normal(size=square.nodes) + 3.0, square)
        assert stg.node_mean(once, square) == pytest.approx(0.0, abs=1e-14)
        assert_allclose(normalize_initial(once, square), once, atol=1e-15)

    def test_mean_free_data_is_unchanged(self, line):
        u0 = np.cos(np.pi * line.axes[0])
        assert_allclose(normalize_initial(u0, line), u0, atol=1e-15)
