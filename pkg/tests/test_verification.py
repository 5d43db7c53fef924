import json
import types

import numpy as np
import pytest
from numpy.testing import assert_allclose

from packages import space_time_grid as stg
from packages.diffusion_profile import ModifiedProfile, flux
from packages.parabolic_solver import build_boundary_function
from packages.refinement_scheme import constant_state
from packages.verification import (Band, VerificationReport, constant_test_function, default_test_basis,
                                   distance_to_B, flux_residual, full_report, mass_drift, measured_caps,
                                   potential_from_density, set_distance_report, target_band, weak_residual)

S_PLUS = (3 + np.sqrt(13.5)) / 2
S_MINUS1 = (3 - np.sqrt(4.5)) / 2
S_MINUS2 = (3 + np.sqrt(4.5)) / 2


@pytest.fixture(scope="module")
def heat_state():
    grid = stg.interval_grid(nodes=65, horizon=0.1, steps=400)
    pair = build_boundary_function(ModifiedProfile.linear(), np.cos(np.pi * grid.axes[0]), grid, rule="implicit")
    return types.SimpleNamespace(grid=grid, u=pair.u_star, v=pair.v_star)


def _polynomial_in_time(dimension):
    return [zeta for zeta in default_test_basis(dimension) if zeta.name.split(" * ")[1] in ("1", "t", "t^2")]


def test_default_basis_size():
    assert len(default_test_basis(1)) == 25
    assert len(default_test_basis(2)) == 25


class TestConstantState:
    @pytest.fixture
    def state(self, line):
        return constant_state(np.full(line.nodes, 0.7), line)

    def test_every_residual_vanishes(self, state, profile):
        assert weak_residual(state, profile, test_basis=_polynomial_in_time(1)) <= 1e-14
        assert mass_drift(state) == 0.0
        assert flux_residual(state, profile) == 0.0
        assert measured_caps(state) == {"ut": 0.0, "vt": 0.0}

    @pytest.mark.parametrize("solution_type", ["I", "II"])
    def test_set_distances_vanish(self, state, profile, solution_type):
        report = set_distance_report(state, 1.125, profile, solution_type)
        assert report["band_max"] == 0.0
        assert report["classical_violation"] == 0.0
        assert report["b_distance_max"] == 0.0
        assert report["omega1_measure"] == 0.0

    def test_full_report(self, state, profile):
        plan = types.SimpleNamespace(profile=profile, r_tilde=1.125, solution_type="I")
        report = full_report(state, plan, pass_index=3)
        assert report.pass_index == 3
        assert report.flux_residual == 0.0
        assert report.set_residuals["band_integral"] == 0.0


def test_constant_test_function_measures_mass_drift(line, rng, profile):
    state = types.SimpleNamespace(grid=line, u=rng.normal(size=(line.steps + 1,) + line.nodes))
    value = weak_residual(state, profile, test_basis=[constant_test_function()])
    assert value == pytest.approx(mass_drift(state), rel=1e-12)
    assert value > 0


class TestHeatState:
    def test_flux_residual_is_small(self, heat_state, heat_law):
        assert flux_residual(heat_state, heat_law) <= 1e-3

    def test_weak_residual_is_small(self, heat_state, heat_law):
        assert weak_residual(heat_state, heat_law) <= 5e-3

    def test_mass_is_conserved(self, heat_state):
        assert mass_drift(heat_state) <= 1e-12

    def test_caps(self, heat_state):
        caps = measured_caps(heat_state)
        assert caps["ut"] == pytest.approx(np.pi ** 2, rel=2e-2)
        assert caps["vt"] == pytest.approx(np.pi, rel=2e-2)


class TestBands:
    def test_type_one(self, profile):
        band = target_band(profile, 1.125, "I")
        assert band.includes_zero
        assert_allclose(band.intervals, [(S_MINUS2, S_PLUS)], atol=1e-10)

    def test_type_two(self, profile):
        band = target_band(profile, 1.125, "II", include_zero=False)
        assert band.includes_zero
        assert_allclose(band.intervals, [(0.0, S_MINUS1), (3.0, S_PLUS)], atol=1e-10)

    def test_distance(self):
        band = Band(intervals=((1.0, 2.0),), includes_zero=True)
        assert band.distance([0.0, 0.3, 0.5, 1.5, 3.0]).tolist() == pytest.approx([0.0, 0.3, 0.5, 0.0, 1.0])
        assert Band(intervals=((1.0, 2.0),), includes_zero=False).distance(0.3) == pytest.approx(0.7)


class TestDistanceToB:
    def test_origin(self, profile):
        band = target_band(profile, 1.125, "I", include_zero=False)
        assert float(distance_to_B(np.array([0.0]), np.array([0.0]), profile, band)) == pytest.approx(
            np.hypot(S_MINUS2, 1.125), rel=1e-10)

    def test_origin_is_in_the_type_one_set(self, profile):
        band = target_band(profile, 1.125, "I")
        assert float(distance_to_B(np.array([0.0]), np.array([0.0]), profile, band)) == 0.0

    def test_points_on_the_graph(self, profile):
        band = target_band(profile, 1.125, "I", include_zero=False)
        s = 3.1
        sigma = float(profile.sigma(s))
        line_points = distance_to_B(np.array([[-s], [s]]), np.array([[-sigma], [sigma]]), profile, band)
        assert line_points.shape == (2,)
        assert line_points.max() <= 0.01
        e = np.array([0.6, 0.8])
        assert float(distance_to_B(s * e, sigma * e, profile, band)) <= 0.01


def test_potential_from_density(line):
    u = np.broadcast_to(np.cos(np.pi * line.axes[0]), (line.steps + 1,) + line.nodes)
    v = potential_from_density(u, line)
    assert v[0].shape == (line.steps + 1, line.cells[0])
    assert_allclose(stg.divergence(v, line), u, atol=1e-12)


def test_potential_from_density_is_one_dimensional(square):
    with pytest.raises(ValueError):
        potential_from_density(np.zeros(square.nodes), square)


def test_report_serialization():
    report = VerificationReport(weak_residual=1e-3, mass_drift=0.0, flux_residual=0.25,
                                set_residuals={"band_max": 0.5}, caps={"ut": 2.0, "vt": 1.0}, pass_index=1)
    assert VerificationReport.from_dict(report.to_dict()) == report
    assert json.loads(report.to_json())["set_residuals"] == {"band_max": 0.5}


class TestResidualStructure:
    @staticmethod
    def _spike(line, amplitude):
        u = np.zeros((line.steps + 1,) + line.nodes)
        u[:, 10] = amplitude
        return types.SimpleNamespace(grid=line, u=u)

    def test_weak_residual_scales_with_a_static_spike(self, line, heat_law):
        unit = weak_residual(self._spike(line, 1.0), heat_law)
        assert unit > 0
        for amplitude in (1e-3, -2.0, 7.5):
            scaled = weak_residual(self._spike(line, amplitude), heat_law)
            assert scaled == pytest.approx(abs(amplitude) * unit, rel=1e-10)

    def test_flux_residual_ignores_time_independent_fields(self, line, profile, rng):
        u = rng.normal(size=(line.steps + 1,) + line.nodes)
        v = (rng.normal(size=(line.steps + 1,) + line.cells),)
        state = types.SimpleNamespace(grid=line, u=u, v=v)
        shifted = types.SimpleNamespace(grid=line, u=u, v=(v[0] + rng.normal(size=line.cells)[None, :],))
        assert flux_residual(shifted, profile) == pytest.approx(flux_residual(state, profile), rel=1e-9)


class TestRotations:
    @staticmethod
    def _rotation(angle):
        return np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])

    def test_flux_commutes_with_rotations(self, profile, rng):
        p = rng.normal(size=(100, 2)) * 2.0
        for angle in rng.uniform(0.0, 2 * np.pi, size=5):
            rotation = self._rotation(angle)
            assert_allclose(flux(profile, p @ rotation.T), flux(profile, p) @ rotation.T, atol=1e-12)

    def test_distance_of_radial_points(self, profile, rng):
        band = target_band(profile, 1.125, "I", include_zero=False)
        size = rng.uniform(0.5, 4.0, size=40)
        level = rng.uniform(-2.0, 2.0, size=40)
        line_distance = distance_to_B(size[:, None], level[:, None], profile, band)
        e = np.array([1.0, 0.0])
        for angle in rng.uniform(0.0, 2 * np.pi, size=4):
            d = self._rotation(angle) @ e
            planar = distance_to_B(size[:, None] * d, level[:, None] * d, profile, band)
            assert_allclose(planar, line_distance, rtol=1e-9, atol=1e-6)
