import numpy as np
import pytest
from numpy.testing import assert_allclose

from packages import space_time_grid as stg
from packages.errors import BoundaryNotClean, MeanNotZero
from packages.lamination import (C_DEFAULT, BoxST, Cutoff, EtaFrame, LaminatePatch, Sawtooth, apply_patch,
                                 box_divergence, build_laminate, div_right_inverse, grid_laminate, smootherstep,
                                 smootherstep_prime)


def _whole(grid):
    return BoxST(grid, (0,) * grid.dimension, tuple(n - 1 for n in grid.nodes), 0, grid.steps)


class TestSawtooth:
    saw = Sawtooth(lambda1=1.0, lambda2=2.0, rho=0.05)

    def test_shape_constants(self):
        assert self.saw.fraction == pytest.approx(2.0 / 3.0)
        assert self.saw.kinks == pytest.approx((1.0 / 3.0, 2.0 / 3.0))
        assert self.saw.sup == pytest.approx(1.0 / 3.0)

    def test_slopes_away_from_the_kinks(self):
        value, slope, _ = self.saw.evaluate(np.array([0.1, 0.5, 0.9, 1.5]))
        assert slope.tolist() == [-1.0, 2.0, -1.0, 2.0]
        assert_allclose(value[[0, 2]], [-0.1, 0.1])

    def test_derivatives_are_consistent(self):
        s = np.linspace(0.0, 2.0, 20001)
        value, slope, anti = self.saw.evaluate(s)
        ds = s[1] - s[0]
        assert_allclose(np.gradient(value, ds)[1:-1], slope[1:-1], atol=1e-4)
        assert_allclose(np.gradient(anti, ds)[1:-1], value[1:-1], atol=1e-6)

    def test_zero_mean_and_periodic(self):
        s = (np.arange(100000) + 0.5) / 100000
        value, _, anti = self.saw.evaluate(s)
        assert abs(value.mean()) <= 1e-6
        assert_allclose(self.saw.evaluate(s + 1.0)[2], anti, atol=1e-12)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 0.01), (1.0, -1.0, 0.01), (1.0, 1.0, 0.3)])
    def test_invalid_parameters(self, args):
        with pytest.raises(ValueError):
            Sawtooth(*args)


def test_smootherstep():
    assert smootherstep(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])).tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]
    assert smootherstep_prime(np.array([0.0, 1.0])).tolist() == [0.0, 0.0]


def test_cutoff_plateau_and_mean():
    cutoff = Cutoff(lengths=(1.0,), margin=(0.05,), width=(0.1,))
    z = (np.arange(100000) + 0.5) / 100000
    value = cutoff.axis_factors(0, z)[0]
    assert value[z < 0.05].max() == 0.0
    assert value[(z > 0.15) & (z < 0.85)].min() == 1.0
    assert value.mean() == pytest.approx(cutoff.mean_value(0), abs=1e-6)


class TestEtaFrame:
    def test_rank_one_matrix(self):
        eta = EtaFrame(q=[0.6, 0.8], b=2.0, gamma=[-0.24, 0.18])
        singular = np.linalg.svd(eta.matrix, compute_uv=False)
        assert singular[1] <= 1e-12 * singular[0]

    @pytest.mark.parametrize("q, b, gamma", [([1.0, 1.0], 1.0, [0.0, 0.0]), ([1.0, 0.0], 1.0, [0.5, 0.0]),
                                             ([1.0], 0.0, [0.0])])
    def test_validation(self, q, b, gamma):
        with pytest.raises(ValueError):
            EtaFrame(q=q, b=b, gamma=gamma)


class TestBox:
    def test_geometry(self, line):
        box = BoxST(line, (8,), (24,), 4, 12)
        assert box.side_lengths == pytest.approx((0.5,))
        assert box.duration == pytest.approx(0.005)
        assert box.measure == pytest.approx(0.0025)
        assert box.node_counts == (17,)
        assert box.box_id == "x8-24_t4-12"

    @pytest.mark.parametrize("lo, hi, t0, t1", [((4,), (4,), 0, 4), ((0,), (33,), 0, 4), ((0,), (8,), 3, 3),
                                                ((0,), (8,), 0, 17), ((0, 0), (8, 8), 0, 4)])
    def test_invalid_boxes(self, line, lo, hi, t0, t1):
        with pytest.raises(ValueError):
            BoxST(line, lo, hi, t0, t1)


class TestBuildLaminate:
    def test_one_dimensional_patch_meets_its_budgets(self):
        grid = stg.interval_grid(nodes=65, horizon=1.0, steps=16)
        box = _whole(grid)
        eps = 0.3
        patch = build_laminate(EtaFrame(q=[1.0], b=1.0, gamma=[0.0]), 1.0, 2.0, box, eps)
        audit = patch.audit
        assert audit["bad_measure"] < eps
        assert audit["max_distance"] < eps
        assert audit["sup_norm"] < eps
        assert audit["mean_residual"] <= 1e-12
        assert patch.phi.shape == (17, 65)
        assert not np.any(patch.psi[0])
        assert not np.any(patch.phi[:, [0, -1]])
        assert_allclose(patch.eta1 + patch.eta2 * 0.5, 0.0, atol=1e-15)

    @pytest.mark.slow
    def test_planar_patch_is_divergence_free(self):
        grid = stg.rectangle_grid(nodes=(17, 17), horizon=1.0, steps=16)
        box = _whole(grid)
        eps = 0.3
        eta = EtaFrame(q=[0.6, 0.8], b=1.0, gamma=[-0.16, 0.12])
        patch = build_laminate(eta, 1.5, 1.0, box, eps)
        assert patch.audit["div_residual"] <= 1e-8
        assert patch.audit["mean_residual"] <= 1e-12
        assert patch.audit["bad_measure"] < eps
        assert max(np.abs(p).max() for p in patch.psi) < eps
        assert_allclose(box_divergence(patch.psi, box), 0.0, atol=1e-8 * max(1.0, patch.audit["sup_psi"]))

    def test_budget_above_the_box_measure_gives_the_zero_patch(self, line):
        patch = build_laminate(EtaFrame(q=[1.0], b=1.0, gamma=[0.0]), 1.0, 1.0, _whole(line), eps=0.3)
        assert patch.is_zero

    def test_rejects_non_positive_weights(self, line):
        with pytest.raises(ValueError):
            build_laminate(EtaFrame(q=[1.0], b=1.0, gamma=[0.0]), 0.0, 1.0, _whole(line), eps=0.001)


class TestDivRightInverse:
    def test_one_dimensional_antiderivative(self):
        line = stg.interval_grid(nodes=129, horizon=0.01, steps=4)
        box = _whole(line)
        x = line.axes[0]
        phi = np.broadcast_to(np.sin(2 * np.pi * x), (line.steps + 1, line.nodes[0])).copy()
        phi[:, [0, -1]] = 0.0
        result = div_right_inverse(phi, box)
        (faces,) = stg.face_coordinates(line, 0)
        assert_allclose(result.g[0], np.broadcast_to((1 - np.cos(2 * np.pi * faces)) / (2 * np.pi), result.g[0].shape),
                        atol=1e-3)
        assert_allclose(box_divergence(result.g, box), phi, atol=1e-12)
        assert result.constant == 0.0

    def test_planar_divergence_is_exact(self, square, rng):
        box = BoxST(square, (2, 3), (12, 14), 1, 6)
        volumes = box.volumes()
        phi = rng.normal(size=(6,) + box.node_counts)
        phi[:, [0, -1], :] = 0.0
        phi[:, :, [0, -1]] = 0.0
        phi[:, 1:-1, 1:-1] -= (np.sum(phi * volumes, axis=(1, 2)) / volumes[1:-1, 1:-1].sum())[:, None, None]
        result = div_right_inverse(phi, box)
        assert [g.shape for g in result.g] == [(6, 10, 12), (6, 11, 11)]
        assert_allclose(box_divergence(result.g, box), phi, atol=1e-10)
        assert result.constant >= 0.0

    def test_nonzero_mean(self, line):
        phi = np.zeros((line.steps + 1, line.nodes[0]))
        phi[:, 1:-1] = 1.0
        with pytest.raises(MeanNotZero):
            div_right_inverse(phi, _whole(line))

    def test_boundary_values(self, line):
        phi = np.broadcast_to(np.cos(np.pi * line.axes[0]), (line.steps + 1, line.nodes[0]))
        with pytest.raises(BoundaryNotClean):
            div_right_inverse(phi, _whole(line))


def test_apply_patch_is_local(line):
    box = BoxST(line, (4,), (12,), 2, 6)
    patch = LaminatePatch(box=box, phi=np.ones((5, 9)), psi=(np.zeros((5, 8)),))
    u = np.zeros((line.steps + 1, line.nodes[0]))
    v = (np.zeros((line.steps + 1, line.cells[0])),)
    new_u, new_v = apply_patch(u, v, patch, (np.full((5, 8), 2.0),))
    assert not np.any(u) and not np.any(v[0])
    assert new_u.sum() == 45.0 and np.all(new_u[2:7, 4:13] == 1.0)
    assert new_v[0].sum() == 80.0 and np.all(new_v[0][2:7, 4:12] == 2.0)


def _random_eta(rng, dimension):
    b = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 2.0))
    if dimension == 1:
        return EtaFrame(q=[float(rng.choice([-1.0, 1.0]))], b=b, gamma=[0.0])
    angle = rng.uniform(0.0, 2.0 * np.pi)
    q = np.array([np.cos(angle), np.sin(angle)])
    return EtaFrame(q=q, b=b, gamma=rng.uniform(-1.0, 1.0) * np.array([-q[1], q[0]]))


@pytest.mark.slow
@pytest.mark.parametrize("dimension, frames", [(1, 100), (2, 20)])
def test_random_frames_meet_every_budget(rng, dimension, frames):
    grid = stg.interval_grid(nodes=65, horizon=1.0, steps=16) if dimension == 1 else \
        stg.rectangle_grid(nodes=(17, 17), horizon=1.0, steps=16)
    box = _whole(grid)
    for _ in range(frames):
        eta = _random_eta(rng, dimension)
        lambda1, lambda2 = rng.uniform(0.5, 3.0, size=2)
        for eps in (0.3, 0.1, 0.03):
            audit = build_laminate(eta, lambda1, lambda2, box, eps).audit
            assert audit["bad_measure"] < eps
            assert audit["max_distance"] < eps
            assert audit["sup_norm"] < eps
            assert audit["div_residual"] <= 1e-8
            assert audit["mean_residual"] <= 1e-12


def _random_box(rng, grid):
    lo = [int(rng.integers(0, n - 6)) for n in grid.nodes]
    hi = [int(rng.integers(a + 4, n)) for a, n in zip(lo, grid.nodes)]
    t0 = int(rng.integers(0, grid.steps - 2))
    return BoxST(grid, lo, hi, t0, int(rng.integers(t0 + 2, grid.steps + 1)))


def _admissible_phi(rng, box):
    """Random node values vanishing on the box boundary with zero mean on every slice."""
    volumes = box.volumes()
    phi = rng.normal(size=(box.slice_hi - box.slice_lo + 1,) + box.node_counts)
    inner = (slice(None),) + (slice(1, -1),) * box.dimension
    edge = np.ones(box.node_counts, dtype=bool)
    edge[inner[1:]] = False
    phi[:, edge] = 0.0
    axes = tuple(range(1, box.dimension + 1))
    phi[inner] -= (np.sum(phi * volumes, axis=axes) / volumes[inner[1:]].sum()).reshape((-1,) + (1,) * box.dimension)
    return phi


class TestDivRightInverseOnRandomBoxes:
    @pytest.fixture(params=[1, 2])
    def grid(self, request, line, square):
        return line if request.param == 1 else square

    def test_divergence_and_constant(self, rng, grid):
        for _ in range(50):
            box = _random_box(rng, grid)
            phi = _admissible_phi(rng, box)
            result = div_right_inverse(phi, box)
            assert_allclose(box_divergence(result.g, box), phi, atol=1e-10 * np.abs(phi).max())
            assert 0.0 <= result.constant <= 10.0 * C_DEFAULT[grid.dimension]

    def test_linearity(self, rng, grid):
        for _ in range(20):
            box = _random_box(rng, grid)
            first, second = _admissible_phi(rng, box), _admissible_phi(rng, box)
            a, b = rng.normal(size=2)
            combined = div_right_inverse(a * first + b * second, box).g
            parts = zip(div_right_inverse(first, box).g, div_right_inverse(second, box).g)
            for g, (g1, g2) in zip(combined, parts):
                assert_allclose(g, a * g1 + b * g2, atol=1e-12 * max(1.0, np.abs(g).max()))

    def test_one_dimensional_inverse_is_the_discrete_antiderivative(self, rng, line):
        for _ in range(20):
            box = _random_box(rng, line)
            phi = _admissible_phi(rng, box)
            (g,) = div_right_inverse(phi, box).g
            np.testing.assert_array_equal(g, np.cumsum(phi * box.volumes(), axis=1)[:, :-1])


class TestGridLaminate:
    @pytest.fixture
    def box(self, line):
        return _whole(line)

    @staticmethod
    def _slopes(box, low, high):
        shape = (box.slice_hi - box.slice_lo + 1, box.node_counts[0] - 1)
        return np.full(shape, low), np.full(shape, high)

    def test_settles_on_the_two_slopes(self, box, line):
        lower, upper = self._slopes(box, -1.0, 2.0)
        patch = grid_laminate(box, lower, upper, np.full((17, 33), 1e3))
        phi = patch.phi
        assert not np.any(phi[0])
        slopes = np.diff(phi[-1]) / line.h
        inner = slopes[1:-1]
        assert np.all(np.isclose(inner, -1.0, atol=1e-9) | np.isclose(inner, 2.0, atol=1e-9))
        # the upper slope takes its share 1/3 of the cells
        assert np.isclose(inner, 2.0, atol=1e-9).sum() == 10
        assert patch.audit["closure_cells"] == 2
        assert patch.audit["flips"] == 0
        assert patch.audit["final_lag"] <= 1e-12
        # the first slice is flat, later slices settle on all but the closure cells
        assert patch.audit["settled_fraction"] == pytest.approx(16 * 30 / (17 * 32))
        assert patch.eta is None and not np.any(patch.psi[0])

    def test_rate_mean_and_ends(self, box, line, rng):
        lower = rng.uniform(-3.0, -0.5, size=(17, 32))
        upper = rng.uniform(0.5, 3.0, size=(17, 32))
        rate = rng.uniform(1.0, 50.0, size=(17, 33))
        phi = grid_laminate(box, lower, upper, rate).phi
        volumes = box.volumes()
        assert not np.any(phi[0])
        assert not np.any(phi[:, [0, -1]])
        scale = np.abs(phi).max()
        assert scale > 0
        assert np.abs(phi @ volumes).max() <= 1e-12 * scale * volumes.sum()
        assert np.all(np.abs(np.diff(phi, axis=0)) <= rate[1:] * line.dt + 1e-15)
        (g,) = div_right_inverse(phi, box).g
        np.testing.assert_array_equal(g, np.cumsum(phi * volumes, axis=1)[:, :-1])
        assert_allclose(box_divergence((g,), box), phi, atol=1e-12 * scale)

    def test_closed_end_returns_to_zero(self, box):
        lower, upper = self._slopes(box, -1.0, 2.0)
        phi = grid_laminate(box, lower, upper, np.full((17, 33), 1e3), open_end=False).phi
        assert np.any(phi[8])
        assert not np.any(phi[-1])

    def test_cells_without_slopes_stay_flat(self, box):
        lower, upper = self._slopes(box, np.nan, np.nan)
        patch = grid_laminate(box, lower, upper, np.full((17, 33), 1e3))
        assert not np.any(patch.phi)
        assert patch.audit["settled_fraction"] == 0.0

    def test_validation(self, box, line, square):
        lower, upper = self._slopes(box, -1.0, 2.0)
        rate = np.ones((17, 33))
        with pytest.raises(ValueError):
            grid_laminate(box, upper, lower, rate)
        with pytest.raises(ValueError):
            grid_laminate(box, lower[:, 1:], upper, rate)
        with pytest.raises(ValueError):
            grid_laminate(box, lower, upper, rate[:, 1:])
        with pytest.raises(ValueError):
            grid_laminate(_whole(square), lower, upper, rate)
