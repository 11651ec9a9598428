import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obsv.numerics import TimeGrid, Trajectory
from obsv.reconstruction import (
    check_pe,
    compute_bundle,
    contraction_modulus,
    find_contraction_time,
    fixed_point_map,
    fundamental_matrix,
    gramian_psi,
    one_shot_initial_state,
    random_pairs,
    xi_map,
)
from obsv.system import InputSignal, SimulatedOutput, SystemModel, TriangularSpec, build_triangular

from conftest import X0


def _zeros(grid, k=1):
    return Trajectory(grid, np.zeros((grid.n_nodes, k)))


def _scalar_model(a, C=1.0):
    return SystemModel(1, 0, 1, lambda t, y, u: [[a(t)]], lambda t, y, x, u: [0.0],
                       lambda t, u: [[C]])


class TestFundamentalMatrix:
    def test_zero_generator(self, no_input):
        m = build_triangular(TriangularSpec(2, 0, ("0",), ("0", "0")))
        grid = TimeGrid(0.0, 1.0, 16)
        phi = fundamental_matrix(m, _zeros(grid), no_input, grid)
        assert np.array_equal(phi.values, np.broadcast_to(np.eye(2), phi.values.shape))

    def test_planar_nilpotent(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 5e-4, 64)
        phi = fundamental_matrix(planar, planar_output, unit_input, grid)
        t = grid.times
        expected = np.stack([np.array([[1.0, s], [0.0, 1.0]]) for s in t])
        assert np.array_equal(phi.values[0], np.eye(2))
        assert np.max(np.abs(phi.values - expected)) < 1e-12

    def test_scalar_gaussian(self, no_input):
        grid = TimeGrid(0.0, 1.0, 2000)
        phi = fundamental_matrix(_scalar_model(lambda t: t), _zeros(grid), no_input, grid)
        assert np.max(np.abs(phi.values[:, 0, 0] - np.exp(grid.times ** 2 / 2))) < 1e-8

    def test_cocycle_by_restart(self, planar, unit_input):
        out = SimulatedOutput(planar, X0, unit_input)
        grid = TimeGrid(0.0, 0.5, 200)
        full = fundamental_matrix(planar, out, unit_input, grid).values
        rng = np.random.default_rng(3)
        for _ in range(5):
            s = int(rng.integers(2, 198))
            late = TimeGrid(grid.node(s), grid.t_end, grid.n_steps - s)
            tail = fundamental_matrix(planar, out.sample(grid.refine(2)).resample(late.refine(2)),
                                      unit_input, late).values
            for t in rng.integers(s, 201, 3):
                lhs = full[t]
                rhs = tail[t - s] @ full[s]
                assert np.max(np.abs(lhs - rhs)) <= 1e-8 * np.max(np.abs(lhs))

    def test_liouville_scalar(self, no_input):
        grid = TimeGrid(0.0, 1.0, 400)
        phi = fundamental_matrix(_scalar_model(lambda t: np.cos(t)), _zeros(grid), no_input, grid)
        assert np.max(np.abs(phi.values[:, 0, 0] - np.exp(np.sin(grid.times)))) < 1e-8


class TestGramian:
    def test_scalar_exact(self, no_input):
        m = build_triangular(TriangularSpec(1, 0, (), ("0",)))
        grid = TimeGrid(0.25, 1.25, 8)
        phi = fundamental_matrix(m, _zeros(grid), no_input, grid)
        psi = gramian_psi(phi, m, no_input)
        assert np.allclose(psi.values[:, 0, 0], grid.times - 0.25, rtol=0, atol=1e-15)

    def test_planar_closed_form(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 1e-3, 256)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        D = 1e-3
        h = grid.h
        psi = b.psi.values[-1]
        # entries 11 and 12 integrate 1 and s, which the trapezoid rule gets
        # exactly; for s^2 it adds h^2 D / 6
        exact = np.array([[D, D ** 2 / 2], [D ** 2 / 2, D ** 3 / 3 + h ** 2 * D / 6]])
        assert np.max(np.abs(psi - exact) / exact) < 1e-10
        assert psi[1, 1] == pytest.approx(D ** 3 / 3, rel=1e-4)

    def test_power_growth(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 1e-3, 256)
        psi = compute_bundle(planar, planar_output, unit_input, grid).psi.values
        for i in range(2):
            for j in range(2):
                ratio = psi[-1, i, j] / psi[128, i, j]
                assert 0.9 * 2 ** (i + j + 1) <= ratio <= 1.1 * 2 ** (i + j + 1)

    def test_monotone_and_symmetric(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 0.1, 64)
        psi = compute_bundle(planar, planar_output, unit_input, grid).psi.values
        assert np.array_equal(psi, np.swapaxes(psi, 1, 2))
        for a in range(0, 64, 7):
            for c in range(a + 1, 65, 9):
                assert np.linalg.eigvalsh(psi[c] - psi[a])[0] >= -1e-10


class TestPE:
    def test_planar_passes(self, planar, unit_input, planar_output):
        b = compute_bundle(planar, planar_output, unit_input, TimeGrid(0.0, 5e-4, 256))
        r = check_pe(b)
        assert r.passed and r.first_fail is None and r.node_pass.all()

    def test_zero_output_map(self, no_input):
        m = SystemModel(2, 0, 1, lambda t, y, u: [[0, 1], [0, 0]], lambda t, y, x, u: [0, 0],
                        lambda t, u: [[0.0, 0.0]])
        grid = TimeGrid(0.0, 1.0, 16)
        r = check_pe(compute_bundle(m, _zeros(grid), no_input, grid))
        assert not r.passed and r.first_fail == 1 and not r.node_pass[1:].any()

    def test_unobservable_chain(self, no_input):
        m = build_triangular(TriangularSpec(2, 0, ("0",), ("0", "0")))
        grid = TimeGrid(0.0, 1.0, 16)
        r = check_pe(compute_bundle(m, _zeros(grid), no_input, grid))
        assert not r.passed and not r.node_pass[1:].any()


class TestXi:
    def test_zero_drift(self, chain2, no_input):
        grid = TimeGrid(0.0, 1.0, 16)
        b = compute_bundle(chain2, _zeros(grid), no_input, grid)
        assert np.array_equal(xi_map(b, np.ones(2)).values, np.zeros((17, 2)))

    def test_planar_leading_order(self, planar, unit_input, planar_output):
        # with d2 = 0 the drift is (0, y); for y near 2 the correction is
        # (y D^3/6, y D^4/8) to leading order
        grid = TimeGrid(0.0, 1e-3, 256)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        xi = xi_map(b, np.zeros(2)).values
        D = 1e-3
        assert xi[-1, 0] == pytest.approx(2 * D ** 3 / 6, rel=1e-3)
        assert xi[-1, 1] == pytest.approx(2 * D ** 4 / 8, rel=1e-3)
        assert 0.9 * 8 <= xi[-1, 0] / xi[128, 0] <= 1.1 * 8
        assert 0.9 * 16 <= xi[-1, 1] / xi[128, 1] <= 1.1 * 16
        assert np.array_equal(xi[0], [0.0, 0.0])

    def test_identical_arguments(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 1e-3, 64)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        d = np.random.default_rng(0).uniform(-1, 1, (65, 2))
        assert np.array_equal(xi_map(b, d).values - xi_map(b, d.copy()).values, np.zeros((65, 2)))


class TestOneShot:
    def test_linear_chain(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        grid = TimeGrid(0.0, 1e-2, 128)
        b = compute_bundle(chain2, out, no_input, grid)
        assert np.allclose(b.y.values[:, 0], 1 + 2 * grid.times, atol=1e-14)
        x0 = one_shot_initial_state(b, np.zeros(2))
        assert np.max(np.abs(x0 - [1.0, 2.0])) < 1e-6

    def test_scalar_mean(self, no_input):
        m = build_triangular(TriangularSpec(1, 0, (), ("0",)))
        grid = TimeGrid(0.0, 0.5, 32)
        y = Trajectory(grid, np.full((33, 1), 7.0))
        b = compute_bundle(m, y, no_input, grid)
        assert one_shot_initial_state(b, np.zeros(1))[0] == pytest.approx(7.0, abs=1e-14)

    def test_planar_true_trajectory(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 5e-4, 128)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        x = planar_output.truth(grid.refine(2)).values[::2]
        assert np.max(np.abs(one_shot_initial_state(b, x) - X0)) < 1e-4


class TestFixedPointMap:
    def test_identity_on_truth(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 0.05, 128)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        x = planar_output.truth(grid.refine(2)).resample(grid)
        assert (fixed_point_map(b, x) - x).sup_norm() <= 10 * grid.h ** 2

    def test_linear_ignores_guess(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        grid = TimeGrid(0.0, 0.1, 64)
        b = compute_bundle(chain2, out, no_input, grid)
        a = fixed_point_map(b, np.zeros(2)).values
        c = fixed_point_map(b, np.random.default_rng(1).normal(size=(65, 2))).values
        assert np.array_equal(a, c)
        assert np.allclose(a, np.column_stack([1 + 2 * grid.times, np.full(65, 2.0)]), atol=1e-10)

    def test_short_window_contracts(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 5e-4, 64)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        rng = np.random.default_rng(2)
        d1, d2 = rng.uniform(-2, 2, (2, 65, 2))
        q = (fixed_point_map(b, d1) - fixed_point_map(b, d2)).sup_norm() / np.abs(d1 - d2).max()
        assert q <= 0.5

    def test_prefix_window(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 1e-3, 64)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        z = fixed_point_map(b, np.zeros(2), T=32)
        assert z.grid.n_steps == 32 and z.grid.t_end == grid.node(32)
        with pytest.raises(ValueError):
            fixed_point_map(b, np.zeros(2), T=1)


class TestContraction:
    def test_pairs_in_ball(self):
        grid = TimeGrid(0.0, 1.0, 50)
        d1, d2 = random_pairs(grid, 3, 2.5, 40, seed=4)
        assert d1.shape == (40, 51, 3)
        assert np.linalg.norm(d1, axis=-1).max() <= 2.5 + 1e-12
        assert np.linalg.norm(d2, axis=-1).max() <= 2.5 + 1e-12
        e1, _ = random_pairs(grid, 3, 2.5, 40, seed=4)
        assert np.array_equal(d1, e1)

    def test_zero_drift(self, chain2, no_input):
        grid = TimeGrid(0.0, 0.1, 64)
        b = compute_bundle(chain2, _zeros(grid), no_input, grid)
        assert contraction_modulus(b, 3.0).ell_measured == 0.0

    def test_short_window_passes(self, planar, unit_input, planar_output):
        b = compute_bundle(planar, planar_output, unit_input, TimeGrid(0.0, 5e-4, 256))
        rep = contraction_modulus(b, 3.0)
        assert rep.passed and rep.ell_measured <= 0.5

    def test_long_window_fails(self, planar, unit_input, planar_output):
        b = compute_bundle(planar, planar_output, unit_input, TimeGrid(0.0, 0.5, 256))
        rep = contraction_modulus(b, 3.0)
        assert not rep.passed and rep.ell_measured > 0.5
        assert set(rep.to_dict()) >= {"T", "R", "ell_target", "ell_measured", "n_pairs"}

    def test_pair_count(self, chain2, no_input):
        grid = TimeGrid(0.0, 0.1, 64)
        b = compute_bundle(chain2, _zeros(grid), no_input, grid)
        with pytest.raises(ValueError):
            contraction_modulus(b, 3.0, n_pairs=16)


class TestSearch:
    def test_planar(self, planar, unit_input, planar_output):
        found = find_contraction_time(planar, planar_output, unit_input, 3.0, 0.5, 1e-2)
        assert found.T <= 1e-2 and found.report.passed and found.pe.passed

    def test_zero_drift_first_candidate(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        found = find_contraction_time(chain2, out, no_input, 3.0, 0.5, 0.2)
        assert found.T == 0.2 and found.index == 0

    def test_monotone_in_radius(self, planar, unit_input, planar_output):
        t3 = find_contraction_time(planar, planar_output, unit_input, 3.0, 0.5, 1e-2).T
        t6 = find_contraction_time(planar, planar_output, unit_input, 6.0, 0.5, 1e-2).T
        assert t6 <= t3

    def test_ell_range(self, planar, unit_input, planar_output):
        with pytest.raises(ValueError):
            find_contraction_time(planar, planar_output, unit_input, 3.0, 0.7, 1e-2)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 63), st.floats(0.5, 2.5))
def test_liouville_triangular(k, x1):
    m = build_triangular(TriangularSpec(3, 1, ("u1", "y"), ("0", "0", "x2")))
    u = InputSignal(["1 + sin(t)"])
    out = SimulatedOutput(m, [x1, 0.0, 1.0], u)
    grid = TimeGrid(0.0, 0.5, 64)
    phi = fundamental_matrix(m, out, u, grid).values
    assert abs(np.linalg.det(phi[k]) - 1.0) < 1e-8
