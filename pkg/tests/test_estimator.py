import numpy as np
import pytest

from obsv.estimator import (
    estimate_general,
    estimate_known_bound,
    forward_propagate,
    iterate_step,
)
from obsv.numerics import TimeGrid, Trajectory
from obsv.reconstruction import compute_bundle
from obsv.system import SimulatedOutput, TriangularSpec, build_triangular, simulate_truth

from conftest import X0


@pytest.fixture(scope="module")
def case_one():
    from conftest import PLANAR
    from obsv.system import InputSignal
    model, u = build_triangular(PLANAR), InputSignal.constant(1.0)
    out = SimulatedOutput(model, X0, u)
    run = estimate_known_bound(model, out, u, 3.0, 0.5, n_iters=15, z_init=[0.0, 1.0])
    return model, u, out, run


@pytest.fixture(scope="module")
def scalar7():
    m = build_triangular(TriangularSpec(1, 0, (), ("0",)))
    grid = TimeGrid(0.0, 1.0, 64)
    return m, Trajectory(grid, np.full((65, 1), 7.0))


class TestCaseI:
    def test_converges(self, case_one):
        *_, run = case_one
        assert not run.failed and run.converged
        errs = [np.linalg.norm(xi - X0) for xi in run.estimates]
        first = next(i for i, e in enumerate(errs) if e < 1e-3)
        assert first < 12
        assert errs[-1] < 1e-3

    def test_radii_double(self, case_one):
        *_, run = case_one
        assert all(b == 2 * a for a, b in zip(run.radii, run.radii[1:]))
        assert run.radii[0] == 3.0

    def test_times_decrease(self, case_one):
        *_, run = case_one
        assert run.times[0] <= 1e-2
        assert all(b < a for a, b in zip(run.times, run.times[1:]))

    def test_certificates(self, case_one):
        *_, run = case_one
        assert all(c is None or c <= 0.5 for c in run.certificates)

    def test_error_chain(self, case_one):
        _, _, out, run = case_one
        z1 = run.iterates[0]
        x = out.truth(z1.grid.refine(2)).values[::2]
        base = float(np.max(np.linalg.norm(z1.values - x, axis=1)))
        for nu in range(1, len(run.estimates)):
            assert np.linalg.norm(run.estimates[nu] - X0) <= 0.5 ** nu * base

    def test_nesting(self, case_one):
        _, _, out, run = case_one
        prev = None
        for z, t in zip(run.iterates, run.times):
            g = z.grid
            x = Trajectory(g, out.truth(g.refine(2)).values[::2])
            err = (z - x).sup_norm(b=t)
            if prev is not None:
                # quadrature slack plus the output's rounding noise, which the
                # reconstruction amplifies like 1/window
                assert err <= 0.5 * prev + 10 * g.h ** 2 + 1e-12 / (g.t_end - g.t_start)
            prev = err

    def test_bounded_iterates(self, case_one):
        *_, run = case_one
        assert not any("left the ball" in d for d in run.diagnostics)

    def test_table(self, case_one):
        *_, run = case_one
        rows = run.table()
        assert [r["nu"] for r in rows] == list(range(1, len(rows) + 1))
        assert rows[0]["delta"] is None and rows[1]["delta"] > 0

    def test_deterministic(self, case_one):
        model, u, out, run = case_one
        again = estimate_known_bound(model, SimulatedOutput(model, X0, u), u, 3.0, 0.5,
                                     n_iters=15, z_init=[0.0, 1.0])
        assert run.times == again.times
        for a, b in zip(run.estimates, again.estimates):
            assert np.array_equal(a, b)

    def test_scalar_dead_beat(self, scalar7, no_input):
        m, y = scalar7
        run = estimate_known_bound(m, y, no_input, 10.0, n_iters=4, t_hi=0.5)
        assert run.estimates[0][0] == 0.0
        assert run.estimates[1][0] == pytest.approx(7.0, abs=1e-12)

    def test_chain_one_step_t0_readout(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        run = estimate_known_bound(chain2, out, no_input, 3.0, n_iters=3, readout="t0")
        assert np.max(np.abs(run.estimates[1] - [1.0, 2.0])) < 1e-6

    def test_validation(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        with pytest.raises(ValueError):
            estimate_known_bound(chain2, out, no_input, 3.0, 0.7)
        with pytest.raises(ValueError):
            estimate_known_bound(chain2, out, no_input, 0.0)
        with pytest.raises(ValueError):
            estimate_known_bound(chain2, out, no_input, 3.0, readout="end")

    def test_grid_too_coarse_marks_failure(self, planar, unit_input):
        # a record this sparse cannot host a contracting window
        grid = TimeGrid(0.0, 1.0, 8)
        _, y = simulate_truth(planar, X0, unit_input, grid)
        run = estimate_known_bound(planar, y, unit_input, 3.0, t_hi=1.0)
        assert run.failed and run.diagnostics


class TestIterateStep:
    def test_truth_is_fixed(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 5e-4, 128)
        b = compute_bundle(planar, planar_output, unit_input, grid)
        x = Trajectory(grid, planar_output.truth(grid.refine(2)).values[::2])
        res = iterate_step(b, x)
        assert (res.z - x).sup_norm() <= 10 * grid.h ** 2

    def test_linear_exact(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        grid = TimeGrid(0.0, 0.1, 64)
        b = compute_bundle(chain2, out, no_input, grid)
        guess = Trajectory(grid, np.random.default_rng(0).normal(size=(65, 2)))
        res = iterate_step(b, guess)
        assert np.allclose(res.z.values[:, 0], 1 + 2 * grid.times, atol=1e-10)
        again = iterate_step(b, res.z)
        assert again.ratio is None

    def test_needs_cover(self, chain2, no_input):
        out = SimulatedOutput(chain2, [1.0, 2.0], no_input)
        b = compute_bundle(chain2, out, no_input, TimeGrid(0.0, 0.1, 64))
        short = Trajectory(TimeGrid(0.0, 0.05, 8), np.zeros((9, 2)))
        with pytest.raises(ValueError):
            iterate_step(b, short)


class TestCaseII:
    def test_diagonal_bound(self, planar, unit_input, planar_output):
        run = estimate_general(planar, planar_output, unit_input, n_iters=6)
        assert len(run.estimates) == 6
        assert all(e is not None for e in run.estimates)
        for nu in range(4, 7):
            err = np.linalg.norm(run.estimates[nu - 1] - X0)
            assert err <= 0.5 ** (nu - 1) * (nu + 3)

    def test_scalar(self, scalar7, no_input):
        m, _ = scalar7
        run = estimate_general(m, SimulatedOutput(m, [7.0], no_input), no_input, n_iters=9,
                               t_hi=0.5)
        assert run.estimates[0][0] == 0.0
        for xi in run.estimates[1:]:
            assert xi[0] == pytest.approx(7.0, abs=1e-12)
        assert len(run.branches) == 9

    def test_branch_deltas_shrink(self, planar, unit_input, planar_output):
        run = estimate_general(planar, planar_output, unit_input, n_iters=6)
        d = run.branches[-1].sequence.deltas
        assert all(b < a for a, b in zip(d[1:], d[2:]))


class TestForwardPropagate:
    def test_true_state(self, planar, unit_input, planar_output):
        grid = TimeGrid(0.0, 1.0, 1000)
        x = planar_output.truth(grid.refine(2)).values[::2]
        z = forward_propagate(planar, X0, planar_output, unit_input, grid)
        assert np.max(np.abs(z.values - x)) < 1e-9

    def test_final_estimate(self, case_one):
        model, u, out, run = case_one
        grid = TimeGrid(0.0, 1.0, 1000)
        x = Trajectory(grid, out.truth(grid.refine(2)).values[::2])
        devs = [(forward_propagate(model, xi, out, u, grid) - x).sup_norm() for xi in run.estimates]
        assert devs[-1] < 1e-2
        assert all(b <= a for a, b in zip(devs[2:], devs[3:]))
