"""Shooting solver, receding-horizon loop, and stability bookkeeping."""

import numpy as np
import pytest

from koopman_mpc.dictionary import monomial_dictionary
from koopman_mpc.dynamics import (
    Box,
    SampledDataMap,
    Trajectory,
    linear_system,
    polynomial_system,
    van_der_pol,
)
from koopman_mpc.edmd import BilinearSurrogate, fit, sample_states
from koopman_mpc.errors import (
    DegenerateIndexError,
    DimensionError,
    InfeasibleError,
)
from koopman_mpc.mpc import (
    GrowthBounds,
    MpcProblem,
    SolverConfig,
    StageCost,
    _Shooting,
    admissible,
    closed_loop_run,
    estimate_growth_bounds,
    mpc_feedback,
    practical_stability_check,
    rollout_cost,
    solve_ocp,
    suboptimality_index,
)
from koopman_mpc.rkf45 import IntegratorConfig

from oracles import fd_gradient, grid_search_two_step, riccati_receding, zoh_discretize

A2 = np.array([[0.0, 1.0], [-1.0, -0.4]])
B2 = np.array([[0.0], [1.0]])
WIDE_U = Box([-50.0], [50.0])


@pytest.fixture(scope="module")
def linear_plant():
    return SampledDataMap(linear_system(A2, B2), 0.1, IntegratorConfig(1e-11, 1e-13))


@pytest.fixture(scope="module")
def linear_problem(linear_plant):
    cost = StageCost(np.eye(2), np.array([[0.1]]))
    return MpcProblem(
        model=linear_plant, cost=cost, horizon=8, control_box=WIDE_U
    )


@pytest.fixture(scope="module")
def vdp_surrogate():
    dictionary = monomial_dictionary(2, 3)
    domain = Box([-2.0, -2.0], [2.0, 2.0])
    estimate = fit(dictionary, van_der_pol(), sample_states(domain, 400, 5))
    return BilinearSurrogate(estimate, dictionary, dt=0.05)


class TestStageCost:
    def test_value_and_floor(self):
        cost = StageCost(np.diag([1.0, 2.0]), np.array([[0.5]]))
        assert cost([1.0, 1.0], [2.0]) == pytest.approx(1 + 2 + 0.5 * 4)
        assert cost.state_term([1.0, 1.0]) == pytest.approx(3.0)
        assert cost([1.0, 1.0], [0.0]) == cost.state_term([1.0, 1.0])

    def test_rejects_indefinite_weights(self):
        with pytest.raises(ValueError, match="positive definite"):
            StageCost(np.diag([1.0, 0.0]), np.eye(1))
        with pytest.raises(ValueError, match="positive definite"):
            StageCost(np.eye(2), np.array([[-1.0]]))
        with pytest.raises(ValueError, match="symmetric"):
            StageCost(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(1))
        with pytest.raises(DimensionError):
            StageCost(np.ones((2, 3)), np.eye(1))


class TestProblem:
    def test_tightening_applies_only_to_surrogates(self, vdp_surrogate):
        box = Box([-2.0, -2.0], [2.0, 2.0])
        cost = StageCost(np.eye(2), np.eye(1))
        nominal = MpcProblem(
            model=SampledDataMap(van_der_pol(), 0.05),
            cost=cost,
            horizon=3,
            control_box=Box([-5.0], [5.0]),
            state_box=box,
            tightening=0.25,
        )
        assert nominal.applicable_state_box is box
        surrogate = MpcProblem(
            model=vdp_surrogate,
            cost=cost,
            horizon=3,
            control_box=Box([-5.0], [5.0]),
            state_box=box,
            tightening=0.25,
        )
        np.testing.assert_array_equal(
            surrogate.applicable_state_box.hi, [1.75, 1.75]
        )

    def test_validation(self, linear_plant):
        cost = StageCost(np.eye(2), np.eye(1))
        with pytest.raises(ValueError):
            MpcProblem(model=linear_plant, cost=cost, horizon=0, control_box=WIDE_U)
        with pytest.raises(ValueError):
            MpcProblem(
                model=linear_plant,
                cost=cost,
                horizon=2,
                control_box=WIDE_U,
                tightening=-1.0,
            )
        with pytest.raises(DimensionError):
            MpcProblem(
                model=linear_plant,
                cost=cost,
                horizon=2,
                control_box=Box([-1.0, -1.0], [1.0, 1.0]),
            )


class TestRolloutCost:
    def test_matches_manual_accumulation(self, linear_plant):
        cost = StageCost(np.eye(2), np.array([[0.3]]))
        controls = np.array([[0.5], [-0.2], [0.1]])
        x0 = np.array([1.0, 0.0])
        total, states = rollout_cost(linear_plant, cost, x0, controls)
        assert states.shape == (4, 2)
        manual = sum(cost(states[k], controls[k]) for k in range(3))
        assert total == pytest.approx(manual, rel=1e-12)

    def test_cost_convention_has_no_dt_factor_or_terminal_term(self, linear_plant):
        # one step: J = l(x0, u0) only; the successor state is not charged
        cost = StageCost(np.eye(2), np.array([[0.3]]))
        x0 = np.array([1.0, 0.0])
        total, _ = rollout_cost(linear_plant, cost, x0, np.array([[0.7]]))
        assert total == pytest.approx(cost(x0, [0.7]), rel=1e-14)


class TestShootingGradient:
    def test_adjoint_gradient_matches_finite_differences_exact_model(
        self, vdp_surrogate
    ):
        cost = StageCost(np.eye(2), np.array([[0.05]]))
        shoot = _Shooting(
            vdp_surrogate, cost, np.array([0.9, -0.3]), 4, 1, None, 1e-8
        )
        z = np.array([0.4, -0.6, 0.2, 0.1])
        _, grad = shoot.objective_and_gradient(z)
        fd = fd_gradient(lambda w: shoot.objective_and_gradient(w)[0], z, eps=1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)

    def test_adjoint_gradient_matches_finite_differences_integrator_model(
        self, linear_plant
    ):
        cost = StageCost(np.eye(2), np.array([[0.1]]))
        shoot = _Shooting(linear_plant, cost, np.array([1.0, 0.5]), 3, 1, None, 1e-8)
        z = np.array([0.3, -0.2, 0.7])
        _, grad = shoot.objective_and_gradient(z)
        fd = fd_gradient(lambda w: shoot.objective_and_gradient(w)[0], z, eps=1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_penalty_term_enters_the_gradient(self, vdp_surrogate):
        cost = StageCost(np.eye(2), np.array([[0.05]]))
        box = Box([-0.2, -0.2], [0.2, 0.2])
        shoot = _Shooting(vdp_surrogate, cost, np.array([0.1, 0.0]), 3, 1, box, 1e-8)
        shoot.weight = 1e4
        z = np.array([5.0, 5.0, 5.0])  # drives the velocity out of the box
        value, grad = shoot.objective_and_gradient(z)
        data, _ = shoot.evaluate(z)
        assert data["penalty"] > 0
        assert value == pytest.approx(
            data["raw_cost"] + 1e4 * data["penalty"], rel=1e-12
        )
        fd = fd_gradient(lambda w: shoot.objective_and_gradient(w)[0], z, eps=1e-6)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-5)


class TestSolveOcp:
    def test_matches_receding_horizon_riccati(self, linear_problem):
        x0 = np.array([1.0, -0.5])
        sol = solve_ocp(linear_problem, x0)
        assert sol.feasible
        ad, bd = zoh_discretize(A2, B2, 0.1)
        gain, cost_mat = riccati_receding(ad, bd, np.eye(2), [[0.1]], 8)
        np.testing.assert_allclose(sol.controls[0], gain @ x0, atol=2e-5)
        assert sol.value == pytest.approx(float(x0 @ cost_mat @ x0), rel=1e-7)

    def test_matches_grid_search_with_active_bounds(self):
        plant = SampledDataMap(
            linear_system([[1.0]], [[1.0]]), 0.1, IntegratorConfig(1e-11, 1e-13)
        )
        cost = StageCost([[1.0]], [[0.5]])
        prob = MpcProblem(
            model=plant, cost=cost, horizon=2, control_box=Box([-1.0], [1.0])
        )
        x0 = np.array([5.0])
        sol = solve_ocp(prob, x0)

        def batched_step(xs, us):
            return plant.step_many(xs[:, None], us[:, None])[:, 0]

        def stage(xs, us):
            return xs * xs + 0.5 * us * us

        u_star, j_star = grid_search_two_step(batched_step, stage, x0, -1.0, 1.0, 1e-4)
        assert abs(float(sol.controls[0, 0]) - u_star) <= 1e-3
        assert abs(sol.value - j_star) <= 1e-6
        # x0 = 5 pushes the unconstrained optimum past the lower control bound
        assert u_star == pytest.approx(-1.0)

    def test_respects_control_bounds(self, linear_plant):
        cost = StageCost(np.eye(2), np.array([[1e-6]]))
        prob = MpcProblem(
            model=linear_plant, cost=cost, horizon=4, control_box=Box([-0.3], [0.3])
        )
        sol = solve_ocp(prob, np.array([1.5, 0.0]))
        assert np.all(np.abs(sol.controls) <= 0.3 + 1e-12)

    def test_infeasible_initial_state_raises(self, vdp_surrogate):
        prob = MpcProblem(
            model=vdp_surrogate,
            cost=StageCost(np.eye(2), np.eye(1)),
            horizon=3,
            control_box=Box([-5.0], [5.0]),
            state_box=Box([-2.0, -2.0], [2.0, 2.0]),
            tightening=0.5,
        )
        with pytest.raises(InfeasibleError, match="outside"):
            solve_ocp(prob, np.array([1.9, 0.0]))

    def test_unreachable_state_box_raises(self):
        # unit drift against millinewton control authority: the state must
        # leave the box next step no matter what the solver tries
        pushed = polynomial_system(
            1, drift_terms=[[(1.0, (0,))]], input_terms=[[[(1.0, (0,))]]]
        )
        plant = SampledDataMap(pushed, 0.1)
        prob = MpcProblem(
            model=plant,
            cost=StageCost([[1.0]], [[1.0]]),
            horizon=2,
            control_box=Box([-1e-3], [1e-3]),
            state_box=Box([-1.0], [1.0]),
        )
        with pytest.raises(InfeasibleError, match="no feasible"):
            solve_ocp(prob, np.array([0.95]), config=SolverConfig(restarts=1))

    def test_warm_start_length_is_checked(self, linear_problem):
        with pytest.raises(DimensionError):
            solve_ocp(linear_problem, np.array([1.0, 0.0]), warm_start=np.zeros(3))

    def test_diagnostics_are_reported(self, linear_problem):
        sol = solve_ocp(linear_problem, np.array([0.5, 0.5]))
        for key in (
            "start",
            "iterations",
            "converged",
            "gradient_norm",
            "penalty_residual",
            "objective_evaluations",
        ):
            assert key in sol.diagnostics
        assert sol.diagnostics["start"] == "zero"
        assert sol.diagnostics["penalty_residual"] == 0.0


class TestClosedLoop:
    def test_tracks_riccati_feedback_on_linear_plant(self, linear_plant, linear_problem):
        x0 = np.array([1.0, -0.5])
        traj, values = closed_loop_run(linear_plant, linear_problem, x0, 15)
        assert len(traj) == 15
        assert traj.diagnostic is None
        ad, bd = zoh_discretize(A2, B2, 0.1)
        gain, _ = riccati_receding(ad, bd, np.eye(2), [[0.1]], 8)
        x = x0
        for k in range(15):
            np.testing.assert_allclose(traj.states[k], x, atol=2e-4)
            x = (ad + bd @ gain) @ x
        assert values.shape == (15,)
        assert np.all(np.diff(values) < 0)

    def test_two_runs_are_bit_identical(self, linear_plant, linear_problem):
        x0 = np.array([0.8, 0.1])
        t1, v1 = closed_loop_run(linear_plant, linear_problem, x0, 5)
        t2, v2 = closed_loop_run(linear_plant, linear_problem, x0, 5)
        np.testing.assert_array_equal(t1.states, t2.states)
        np.testing.assert_array_equal(t1.controls, t2.controls)
        np.testing.assert_array_equal(v1, v2)

    def test_infeasibility_truncates_with_diagnostic(self, vdp_surrogate):
        prob = MpcProblem(
            model=vdp_surrogate,
            cost=StageCost(np.eye(2), np.eye(1)),
            horizon=3,
            control_box=Box([-5.0], [5.0]),
            state_box=Box([-2.0, -2.0], [2.0, 2.0]),
            tightening=0.5,
        )
        plant = SampledDataMap(van_der_pol(), 0.05)
        traj, values = closed_loop_run(plant, prob, np.array([1.9, 0.0]), 4)
        assert len(traj) == 0
        assert "infeasible at step 0" in traj.diagnostic
        assert values.size == 0

    def test_stage_costs_recorded(self, linear_plant, linear_problem):
        traj, _ = closed_loop_run(linear_plant, linear_problem, [1.0, 0.0], 3)
        assert traj.costs.shape == (3,)
        manual = [
            linear_problem.cost(traj.states[k], traj.controls[k]) for k in range(3)
        ]
        np.testing.assert_allclose(traj.costs, manual, rtol=1e-12)


class TestAdmissible:
    def test_control_box_violations_rejected(self, linear_problem):
        assert admissible(linear_problem, [0.1, 0.1], np.zeros((8, 1)))
        too_big = np.full((8, 1), 60.0)
        assert not admissible(linear_problem, [0.1, 0.1], too_big)

    def test_state_box_checked_along_rollout(self, linear_plant):
        prob = MpcProblem(
            model=linear_plant,
            cost=StageCost(np.eye(2), np.eye(1)),
            horizon=2,
            control_box=WIDE_U,
            state_box=Box([-0.25, -0.25], [0.25, 0.25]),
        )
        assert not admissible(prob, [0.2, 0.2], np.full((2, 1), 40.0))
        assert admissible(prob, [0.1, 0.0], np.zeros((2, 1)))


class TestGrowthBounds:
    def test_estimated_bounds_are_monotone_and_floored_at_one(self, linear_problem):
        states = np.array([[1.0, 0.0], [0.0, 1.0], [-0.7, 0.4], [0.0, 0.0]])
        bounds = estimate_growth_bounds(linear_problem, states, k_max=4)
        assert bounds.samples_skipped == 1  # the origin sample
        assert bounds.samples_used == 3
        vals = bounds.values
        assert vals.shape == (4,)
        assert np.all(np.diff(vals) >= 0)
        assert np.all(vals >= 1.0)
        # V_1 = l*(x) exactly: the control-free floor is attained at u = 0
        assert bounds.bound(1) == 1.0

    def test_bound_index_range(self):
        bounds = GrowthBounds(np.array([1.0, 1.5]), 1, 0)
        assert bounds.k_max == 2
        assert bounds.bound(2) == 1.5
        with pytest.raises(IndexError):
            bounds.bound(3)
        with pytest.raises(IndexError):
            bounds.bound(0)


class TestSuboptimalityIndex:
    def test_unit_bounds_give_one_exactly(self):
        assert suboptimality_index([1.0, 1.0, 1.0], 3) == 1.0
        assert suboptimality_index([1.0, 1.0], 2) == 1.0

    def test_two_two_gives_two_thirds_exactly(self):
        assert suboptimality_index([1.0, 2.0, 2.0], 3) == 2.0 / 3.0

    def test_nondecreasing_for_geometric_profile(self):
        profile = [(1 - 0.8**k) / 0.2 for k in range(1, 21)]
        alphas = [suboptimality_index(profile, n) for n in range(2, 21)]
        assert all(b >= a for a, b in zip(alphas, alphas[1:]))
        assert all(0 < a <= 1 for a in alphas)

    def test_growth_bounds_object_is_accepted(self):
        bounds = GrowthBounds(np.array([1.0, 2.0, 2.0]), 1, 0)
        assert suboptimality_index(bounds, 3) == 2.0 / 3.0

    def test_degenerate_denominator_raises(self):
        with pytest.raises(DegenerateIndexError):
            suboptimality_index([1.0, 1.0, 2.0], 3, omega=-1.0)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="at least 2"):
            suboptimality_index([1.0, 2.0], 1)
        with pytest.raises(IndexError):
            suboptimality_index([1.0, 2.0], 3)
        with pytest.raises(ValueError, match="below one"):
            suboptimality_index([1.0, 0.5, 2.0], 3)


class TestPracticalStability:
    def _traj(self, norms):
        states = np.array(norms, dtype=float)[:, None]
        return Trajectory(states, np.zeros((len(norms) - 1, 0)), dt=1.0)

    def test_entry_is_the_last_excursion_plus_one(self):
        verdict = practical_stability_check(
            self._traj([1.0, 0.04, 0.2, 0.04, 0.03]), radius=0.05
        )
        assert verdict.entered
        assert verdict.entry_step == 3
        assert verdict.post_entry_max_norm == pytest.approx(0.04)
        assert verdict.holds

    def test_never_entering_fails(self):
        verdict = practical_stability_check(self._traj([1.0, 0.5, 0.2]), radius=0.05)
        assert not verdict.entered
        assert verdict.entry_step is None
        assert not verdict.holds

    def test_settle_fraction_deadline(self):
        traj = self._traj([1.0, 1.0, 1.0, 0.01, 0.01])
        assert practical_stability_check(traj, 0.05, settle_fraction=1.0).holds
        assert not practical_stability_check(traj, 0.05, settle_fraction=0.5).holds

    def test_validation(self):
        with pytest.raises(ValueError):
            practical_stability_check(self._traj([1.0, 0.5]), radius=0.0)
        with pytest.raises(ValueError):
            practical_stability_check(self._traj([1.0, 0.5]), 0.1, settle_fraction=0.0)


class TestConfig:
    def test_solver_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SolverConfig(gradient_tol=0.0)
        with pytest.raises(ValueError):
            SolverConfig(penalty_weights=())
        with pytest.raises(ValueError):
            SolverConfig(penalty_weights=(1e4, -1.0))

    def test_feedback_returns_first_control(self, linear_problem):
        u, sol = mpc_feedback(linear_problem, np.array([1.0, -0.5]))
        np.testing.assert_array_equal(u, sol.controls[0])
