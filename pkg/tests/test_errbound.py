"""Reference compressions, bound constants, and the error studies."""

import numpy as np
import pytest

from koopman_mpc.dictionary import (
    Monomial,
    ReciprocalExp,
    custom_dictionary,
    monomial_dictionary,
)
from koopman_mpc.dynamics import Box, SampledDataMap, linear_system, van_der_pol
from koopman_mpc.edmd import BilinearSurrogate, fit, sample_states
from koopman_mpc.errbound import (
    ERROR_CAP,
    build_test_points,
    c_tilde_constant,
    lipschitz_estimate,
    open_loop_error_study,
    operator_error,
    proportional_error_study,
    reference_compression,
)
from koopman_mpc.errors import CertificationError, EstimationError, InvarianceError

DOMAIN = Box([-2.0, -2.0], [2.0, 2.0])
U_BOX = Box([-1.0], [1.0])
U_GRID = [np.zeros(1), np.array([-1.0]), np.array([1.0])]


@pytest.fixture(scope="module")
def vdp_dict():
    return monomial_dictionary(2, 3)


class TestReferenceCompression:
    def test_analytic_mode_recovers_linear_generator(self):
        a = np.array([[0.0, 1.0], [-1.5, -0.2]])
        b = np.array([[0.0], [1.0]])
        ref = reference_compression(
            monomial_dictionary(2, 1), linear_system(a, b), DOMAIN
        )
        assert ref.mode == "analytic"
        assert ref.residual < 1e-10
        np.testing.assert_allclose(ref.drift[1:, 1:], a, atol=1e-12)
        np.testing.assert_allclose(ref.at([1.0])[1:, 0], b[:, 0], atol=1e-12)

    def test_analytic_mode_rejects_noninvariant_span(self, vdp_dict):
        # cubic terms of the oscillator map degree-3 monomials to degree 5
        with pytest.raises(InvarianceError, match="not invariant"):
            reference_compression(vdp_dict, van_der_pol(), DOMAIN)

    def test_empirical_mode_matches_plain_fit(self, vdp_dict):
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=500, seed=3
        )
        est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, 500, 3))
        np.testing.assert_array_equal(ref.drift, est.drift)
        np.testing.assert_array_equal(ref.inputs[0], est.inputs[0])
        assert ref.mode == "empirical"

    def test_empirical_mode_needs_d_ref(self, vdp_dict):
        with pytest.raises(EstimationError):
            reference_compression(vdp_dict, van_der_pol(), DOMAIN, mode="empirical")
        with pytest.raises(ValueError):
            reference_compression(vdp_dict, van_der_pol(), DOMAIN, mode="exact")

    def test_at_is_affine_in_the_control(self, vdp_dict):
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=200, seed=1
        )
        mid = ref.at([0.25])
        np.testing.assert_allclose(
            mid, 0.75 * ref.at([0.0]) + 0.25 * ref.at([1.0]), atol=1e-12
        )


class TestOperatorError:
    def test_zero_for_identical_generators(self, vdp_dict):
        est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, 300, 2))
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=300, seed=2
        )
        assert operator_error(est, ref, 0.05, U_GRID) == 0.0

    def test_decreases_with_more_data(self, vdp_dict):
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=20000, seed=0
        )
        errs = []
        for d in (20, 2000):
            est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, d, 0))
            errs.append(operator_error(est, ref, 0.05, U_GRID))
        assert errs[1] < errs[0]

    def test_needs_a_control_grid(self, vdp_dict):
        est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, 50, 2))
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=50, seed=2
        )
        with pytest.raises(ValueError):
            operator_error(est, ref, 0.05, [])


class TestLipschitz:
    def test_bounds_sampled_difference_quotients(self, vdp_dict):
        lip = lipschitz_estimate(vdp_dict, DOMAIN, n_pairs=200, seed=4)
        rng = np.random.default_rng(99)
        a = DOMAIN.sample(rng, 300)
        b = DOMAIN.sample(rng, 300)
        gaps = np.linalg.norm(a - b, axis=1)
        lifted = np.linalg.norm(vdp_dict.lift(a) - vdp_dict.lift(b), axis=1)
        assert np.all(lifted <= lip * gaps * (1 + 1e-9))

    def test_nondecreasing_in_pair_count(self, vdp_dict):
        small = lipschitz_estimate(vdp_dict, DOMAIN, n_pairs=50, seed=7)
        large = lipschitz_estimate(vdp_dict, DOMAIN, n_pairs=500, seed=7)
        assert large >= small

    def test_refuses_nonconforming_dictionary(self):
        obs = [
            Monomial((0, 0)),
            Monomial((1, 0)),
            Monomial((0, 1)),
            ReciprocalExp(0, shift=1.907),
        ]
        bad = custom_dictionary(2, obs)
        with pytest.raises(CertificationError, match="refused"):
            lipschitz_estimate(bad, DOMAIN)


class TestBoundPieces:
    def test_c_tilde_formula(self, vdp_dict):
        ref = reference_compression(
            vdp_dict, van_der_pol(), DOMAIN, mode="empirical", d_ref=100, seed=5
        )
        norm = ref.max_norm(U_GRID)
        got = c_tilde_constant(ref, 0.05, 0.01, U_GRID)
        assert got == pytest.approx(np.exp(0.05 * norm) + 0.01 + norm, rel=1e-12)

    def test_test_points_cover_decades_and_avoid_origin(self):
        states, controls = build_test_points(DOMAIN, U_BOX, 40, seed=11)
        assert states.shape == (40, 2)
        assert controls.shape == (40, 1)
        norms = np.linalg.norm(states, axis=1) + np.linalg.norm(controls, axis=1)
        assert np.all(norms > 0)
        # cyclic decade scaling: row 3 is a factor 1000 below row 0's scale
        magnitudes = np.linalg.norm(states, axis=1)
        assert magnitudes[3::4].max() < 1e-2 * magnitudes[0::4].max()


class TestProportionalStudy:
    def test_ratios_are_finite_and_positive(self, vdp_dict):
        plant = SampledDataMap(van_der_pol(), 0.05)
        est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, 2000, 6))
        sur = BilinearSurrogate(est, vdp_dict, 0.05)
        states, controls = build_test_points(DOMAIN, U_BOX, 60, seed=6)
        report = proportional_error_study(plant, sur, states, controls, 17.7, 6.1)
        assert report.sample_count == 60
        assert np.all(np.isfinite(report.ratios))
        assert report.max_ratio >= report.mean_ratio > 0
        assert report.max_ratio == np.max(report.ratios)

    def test_validation(self, vdp_dict):
        plant = SampledDataMap(van_der_pol(), 0.05)
        est = fit(vdp_dict, van_der_pol(), sample_states(DOMAIN, 100, 6))
        sur = BilinearSurrogate(est, vdp_dict, 0.05)
        ok_states = np.ones((3, 2))
        ok_controls = np.ones((3, 1))
        with pytest.raises(ValueError, match="one control per"):
            proportional_error_study(
                plant, sur, ok_states, np.ones((2, 1)), 1.0, 1.0
            )
        with pytest.raises(ValueError, match="positive"):
            proportional_error_study(plant, sur, ok_states, ok_controls, 0.0, 1.0)
        with pytest.raises(ValueError, match="excluded pair"):
            proportional_error_study(
                plant, sur, np.zeros((1, 2)), np.zeros((1, 1)), 1.0, 1.0
            )


class TestOpenLoopStudy:
    def test_report_shapes_and_time_average(self, vdp_dict):
        plant = SampledDataMap(van_der_pol(), 0.05)
        report = open_loop_error_study(
            plant,
            vdp_dict,
            DOMAIN,
            U_BOX,
            d_grid=[20, 200],
            n_init=5,
            horizon=6,
            seed=13,
        )
        assert report.mean_err.shape == (2, 6)
        assert report.max_err.shape == (2, 6)
        assert np.all(report.max_err >= report.mean_err)
        np.testing.assert_allclose(
            report.time_averaged_mean, report.mean_err.mean(axis=1)
        )
        rows = list(report.rows())
        assert len(rows) == 12
        assert rows[0][:2] == (20, 1)
        assert report.cap == ERROR_CAP

    def test_duplicate_d_values_rejected(self, vdp_dict):
        plant = SampledDataMap(van_der_pol(), 0.05)
        with pytest.raises(ValueError):
            open_loop_error_study(
                plant, vdp_dict, DOMAIN, U_BOX, [10, 10], 2, 3, seed=0
            )

    def test_thread_pool_matches_serial(self, vdp_dict):
        plant = SampledDataMap(van_der_pol(), 0.05)
        kwargs = dict(d_grid=[20, 60], n_init=3, horizon=4, seed=21)
        serial = open_loop_error_study(plant, vdp_dict, DOMAIN, U_BOX, **kwargs)
        pooled = open_loop_error_study(
            plant, vdp_dict, DOMAIN, U_BOX, jobs=2, **kwargs
        )
        np.testing.assert_array_equal(serial.mean_err, pooled.mean_err)
        np.testing.assert_array_equal(serial.max_err, pooled.max_err)
