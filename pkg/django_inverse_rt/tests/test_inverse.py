import numpy as np
from django.test import SimpleTestCase

from django_inverse_rt.exceptions import ShapeMismatchError
from django_inverse_rt.forward_rt import received_strength, trace_trials
from django_inverse_rt.geometry import TrialConfig, Vec3
from django_inverse_rt.gradcheck import central_difference_jacobian, max_relative_error
from django_inverse_rt.inverse import (
    MEASUREMENT_FLOOR,
    AdamState,
    EstimateOptions,
    EstimationTrace,
    IterationRecord,
    Measurement,
    StopCriteria,
    adam_step,
    check_stop,
    estimate,
    loss_and_grad,
    loss_stable,
    mre,
    nae_loss,
    stop_reason,
)
from django_inverse_rt.materials import SIGMA_MIN, load_material_table, slot_conductivities, slot_permittivities

from .scenes import FAST_RT, floor_and_wall_scene


def flat_records(count, loss=1.0, sigma=(0.1, 0.2)):
    return [IterationRecord(i=i + 1, loss=loss, sigma=sigma) for i in range(count)]


class NaeLossTest(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(nae_loss([[1.0, 1.0]], [[0.5, 0.5]]), 0.5)
        self.assertEqual(nae_loss([[1.0, 1.0], [2.0]], [[0.5, 0.5], [1.0]]), 1.0)
        self.assertEqual(nae_loss([[1.0, 2.0]], [[1.0, 2.0]]), 0.0)

    def test_normalized_by_measurement(self):
        """Overshooting a measurement by 2x costs 1, undershooting by half costs 0.5"""
        self.assertEqual(nae_loss([[1.0]], [[2.0]]), 1.0)
        self.assertEqual(nae_loss([[2.0]], [[1.0]]), 0.5)

    def test_floor(self):
        """Zero measurements are floored before dividing"""
        self.assertAlmostEqual(nae_loss([[0.0]], [[MEASUREMENT_FLOOR * 2]]), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            nae_loss([[1.0, 1.0]], [[1.0]])
        with self.assertRaises(ShapeMismatchError):
            nae_loss([[1.0]], [[1.0], [1.0]])


class MeasurementTest(SimpleTestCase):
    def test_floor_and_read_only(self):
        measurement = Measurement([0.0, 1e-3])
        self.assertEqual(measurement.to_list(), [MEASUREMENT_FLOOR, 1e-3])
        with self.assertRaises(ValueError):
            measurement.strengths[0] = 1.0

    def test_rejects_negative(self):
        with self.assertRaises(ShapeMismatchError):
            Measurement([-1.0])


class MreTest(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(mre([1.0, 1.0], [2.0, 2.0]), 0.5)
        self.assertEqual(mre([0.03, 0.06], [0.03, 0.06]), 0.0)
        self.assertAlmostEqual(mre([0.033, 0.06], [0.03, 0.06]), 0.05)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            mre([1.0], [1.0, 2.0])


class AdamStepTest(SimpleTestCase):
    def test_first_step_moves_by_lr(self):
        """Bias correction makes the first step lr * sign(g)"""
        options = EstimateOptions()
        sigma, state = adam_step(AdamState.fresh([1.0, 1.0]), [2.0, -0.5], options)
        np.testing.assert_allclose(sigma, [1.0 - 1e-3, 1.0 + 1e-3], rtol=0, atol=1e-10)
        self.assertEqual(state.t, 1)

    def test_zero_gradient_keeps_sigma(self):
        sigma, _ = adam_step(AdamState.fresh([0.5]), [0.0], EstimateOptions())
        self.assertEqual(sigma.tolist(), [0.5])

    def test_clamped_to_bounds(self):
        sigma, _ = adam_step(AdamState.fresh([SIGMA_MIN]), [1.0], EstimateOptions())
        self.assertEqual(sigma.tolist(), [SIGMA_MIN])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            adam_step(AdamState.fresh([1.0, 1.0]), [1.0], EstimateOptions())


class StopRuleTest(SimpleTestCase):
    def test_needs_full_window(self):
        """Stable loss and sigma stop only after patience + 1 records"""
        criteria = StopCriteria(patience=50)
        self.assertFalse(check_stop(EstimationTrace(flat_records(50)), criteria))
        trace = EstimationTrace(flat_records(51))
        self.assertTrue(check_stop(trace, criteria))
        self.assertEqual(stop_reason(trace, criteria), "converged")

    def test_loss_jump_resets(self):
        criteria = StopCriteria(patience=3)
        records = flat_records(4)
        records[-1] = IterationRecord(i=4, loss=1.1, sigma=(0.1, 0.2))
        self.assertFalse(check_stop(EstimationTrace(records), criteria))

    def test_sigma_motion_resets(self):
        criteria = StopCriteria(patience=3)
        records = flat_records(4)
        records[1] = IterationRecord(i=2, loss=1.0, sigma=(0.1, 0.2005))
        self.assertFalse(check_stop(EstimationTrace(records), criteria))
        self.assertTrue(loss_stable(EstimationTrace(records), criteria))

    def test_loss_settles_while_sigma_drifts(self):
        """Loss changes below alpha count as stable even when sigma keeps moving"""
        criteria = StopCriteria(patience=3)
        records = [IterationRecord(i=i, loss=1e-5 - i * 2e-6, sigma=(0.1 + i * 1e-3,)) for i in range(1, 5)]
        trace = EstimationTrace(records)
        self.assertTrue(loss_stable(trace, criteria))
        self.assertIsNone(stop_reason(trace, criteria))
        self.assertFalse(loss_stable(EstimationTrace(records[:3]), criteria))

    def test_max_iter(self):
        criteria = StopCriteria(max_iter=5)
        records = [IterationRecord(i=i, loss=float(i), sigma=(0.1,)) for i in range(1, 6)]
        trace = EstimationTrace(records)
        self.assertTrue(check_stop(trace, criteria))
        self.assertEqual(stop_reason(trace, criteria), "max_iter")

    def test_invalid_criteria(self):
        with self.assertRaises(ValueError):
            StopCriteria(patience=0)


class EstimateTest(SimpleTestCase):
    def setUp(self):
        table = load_material_table()
        self.scene = floor_and_wall_scene()
        self.truth = slot_conductivities(table, self.scene.material_names, 3.5)
        self.eps = slot_permittivities(table, self.scene.material_names)
        trial = TrialConfig(Vec3(-2, 0, 1.5), (Vec3(1, 1, 1.0), Vec3(-3, -2, 2.0), Vec3(2, -3, 1.2)))
        self.trials = [trial]
        self.traces = trace_trials(self.scene, self.trials, FAST_RT)
        self.measured = [received_strength(t, self.truth, self.eps, FAST_RT) for t in self.traces]

    def test_gradient_matches_finite_differences(self):
        sigma = self.truth * 2.0
        _, gradient = loss_and_grad(self.traces, sigma, self.eps, FAST_RT, self.measured)
        numeric = central_difference_jacobian(
            lambda s: loss_and_grad(self.traces, s, self.eps, FAST_RT, self.measured)[0], sigma
        )
        self.assertLess(max_relative_error(gradient, numeric), 1e-4)

    def test_truth_is_a_fixed_point(self):
        """Starting at the truth gives zero loss and stops after patience + 1 records"""
        sigma, trace = estimate(
            self.scene, self.trials, self.measured, self.truth,
            eps=self.eps, config=FAST_RT, traces=self.traces, truth=self.truth,
        )
        self.assertEqual(sigma.values.tobytes(), self.truth.tobytes())
        self.assertEqual(len(trace), 51)
        self.assertEqual(trace.stop_reason, "converged")
        self.assertEqual(trace.losses[-1], 0.0)
        self.assertEqual(trace.mres[-1], 0.0)

    def test_max_iter_and_callback(self):
        seen = []
        _, trace = estimate(
            self.scene, self.trials, self.measured, self.truth * 2.0,
            eps=self.eps, config=FAST_RT, traces=self.traces,
            criteria=StopCriteria(max_iter=7), on_iteration=seen.append,
        )
        self.assertEqual(len(trace), 7)
        self.assertEqual([r.i for r in seen], list(range(1, 8)))
        self.assertEqual(trace.stop_reason, "max_iter")
        self.assertIsNone(trace.mres[0])
        self.assertLess(trace.losses[-1], trace.losses[0])

    def test_deterministic(self):
        runs = [
            estimate(
                self.scene, self.trials, self.measured, self.truth * 2.0,
                eps=self.eps, config=FAST_RT, criteria=StopCriteria(max_iter=5),
            )[1]
            for _ in range(2)
        ]
        self.assertEqual([r.sigma for r in runs[0].records], [r.sigma for r in runs[1].records])

    def test_measurement_count_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            estimate(self.scene, self.trials, [], self.truth, eps=self.eps, config=FAST_RT, traces=self.traces)

    def test_csv_round_trip(self):
        _, trace = estimate(
            self.scene, self.trials, self.measured, self.truth * 2.0,
            eps=self.eps, config=FAST_RT, traces=self.traces, truth=self.truth,
            criteria=StopCriteria(max_iter=3),
        )
        text = trace.to_csv()
        self.assertTrue(text.startswith("iter,loss,mre,sigma_1,sigma_2,t_forward_s"))
        restored = EstimationTrace.from_csv(text)
        self.assertEqual([r.i for r in restored.records], [1, 2, 3])
        np.testing.assert_allclose(restored.records[-1].sigma, trace.records[-1].sigma, rtol=1e-11)
        self.assertEqual(set(trace.mean_timings()), {"forward", "gradient", "update"})
