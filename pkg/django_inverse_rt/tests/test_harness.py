import json
import tempfile
from pathlib import Path
from types import SimpleNamespace
from unittest import mock

from django.test import SimpleTestCase

from django_inverse_rt.exceptions import InverseRTError, TraceError
from django_inverse_rt.geometry import build_room_scene
from django_inverse_rt.harness import (
    SWEEP_COLUMNS,
    UNIDENTIFIED_FLAG,
    ExperimentConfig,
    compare_convergence,
    init_cdf_study,
    parse_arm,
    run_estimation,
    run_repeated,
    sweep,
    sweep_cell_config,
)
from django_inverse_rt.inverse import EstimationTrace, mre
from django_inverse_rt.materials import load_material_table, perturb_ground_truth
from django_inverse_rt.priors import itu_init
from django_inverse_rt.tasks import run_sweep_cell

SMALL_RT = {"u_ray": 4000, "depth": 1, "rx_radius": 1.5}


def small_config(out_dir, **changes):
    """Bare room, two receivers, single bounces and a short budget.

    The wide capture radius lets a coarse fan find every floor and wall bounce.
    """
    base = ExperimentConfig(
        label="small",
        scene="generated",
        num_objects=5,
        placement="random",
        n=2,
        m=1,
        rt=SMALL_RT,
        stop={"max_iter": 5, "patience": 2},
        out_dir=str(out_dir),
    )
    return base.replace(**changes)


class ExperimentConfigTest(SimpleTestCase):
    def test_validation(self):
        for bad in ({"init": "median"}, {"placement": "grid"}, {"placement": "file"}, {"n": 0}, {"vlm_mode": "cloud"}):
            with self.assertRaises(InverseRTError):
                ExperimentConfig(**bad)

    def test_unknown_fields(self):
        with self.assertRaisesRegex(InverseRTError, "rays"):
            ExperimentConfig.from_dict({"rays": 10})

    def test_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps({"label": "from_file", "n": 4, "rt": {"depth": 2}}))
            config = ExperimentConfig.load(path)
        self.assertEqual((config.label, config.n), ("from_file", 4))
        self.assertEqual(config.rt_config().depth, 2)
        with self.assertRaises(InverseRTError):
            ExperimentConfig.load("/nonexistent/config.json")

    def test_default_output_dir(self):
        self.assertEqual(ExperimentConfig(label="abc").output_dir().name, "abc")

    def test_bad_rt_block(self):
        with self.assertRaises(TraceError):
            ExperimentConfig(rt={"rays": 1}).rt_config()

    def test_sweep_cells(self):
        config = ExperimentConfig(label="base", out_dir="/tmp/base")
        self.assertEqual(sweep_cell_config(config, "depth", 2).rt_config().depth, 2)
        self.assertEqual(sweep_cell_config(config, "rays", 100).rt_config().u_ray, 100)
        cell = sweep_cell_config(config, "k", 12)
        self.assertEqual((cell.scene, cell.num_objects), ("generated", 12))
        self.assertEqual(cell.output_dir(), Path("/tmp/base/k_12"))
        with self.assertRaises(InverseRTError):
            sweep_cell_config(config, "lr", 1)

    def test_parse_arm(self):
        self.assertEqual(parse_arm("vlm:greedy"), ("vlm", "greedy"))
        with self.assertRaises(InverseRTError):
            parse_arm("vlm")


class RunEstimationTest(SimpleTestCase):
    def test_writes_run_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = run_estimation(small_config(tmp))
            out = Path(tmp)
            for name in ("config.json", "trace.csv", "plan.json", "prior.json", "convergence.dat", "report.json"):
                self.assertTrue((out / name).exists(), name)
            trace = EstimationTrace.from_csv((out / "trace.csv").read_text())
            saved = json.loads((out / "report.json").read_text())
        self.assertEqual(len(trace.records), report.iterations)
        self.assertEqual(report.iterations, 5)
        self.assertEqual(report.stop_reason, "max_iter")
        self.assertEqual(saved["final_mre"], report.final_mre)
        self.assertEqual(len(report.sigma_final), 5)
        self.assertEqual(report.init_sources[0], "itu:Brick")
        self.assertFalse([flag for flag in report.flags if flag.startswith("no path touches")])
        self.assertGreater(report.estimation.losses[0], 0.0)
        self.assertGreaterEqual(report.timing.per_iter_s, 0.0)

    def test_loss_falls_from_a_distant_start(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = run_estimation(small_config(tmp, init="uniform"), write=False)
        losses = report.estimation.losses
        self.assertFalse([flag for flag in report.flags if flag.startswith("no path touches")])
        self.assertGreater(losses[0], 0.0)
        for before, after in zip(losses[:-1], losses[1:]):
            self.assertLess(after, before)
        self.assertLess(report.final_mre, report.initial_mre)

    def test_timed_phases_cover_the_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = run_estimation(small_config(tmp, stop={"max_iter": 20, "patience": 2}), write=False)
        timing = report.timing.to_dict()
        self.assertTrue(all(value >= 0.0 for value in timing.values()), timing)
        self.assertGreater(report.timing.estimate_s, 0.0)
        self.assertLessEqual(abs(report.total_seconds - report.timing.phases_s), 0.1 * report.total_seconds)

    def test_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = run_estimation(small_config(Path(tmp) / "a"))
            second = run_estimation(small_config(Path(tmp) / "b"))
        self.assertEqual(first.sigma_final, second.sigma_final)
        self.assertEqual(first.estimation.losses, second.estimation.losses)

    def test_truth_init_stays_put(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = run_estimation(small_config(tmp, init="truth", stop={}), write=False)
        self.assertEqual(report.final_mre, 0.0)
        self.assertEqual(report.stop_reason, "converged")
        self.assertEqual(report.iterations, 51)

    def test_unidentified_flag(self):
        """A frozen optimizer converges on the loss while sigma stays wrong"""
        with tempfile.TemporaryDirectory() as tmp:
            config = small_config(tmp, init="uniform", options={"lr": 1e-12}, reference_mre=0.001, stop={})
            report = run_estimation(config, write=False)
        self.assertGreater(report.estimation.losses[-1], 0.0)
        self.assertEqual(report.stop_reason, "converged")
        self.assertIn(UNIDENTIFIED_FLAG, report.flags)

    def test_failure_is_reraised(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = small_config(tmp, scene=str(Path(tmp) / "missing.json"))
            with self.assertLogs("django_inverse_rt.harness", level="ERROR"), self.assertRaises(InverseRTError):
                run_estimation(config)

    def test_repetitions_shift_seeds(self):
        with tempfile.TemporaryDirectory() as tmp:
            reports = run_repeated(small_config(tmp, repetitions=2))
            self.assertTrue((Path(tmp) / "rep1" / "report.json").exists())
        self.assertEqual([r.config["seed_gt"] for r in reports], [0, 1])
        self.assertNotEqual(reports[0].sigma_truth, reports[1].sigma_truth)


class SweepTest(SimpleTestCase):
    def test_rows_and_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            rows = sweep(small_config(tmp), "depth", [0, 1])
            header = (Path(tmp) / "sweep.csv").read_text().splitlines()[0]
            self.assertTrue((Path(tmp) / "depth_1" / "report.json").exists())
            self.assertTrue((Path(tmp) / "sweep.dat").read_text().startswith("# value"))
        self.assertEqual(header, ",".join(SWEEP_COLUMNS))
        self.assertEqual([r["value"] for r in rows], [0, 1])
        self.assertEqual([r["error"] for r in rows], ["", ""])

    def test_failed_cell_does_not_stop_the_sweep(self):
        with tempfile.TemporaryDirectory() as tmp:
            rows = sweep(small_config(tmp), "n", [0, 2])
        self.assertIn("InverseRTError", rows[0]["error"])
        self.assertEqual(rows[0]["mre_percent"], "")
        self.assertEqual(rows[1]["error"], "")

    def test_unknown_axis(self):
        with self.assertRaises(InverseRTError):
            sweep(ExperimentConfig(), "lr", [1])

    def test_parallel_dispatch(self):
        """Cells go through the celery task when parallel is set"""

        dispatched = []

        def fake_delay(*args):
            dispatched.append(args)
            return SimpleNamespace(get=lambda: run_sweep_cell(*args))

        worker = SimpleNamespace(delay=fake_delay)
        with tempfile.TemporaryDirectory() as tmp, mock.patch("django_inverse_rt.tasks.run_sweep_cell", worker):
            rows = sweep(small_config(tmp), "rays", [200, 300], parallel=True)
        self.assertEqual(len(dispatched), 2)
        self.assertEqual([r["error"] for r in rows], ["", ""])

    def test_task_with_bad_config(self):
        row = run_sweep_cell({"placement": "grid"}, "n", 2)
        self.assertIn("InverseRTError", row["error"])


class InitCdfTest(SimpleTestCase):
    def test_paired_samples(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = small_config(tmp, seed_gt=10)
            results = init_cdf_study(config, ["itu", "random", "uniform"], samples=5)
            lines = (Path(tmp) / "init_cdf.csv").read_text().splitlines()
        self.assertEqual(lines[0], "rank,cdf,itu,random,uniform")
        self.assertEqual(len(lines), 6)
        self.assertEqual({len(v) for v in results.values()}, {5})
        table = load_material_table()
        names = build_room_scene(5).material_names
        truth = perturb_ground_truth(table, names, 3.5, seed=12)
        self.assertEqual(results["itu"][2], mre(itu_init(table, names, 3.5).sigma_init, truth))

    def test_single_strategy(self):
        with tempfile.TemporaryDirectory() as tmp:
            results = init_cdf_study(small_config(tmp), ["uniform"], samples=1)
        self.assertEqual(len(results["uniform"]), 1)

    def test_vlm_oracle_matches_itu(self):
        with tempfile.TemporaryDirectory() as tmp:
            results = init_cdf_study(small_config(tmp), ["itu", "vlm"], samples=3)
        self.assertEqual(results["itu"], results["vlm"])

    def test_needs_a_strategy(self):
        with self.assertRaises(InverseRTError):
            init_cdf_study(ExperimentConfig(), [], samples=1)


class CompareConvergenceTest(SimpleTestCase):
    def test_single_arm_has_no_ratios(self):
        with tempfile.TemporaryDirectory() as tmp:
            comparison = compare_convergence(small_config(tmp), ["itu:random"])
            summary = json.loads((Path(tmp) / "comparison.json").read_text())
        self.assertNotIn("ratios", summary)
        self.assertEqual(summary["arms"][0]["arm"], "itu:random")
        self.assertEqual(len(comparison.reports), 1)

    def test_arms_share_plan_and_truth(self):
        with tempfile.TemporaryDirectory() as tmp:
            comparison = compare_convergence(small_config(tmp), ["itu:random", "truth:random"])
            plans = [(Path(tmp) / arm / "plan.json").read_text() for arm in ("itu_random", "truth_random")]
            curves = (Path(tmp) / "curves.csv").read_text().splitlines()
        self.assertEqual(plans[0], plans[1])
        first, second = comparison.reports
        self.assertEqual(first.sigma_truth, second.sigma_truth)
        summary = comparison.summary()
        self.assertEqual(len(summary["ratios"]), 1)
        self.assertEqual(comparison.iterations_to_threshold()[1], 1)
        self.assertEqual(curves[0], "iter,itu:random_loss,itu:random_mre,truth:random_loss,truth:random_mre")
