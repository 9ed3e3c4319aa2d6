import logging

from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import PLACEMENTS, run_repeated
from django_inverse_rt.models import EstimationRun
from django_inverse_rt.priors import STRATEGIES

from ._base import ExperimentCommand

logger = logging.getLogger(__name__)


class Command(ExperimentCommand):
    help = "Run one conductivity estimation experiment end to end"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--scene", type=str, help="canonical, generated or a scene file path")
        parser.add_argument("--num-objects", type=int, help="Object count K for generated scenes")
        parser.add_argument("--init", choices=STRATEGIES, help="Initialization strategy")
        parser.add_argument("--placement", choices=PLACEMENTS, help="Placement strategy")
        parser.add_argument("--plan-file", type=str, help="Placement plan JSON for --placement file")
        parser.add_argument("-n", type=int, dest="n", help="Receivers per trial")
        parser.add_argument("-m", type=int, dest="m", help="Number of trials")
        parser.add_argument("--repetitions", type=int, help="Repeat with shifted seeds")
        parser.add_argument("--max-iter", type=int, help="Iteration budget")

    def experiment_overrides(self, options):
        return {
            "scene": options.get("scene"),
            "num_objects": options.get("num_objects"),
            "init": options.get("init"),
            "placement": options.get("placement"),
            "plan_file": options.get("plan_file"),
            "n": options.get("n"),
            "m": options.get("m"),
            "repetitions": options.get("repetitions"),
        }

    def handle(self, *args, **options):
        config = self.resolve_config(options)
        if options.get("max_iter"):
            config = config.replace(stop={**config.stop, "max_iter": options["max_iter"]})
        self.describe(config)

        if options["dry_run"]:
            self.stdout.write(self.style.WARNING("Dry run - nothing executed"))
            return

        try:
            reports = run_repeated(config)
        except InverseRTError as e:
            raise CommandError(f"Run {config.label!r} failed: {e!s}") from e

        for report in reports:
            EstimationRun.record("run", config, report=report)
            self.stdout.write(
                f"MRE {100 * report.final_mre:.4f}% | Time {report.total_seconds:.1f}s | "
                f"Iter. {report.iterations} | Per Iter. {report.timing.per_iter_s:.4f}s "
                f"({report.stop_reason})"
            )
            for flag in report.flags:
                self.stdout.write(self.style.WARNING(f"Flag: {flag}"))
        self.stdout.write(self.style.SUCCESS(f"Complete! Results in {reports[-1].out_dir}"))
