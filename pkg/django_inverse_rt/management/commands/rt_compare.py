from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import compare_convergence, parse_arm
from django_inverse_rt.models import EstimationRun

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Compare convergence of init:placement arms on one ground truth"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--arms",
            nargs="+",
            required=True,
            help="Arms as init:placement, e.g. itu:greedy random:greedy",
        )
        parser.add_argument("-n", type=int, dest="n", help="Receivers per trial")
        parser.add_argument("-m", type=int, dest="m", help="Number of trials")

    def experiment_overrides(self, options):
        return {"n": options.get("n"), "m": options.get("m")}

    def handle(self, *args, **options):
        config = self.resolve_config(options)
        try:
            arms = [parse_arm(text) for text in options["arms"]]
        except InverseRTError as e:
            raise CommandError(str(e)) from e
        self.describe(config)

        if options["dry_run"]:
            self.stdout.write(self.style.WARNING("Dry run - nothing executed"))
            for init, placement in arms:
                self.stdout.write(f"Would run init={init}, placement={placement}")
            return

        try:
            comparison = compare_convergence(config, arms)
        except InverseRTError as e:
            raise CommandError(f"Comparison failed: {e!s}") from e

        summary = comparison.summary()
        for arm in summary["arms"]:
            reached = arm["iterations_to_threshold"]
            self.stdout.write(
                f"{arm['arm']}: initial MRE {100 * arm['initial_mre']:.3f}%, "
                f"final MRE {100 * arm['final_mre']:.4f}%, "
                f"MRE<=5% at {reached if reached is not None else 'never'}"
            )
        for ratio in summary.get("ratios", []):
            self.stdout.write(
                f"{ratio['arm']} vs {summary['arms'][0]['arm']}: "
                f"iterations ratio {ratio['iterations_to_threshold_ratio']}, "
                f"final MRE ratio {ratio['final_mre_ratio']}"
            )
        EstimationRun.record("compare", config, summary=summary, output_dir=config.output_dir())
        self.stdout.write(self.style.SUCCESS("Complete!"))
