import numpy as np
from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import init_cdf_study
from django_inverse_rt.models import EstimationRun
from django_inverse_rt.priors import STRATEGIES

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Sample the initial MRE of several initialization strategies"

    supports_dry_run = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--strategies",
            nargs="+",
            choices=STRATEGIES,
            default=["itu", "random", "uniform"],
            help="Initialization strategies to compare",
        )
        parser.add_argument("--samples", type=int, default=100, help="Paired ground-truth samples")

    def handle(self, *args, **options):
        config = self.resolve_config(options)
        if options["samples"] < 1:
            raise CommandError("--samples must be >= 1")
        self.describe(config)

        try:
            results = init_cdf_study(config, options["strategies"], samples=options["samples"])
        except InverseRTError as e:
            raise CommandError(f"CDF study failed: {e!s}") from e

        medians = {strategy: float(np.median(values)) for strategy, values in results.items()}
        for strategy, median in medians.items():
            self.stdout.write(f"{strategy}: median initial MRE {100 * median:.3f}%")
        EstimationRun.record(
            "cdf", config, summary={"samples": options["samples"], "medians": medians},
            output_dir=config.output_dir(),
        )
        self.stdout.write(self.style.SUCCESS(f"Complete! CDF written to {config.output_dir() / 'init_cdf.csv'}"))
