from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import SWEEP_AXES, sweep, sweep_cell_config
from django_inverse_rt.models import EstimationRun

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Sweep one experiment parameter with shared seeds and emit a CSV table"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--axis", choices=SWEEP_AXES, required=True, help="Parameter to sweep")
        parser.add_argument("--values", type=int, nargs="+", required=True, help="Values for the axis")
        parser.add_argument(
            "--parallel",
            action="store_true",
            help="Dispatch cells as celery tasks instead of running them in-process",
        )

    def handle(self, *args, **options):
        config = self.resolve_config(options)
        axis, values = options["axis"], options["values"]
        self.describe(config)

        if options["dry_run"]:
            self.stdout.write(self.style.WARNING("Dry run - nothing executed"))
            for value in values:
                try:
                    cell = sweep_cell_config(config, axis, value)
                except InverseRTError as e:
                    raise CommandError(str(e)) from e
                self.stdout.write(f"Would run {axis}={value} into {cell.output_dir()}")
            return

        try:
            rows = sweep(config, axis, values, parallel=options["parallel"])
        except InverseRTError as e:
            raise CommandError(f"Sweep failed: {e!s}") from e

        for row in rows:
            if row["error"]:
                self.stdout.write(self.style.ERROR(f"{axis}={row['value']}: {row['error']}"))
            else:
                self.stdout.write(
                    f"{axis}={row['value']}: MRE {row['mre_percent']}% | Time {row['time_s']}s | "
                    f"Iter. {row['iterations']} | Per Iter. {row['per_iter_s']}s"
                )
        errors = sum(1 for row in rows if row["error"])
        EstimationRun.record(
            "sweep", config, summary={"axis": axis, "rows": rows}, output_dir=config.output_dir()
        )
        self.stdout.write(
            self.style.SUCCESS(f"Complete! Cells: {len(rows)}, Errors: {errors}")
        )
