from django.core.management.base import BaseCommand

from django_inverse_rt.models import EstimationRun


class Command(BaseCommand):
    help = "Remove all stored estimation runs from the database"

    def add_arguments(self, parser):
        parser.add_argument(
            "--no-confirm",
            action="store_true",
            help="Skip confirmation prompt and delete all runs immediately",
        )

    def handle(self, *args, **options):
        run_count = EstimationRun.objects.count()

        if run_count == 0:
            self.stdout.write(self.style.SUCCESS("No estimation runs found to remove."))
            return

        if not options["no_confirm"]:
            self.stdout.write(f"This will remove {run_count} estimation runs from the database.")
            confirm = input("Are you sure you want to continue? [y/N]: ")
            if confirm.lower() not in ["y", "yes"]:
                self.stdout.write(self.style.WARNING("Operation cancelled."))
                return

        deleted_count, _ = EstimationRun.objects.all().delete()

        self.stdout.write(self.style.SUCCESS(f"Successfully removed {deleted_count} estimation runs."))
