from django.core.management.base import BaseCommand, CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import VLM_MODES, ExperimentConfig


class ExperimentCommand(BaseCommand):
    """Shared flags and config resolution for the experiment commands."""

    supports_dry_run = True

    def add_arguments(self, parser):
        parser.add_argument("--config", type=str, help="Path to an experiment config JSON file")
        parser.add_argument("--label", type=str, help="Experiment label (names the output directory)")
        parser.add_argument("--seed-gt", type=int, help="Ground-truth seed")
        parser.add_argument("--seed-place", type=int, help="Placement seed")
        parser.add_argument("--seed-init", type=int, help="Initialization seed")
        parser.add_argument("--out", type=str, help="Output directory for this experiment")
        parser.add_argument("--vlm-mode", choices=VLM_MODES, help="VLM client mode")
        parser.add_argument("--vlm-fixtures", type=str, help="Replay fixture directory")
        if self.supports_dry_run:
            parser.add_argument(
                "--dry-run",
                action="store_true",
                help="Show what would be run without running or storing anything",
            )

    def experiment_overrides(self, options):
        """Command-specific config overrides; ``None`` values are ignored."""
        return {}

    def resolve_config(self, options) -> ExperimentConfig:
        try:
            config = ExperimentConfig.load(options["config"]) if options.get("config") else ExperimentConfig()
            overrides = {
                "label": options.get("label"),
                "seed_gt": options.get("seed_gt"),
                "seed_place": options.get("seed_place"),
                "seed_init": options.get("seed_init"),
                "out_dir": options.get("out"),
                "vlm_mode": options.get("vlm_mode"),
                "vlm_fixtures": options.get("vlm_fixtures"),
                **self.experiment_overrides(options),
            }
            return config.replace(**{k: v for k, v in overrides.items() if v is not None})
        except InverseRTError as e:
            raise CommandError(f"Invalid experiment configuration: {e!s}") from e

    def describe(self, config: ExperimentConfig):
        self.stdout.write(
            f"Experiment {config.label!r}: scene={config.scene}, init={config.init}, "
            f"placement={config.placement}, N={config.n}, M={config.m}, "
            f"seeds gt/place/init={config.seed_gt}/{config.seed_place}/{config.seed_init}"
        )
        self.stdout.write(f"Output directory: {config.output_dir()}")
