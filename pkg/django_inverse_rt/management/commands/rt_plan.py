from pathlib import Path

from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.harness import build_client, build_scene, make_plan
from django_inverse_rt.materials import load_material_table, slot_permittivities
from django_inverse_rt.placement import SOURCES, plan_log_det
from django_inverse_rt.priors import make_prior

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Choose measurement positions and write them as a placement plan"

    supports_dry_run = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--strategy", choices=SOURCES, default="greedy", help="Placement strategy")
        parser.add_argument("--scene", type=str, help="canonical, generated or a scene file path")
        parser.add_argument("-n", type=int, dest="n", help="Receivers per trial")
        parser.add_argument("-m", type=int, dest="m", help="Number of trials")
        parser.add_argument("--image", type=str, help="Scene image passed to the VLM")
        parser.add_argument("--output", type=str, help="Plan file (default: <out>/plan.json)")

    def experiment_overrides(self, options):
        return {
            "placement": options["strategy"],
            "scene": options.get("scene"),
            "n": options.get("n"),
            "m": options.get("m"),
            "image": options.get("image"),
        }

    def handle(self, *args, **options):
        config = self.resolve_config(options)
        self.describe(config)
        try:
            scene = build_scene(config)
            table = load_material_table(config.material_table)
            rt = config.rt_config()
            eps = slot_permittivities(table, scene.material_names)
            client = build_client(config) if "vlm" in (config.init, config.placement) else None
            prior = make_prior(
                config.init, scene, table, rt.f_ghz, seed=config.seed_init, client=client, image_ref=config.image
            )
            plan = make_plan(config, scene, prior.sigma_init, eps, rt, client)
            score = plan_log_det(scene, plan, prior.sigma_init, eps, rt)
        except InverseRTError as e:
            raise CommandError(f"Placement failed: {e!s}") from e

        output = Path(options["output"]) if options.get("output") else config.output_dir() / "plan.json"
        output.parent.mkdir(parents=True, exist_ok=True)
        plan.save(output)
        for index, trial in enumerate(plan.trials, 1):
            receivers = ", ".join(f"({p.x:.2f}, {p.y:.2f}, {p.z:.2f})" for p in trial.rx)
            self.stdout.write(f"Trial {index}: Tx ({trial.tx.x:.2f}, {trial.tx.y:.2f}, {trial.tx.z:.2f}) -> {receivers}")
        self.stdout.write(f"log det of the sensitivity Gram matrix: {score:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Plan written to {output}"))
