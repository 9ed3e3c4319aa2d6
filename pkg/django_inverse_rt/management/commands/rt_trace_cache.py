from pathlib import Path

from django.core.management.base import CommandError

from django_inverse_rt.exceptions import InverseRTError
from django_inverse_rt.forward_rt import load_trace, save_trace, trace_trials
from django_inverse_rt.harness import build_scene
from django_inverse_rt.placement import PlacementPlan, random_placement

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Build or inspect a cached path-geometry file"

    supports_dry_run = False

    def add_arguments(self, parser):
        parser.add_argument("action", choices=("build", "inspect"), help="build or inspect")
        parser.add_argument("path", type=str, help="Trace cache file")
        super().add_arguments(parser)
        parser.add_argument("--scene", type=str, help="canonical, generated or a scene file path")
        parser.add_argument("--plan", type=str, help="Placement plan JSON (default: random plan)")
        parser.add_argument("-n", type=int, dest="n", help="Receivers per trial for the random plan")
        parser.add_argument("-m", type=int, dest="m", help="Number of trials for the random plan")

    def experiment_overrides(self, options):
        return {"scene": options.get("scene"), "n": options.get("n"), "m": options.get("m")}

    def handle(self, *args, **options):
        if options["action"] == "build":
            self.build(options)
        else:
            self.inspect(options["path"])

    def build(self, options):
        config = self.resolve_config(options)
        try:
            scene = build_scene(config)
            if options.get("plan"):
                plan = PlacementPlan.load(options["plan"])
            else:
                plan = random_placement(scene, config.n, config.m, seed=config.seed_place)
            traces = trace_trials(scene, plan.trials, config.rt_config())
        except InverseRTError as e:
            raise CommandError(f"Tracing failed: {e!s}") from e

        path = Path(options["path"])
        path.parent.mkdir(parents=True, exist_ok=True)
        save_trace(traces, path)
        total = sum(len(t.paths) for t in traces)
        self.stdout.write(self.style.SUCCESS(f"Cached {total} paths over {len(traces)} trials in {path}"))

    def inspect(self, path):
        try:
            traces = load_trace(path)
        except InverseRTError as e:
            raise CommandError(str(e)) from e

        for index, trace in enumerate(traces, 1):
            counts = ", ".join(str(c) for c in trace.per_receiver_counts)
            depth = max((p.segment_count - 1 for p in trace.paths), default=0)
            slots = ", ".join(str(s) for s in sorted(trace.touched_slots)) or "none"
            self.stdout.write(
                f"Trial {index}: {len(trace.paths)} paths, per receiver [{counts}], "
                f"max bounces {depth}, slots touched: {slots}"
            )
        self.stdout.write(self.style.SUCCESS(f"{len(traces)} trials in {path}"))
