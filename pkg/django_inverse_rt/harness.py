"""
Experiment driver: single estimation runs, parameter sweeps, the
initial-MRE CDF study and convergence comparisons between init/placement arms.

Every run writes into its own directory; nothing here is shared between runs
except the read-only material table.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conf import get_setting
from .exceptions import InverseRTError
from .forward_rt import RtConfig, received_strength, trace_trials
from .geometry import build_room_scene, load_scene, scene_to_xml
from .inverse import EstimateOptions, Measurement, StopCriteria, estimate, loss_stable, mre
from .materials import load_material_table, perturb_ground_truth, slot_permittivities
from .placement import (
    CandidateGrid,
    PlacementPlan,
    greedy_placement,
    random_placement,
    vlm_placement,
)
from .priors import STRATEGIES, make_prior
from .vlm import make_client

logger = logging.getLogger(__name__)

PLACEMENTS = ("greedy", "random", "vlm", "file")
SWEEP_AXES = ("n", "depth", "rays", "k", "m")
VLM_MODES = ("stub", "replay", "live")
MRE_THRESHOLD = 0.05
UNIDENTIFIED_FACTOR = 10.0
UNIDENTIFIED_FLAG = "loss converged, parameters not identified"
FLOAT = "{:.10g}"


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "run"
    scene: str = "canonical"
    num_objects: int = 9
    scene_seed: int = 0
    seed_gt: int = 0
    seed_place: int = 0
    seed_init: int = 0
    init: str = "itu"
    placement: str = "greedy"
    plan_file: str | None = None
    n: int = 8
    m: int = 3
    rt: dict = field(default_factory=dict)
    stop: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    out_dir: str | None = None
    repetitions: int = 1
    vlm_mode: str = "stub"
    vlm_fixtures: str | None = None
    vlm_noise: float = 0.0
    image: str | None = None
    lambda_std: float = 0.1
    noise_rel: float = 0.0
    reference_mre: float | None = None
    grid_pitch: float = 1.0
    material_table: str | None = None

    def __post_init__(self):
        if self.init not in STRATEGIES:
            raise InverseRTError(f"Unknown init strategy {self.init!r}")
        if self.placement not in PLACEMENTS:
            raise InverseRTError(f"Unknown placement strategy {self.placement!r}")
        if self.placement == "file" and not self.plan_file:
            raise InverseRTError("placement 'file' needs plan_file")
        if self.vlm_mode not in VLM_MODES:
            raise InverseRTError(f"Unknown VLM mode {self.vlm_mode!r}")
        if self.n < 1 or self.m < 1 or self.repetitions < 1:
            raise InverseRTError("n, m and repetitions must be >= 1")
        if self.noise_rel < 0:
            raise InverseRTError("noise_rel must be >= 0")

    def rt_config(self) -> RtConfig:
        return RtConfig.from_dict(self.rt)

    def stop_criteria(self) -> StopCriteria:
        return StopCriteria(**self.stop)

    def estimate_options(self) -> EstimateOptions:
        return EstimateOptions(**self.options)

    def output_dir(self) -> Path:
        return Path(self.out_dir or Path(get_setting("INVERSE_RT_OUTPUT_DIR")) / self.label)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_rt(self, **overrides) -> ExperimentConfig:
        return self.replace(rt={**self.rt, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InverseRTError(f"Unknown experiment config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InverseRTError(f"Failed to read experiment config {path}: {e!s}") from e
        return cls.from_dict(data)


@dataclass
class TimingBreakdown:
    scene_build_s: float = 0.0
    trace_s: float = 0.0
    truth_s: float = 0.0
    init_s: float = 0.0
    placement_s: float = 0.0
    measure_s: float = 0.0
    estimate_s: float = 0.0
    forward_per_iter_s: float = 0.0
    gradient_per_iter_s: float = 0.0
    update_per_iter_s: float = 0.0

    @property
    def per_iter_s(self) -> float:
        return self.forward_per_iter_s + self.gradient_per_iter_s + self.update_per_iter_s

    @property
    def phases_s(self) -> float:
        """Sum of the timed phases; ``estimate_s`` holds every iteration in full."""
        return (
            self.scene_build_s + self.truth_s + self.init_s + self.placement_s
            + self.trace_s + self.measure_s + self.estimate_s
        )

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "per_iter_s": self.per_iter_s, "phases_s": self.phases_s}


@dataclass
class RunReport:
    config: dict
    final_mre: float
    initial_mre: float
    iterations: int
    stop_reason: str | None
    final_loss: float
    total_seconds: float
    timing: TimingBreakdown
    sigma_final: list[float]
    sigma_truth: list[float]
    sigma_init: list[float]
    init_sources: list[str]
    material_names: list[str]
    flags: list[str] = field(default_factory=list)
    trace_path: str | None = None
    out_dir: str | None = None
    estimation: object = field(default=None, repr=False)

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "estimation"}
        data["timing"] = self.timing.to_dict()
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def build_scene(config: ExperimentConfig):
    if config.scene == "canonical":
        return build_room_scene(9)
    if config.scene == "generated":
        return build_room_scene(config.num_objects, seed=config.scene_seed)
    return load_scene(config.scene)


def _needs_client(config: ExperimentConfig) -> bool:
    return config.init == "vlm" or config.placement == "vlm"


def build_client(config: ExperimentConfig):
    return make_client(
        config.vlm_mode,
        fixture_dir=config.vlm_fixtures,
        seed=config.seed_init,
        p=config.vlm_noise,
    )


def make_plan(config: ExperimentConfig, scene, sigma_prior, eps, rt: RtConfig, client=None) -> PlacementPlan:
    if config.placement == "random":
        return random_placement(scene, config.n, config.m, seed=config.seed_place)
    if config.placement == "greedy":
        grid = CandidateGrid.for_scene(scene, pitch=config.grid_pitch)
        return greedy_placement(scene, sigma_prior, eps, rt, grid, config.n, config.m)
    if config.placement == "vlm":
        return vlm_placement(scene_to_xml(scene), config.image, config.n, config.m, client, scene=scene)
    return PlacementPlan.load(config.plan_file)


def synthesize_measurements(traces, sigma_hat, eps, rt: RtConfig, noise_rel=0.0, seed=0) -> list[Measurement]:
    """Noiseless strengths at the true conductivities, with optional relative noise."""
    rng = np.random.default_rng([seed, 1]) if noise_rel > 0 else None
    measured = []
    for trace in traces:
        strengths = received_strength(trace, sigma_hat, eps, rt)
        if rng is not None:
            strengths = np.clip(strengths * (1.0 + noise_rel * rng.standard_normal(strengths.shape)), 0.0, None)
        measured.append(Measurement(strengths))
    return measured


def run_estimation(config: ExperimentConfig, client=None, plan: PlacementPlan | None = None, write: bool = True) -> RunReport:
    """Ground truth, prior, placement, synthetic measurements, then the inverse loop."""
    try:
        return _run_estimation(config, client, plan, write)
    except InverseRTError:
        logger.error(f"Run {config.label!r} failed (scene={config.scene}, init={config.init}, placement={config.placement})")
        raise


def _run_estimation(config: ExperimentConfig, client, plan, write) -> RunReport:
    started = time.perf_counter()
    timing = TimingBreakdown()

    t = time.perf_counter()
    scene = build_scene(config)
    timing.scene_build_s = time.perf_counter() - t

    t = time.perf_counter()
    table = load_material_table(config.material_table)
    rt = config.rt_config()
    names = scene.material_names
    truth = perturb_ground_truth(table, names, rt.f_ghz, config.seed_gt, std=config.lambda_std)
    eps = slot_permittivities(table, names)
    if client is None and _needs_client(config):
        client = build_client(config)
    timing.truth_s = time.perf_counter() - t

    t = time.perf_counter()
    prior = make_prior(
        config.init, scene, table, rt.f_ghz,
        seed=config.seed_init, client=client, image_ref=config.image, ground_truth=truth,
    )
    timing.init_s = time.perf_counter() - t

    t = time.perf_counter()
    if plan is None:
        plan = make_plan(config, scene, prior.sigma_init, eps, rt, client)
    timing.placement_s = time.perf_counter() - t

    t = time.perf_counter()
    traces = trace_trials(scene, plan.trials, rt)
    timing.trace_s = time.perf_counter() - t

    t = time.perf_counter()
    measured = synthesize_measurements(
        traces, truth.sigma_hat, eps, rt, noise_rel=config.noise_rel, seed=config.seed_gt
    )
    timing.measure_s = time.perf_counter() - t

    sigma_final, estimation = estimate(
        scene, plan.trials, measured, prior.sigma_init, eps, rt,
        config.estimate_options(), config.stop_criteria(), truth=truth, traces=traces,
    )
    means = estimation.mean_timings()
    timing.forward_per_iter_s = means["forward"]
    timing.gradient_per_iter_s = means["gradient"]
    timing.update_per_iter_s = means["update"]
    timing.estimate_s = estimation.iteration_seconds()

    final_mre = mre(sigma_final, truth)
    flags = []
    if (
        config.reference_mre is not None
        and loss_stable(estimation, config.stop_criteria())
        and final_mre > UNIDENTIFIED_FACTOR * config.reference_mre
    ):
        flags.append(UNIDENTIFIED_FLAG)
    touched = set().union(*(tr.touched_slots for tr in traces)) if traces else set()
    unobserved = [names[k] for k in range(len(names)) if k not in touched]
    if unobserved:
        flags.append("no path touches " + ", ".join(unobserved))

    report = RunReport(
        config=config.to_dict(),
        final_mre=final_mre,
        initial_mre=mre(prior.sigma_init, truth),
        iterations=estimation.final_iteration,
        stop_reason=estimation.stop_reason,
        final_loss=estimation.records[-1].loss,
        total_seconds=time.perf_counter() - started,
        timing=timing,
        sigma_final=sigma_final.tolist(),
        sigma_truth=truth.sigma_hat.tolist(),
        sigma_init=prior.sigma_init.tolist(),
        init_sources=list(prior.sources),
        material_names=list(names),
        flags=flags,
        estimation=estimation,
    )
    logger.info(
        f"{config.label}: MRE {final_mre:.4%} after {report.iterations} iterations "
        f"({report.stop_reason}) in {report.total_seconds:.1f}s"
    )
    if write:
        write_run(report, config, plan, prior)
    return report


def _write_dat(path: Path, columns: list[str], rows) -> None:
    lines = ["# " + " ".join(columns)]
    lines.extend(" ".join(str(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def write_run(report: RunReport, config: ExperimentConfig, plan: PlacementPlan, prior) -> Path:
    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    trace_path = out / "trace.csv"
    report.estimation.to_csv(trace_path)
    plan.save(out / "plan.json")
    (out / "prior.json").write_text(prior.to_json())
    _write_dat(
        out / "convergence.dat",
        ["iter", "loss", "mre"],
        [
            (r.i, FLOAT.format(r.loss), FLOAT.format(r.mre if r.mre is not None else float("nan")))
            for r in report.estimation.records
        ],
    )
    report.trace_path = str(trace_path)
    report.out_dir = str(out)
    (out / "report.json").write_text(report.to_json())
    return out


def run_repeated(config: ExperimentConfig, client=None) -> list[RunReport]:
    """``repetitions`` runs with every seed shifted by the repetition index."""
    reports = []
    for r in range(config.repetitions):
        cell = config.replace(
            label=f"{config.label}_rep{r}",
            seed_gt=config.seed_gt + r,
            seed_place=config.seed_place + r,
            seed_init=config.seed_init + r,
            out_dir=str(config.output_dir() / f"rep{r}") if config.repetitions > 1 else config.out_dir,
        )
        reports.append(run_estimation(cell, client=client))
    return reports


def sweep_cell_config(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise InverseRTError(f"Unknown sweep axis {axis!r}")
    cell = config.replace(label=f"{config.label}_{axis}{value}", out_dir=str(config.output_dir() / f"{axis}_{value}"))
    if axis == "n":
        return cell.replace(n=int(value))
    if axis == "m":
        return cell.replace(m=int(value))
    if axis == "depth":
        return cell.with_rt(depth=int(value))
    if axis == "rays":
        return cell.with_rt(u_ray=int(value))
    return cell.replace(scene="generated", num_objects=int(value))


SWEEP_COLUMNS = [
    "axis", "value", "mre_percent", "time_s", "iterations", "per_iter_s",
    "forward_per_iter_s", "gradient_per_iter_s", "update_per_iter_s", "scene_build_s", "error",
]


def sweep_row(axis: str, value, report: dict | None, error: str = "") -> dict:
    row = {"axis": axis, "value": value, "error": error}
    if report is not None:
        timing = report["timing"]
        row.update(
            mre_percent=FLOAT.format(100.0 * report["final_mre"]),
            time_s=FLOAT.format(report["total_seconds"]),
            iterations=report["iterations"],
            per_iter_s=FLOAT.format(timing["per_iter_s"]),
            forward_per_iter_s=FLOAT.format(timing["forward_per_iter_s"]),
            gradient_per_iter_s=FLOAT.format(timing["gradient_per_iter_s"]),
            update_per_iter_s=FLOAT.format(timing["update_per_iter_s"]),
            scene_build_s=FLOAT.format(timing["scene_build_s"]),
        )
    return {column: row.get(column, "") for column in SWEEP_COLUMNS}


def run_cell(config: ExperimentConfig, axis: str, value) -> dict:
    """One sweep cell; failures are logged and returned as an error row."""
    try:
        report = run_estimation(sweep_cell_config(config, axis, value))
    except Exception as e:
        logger.error(f"Sweep cell {axis}={value} failed", exc_info=True)
        return sweep_row(axis, value, None, error=f"{type(e).__name__}: {e!s}")
    return sweep_row(axis, value, report.to_dict())


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def sweep(config: ExperimentConfig, axis: str, values, parallel: bool = False) -> list[dict]:
    """One run per value with shared seeds; writes ``sweep.csv`` and ``sweep.dat``."""
    if axis not in SWEEP_AXES:
        raise InverseRTError(f"Unknown sweep axis {axis!r}")
    values = list(values)
    if parallel:
        from .tasks import run_sweep_cell

        pending = [run_sweep_cell.delay(config.to_dict(), axis, v) for v in values]
        rows = [result.get() for result in pending]
    else:
        rows = [run_cell(config, axis, v) for v in values]

    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(rows_to_csv(rows, SWEEP_COLUMNS))
    _write_dat(
        out / "sweep.dat",
        ["value", "mre_percent", "iterations", "per_iter_s"],
        [(r["value"], r["mre_percent"] or "nan", r["iterations"] or "nan", r["per_iter_s"] or "nan") for r in rows],
    )
    failed = sum(1 for r in rows if r["error"])
    logger.info(f"Sweep over {axis}: {len(rows) - failed} cells done, {failed} failed")
    return rows


def init_cdf_study(config: ExperimentConfig, strategies, samples: int = 100, client=None) -> dict[str, list[float]]:
    """Initial MRE per strategy over ``samples`` paired ground truths.

    Sample ``i`` uses ground-truth seed ``seed_gt + i`` for every strategy.
    Returns the unsorted paired samples; the CSV holds them sorted per strategy.
    """
    strategies = list(strategies)
    if not strategies:
        raise InverseRTError("init_cdf_study needs at least one strategy")
    scene = build_scene(config)
    table = load_material_table(config.material_table)
    f_ghz = config.rt_config().f_ghz
    names = scene.material_names
    if client is None and "vlm" in strategies:
        client = build_client(config)

    results: dict[str, list[float]] = {s: [] for s in strategies}
    for i in range(samples):
        truth = perturb_ground_truth(table, names, f_ghz, config.seed_gt + i, std=config.lambda_std)
        for strategy in strategies:
            prior = make_prior(
                strategy, scene, table, f_ghz, seed=config.seed_init + i, client=client, ground_truth=truth
            )
            results[strategy].append(mre(prior.sigma_init, truth))

    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    columns = ["rank", "cdf", *strategies]
    ordered = {s: sorted(v) for s, v in results.items()}
    rows = [
        {"rank": i + 1, "cdf": FLOAT.format((i + 1) / samples), **{s: FLOAT.format(ordered[s][i]) for s in strategies}}
        for i in range(samples)
    ]
    (out / "init_cdf.csv").write_text(rows_to_csv(rows, columns))
    _write_dat(out / "init_cdf.dat", columns, [[row[c] for c in columns] for row in rows])
    return results


def parse_arm(text: str) -> tuple[str, str]:
    init, _, placement = text.partition(":")
    if not placement:
        raise InverseRTError(f"Arm {text!r} must look like init:placement")
    return init, placement


@dataclass
class ComparisonReport:
    arms: list[str]
    reports: list[RunReport]
    threshold: float = MRE_THRESHOLD

    def iterations_to_threshold(self) -> list[int | None]:
        return [r.estimation.iterations_to_mre(self.threshold) for r in self.reports]

    def summary(self) -> dict:
        iters = self.iterations_to_threshold()
        summary = {
            "threshold": self.threshold,
            "arms": [
                {
                    "arm": arm,
                    "iterations": r.iterations,
                    "iterations_to_threshold": it,
                    "initial_mre": r.initial_mre,
                    "final_mre": r.final_mre,
                }
                for arm, r, it in zip(self.arms, self.reports, iters)
            ],
        }
        if len(self.reports) < 2:
            return summary
        base_iters = iters[0]
        base_mre = self.reports[0].final_mre
        summary["ratios"] = [
            {
                "arm": arm,
                "iterations_to_threshold_ratio": (it / base_iters) if it and base_iters else None,
                "final_mre_ratio": (r.final_mre / base_mre) if base_mre > 0 else None,
            }
            for arm, r, it in zip(self.arms[1:], self.reports[1:], iters[1:])
        ]
        return summary

    def curves_csv(self) -> str:
        columns = ["iter"] + [f"{arm}_{kind}" for arm in self.arms for kind in ("loss", "mre")]
        length = max((len(r.estimation.records) for r in self.reports), default=0)
        rows = []
        for i in range(length):
            row = {"iter": i + 1}
            for arm, report in zip(self.arms, self.reports):
                records = report.estimation.records
                if i < len(records):
                    row[f"{arm}_loss"] = FLOAT.format(records[i].loss)
                    row[f"{arm}_mre"] = FLOAT.format(records[i].mre)
            rows.append(row)
        return rows_to_csv(rows, columns)


def compare_convergence(config: ExperimentConfig, arms, client=None) -> ComparisonReport:
    """Run each (init, placement) arm on the same ground truth.

    Arms that use the same placement strategy share the plan built for the
    first of them.
    """
    arms = [parse_arm(a) if isinstance(a, str) else tuple(a) for a in arms]
    names = [f"{init}:{placement}" for init, placement in arms]
    plans: dict[str, PlacementPlan] = {}
    reports = []
    for (init, placement), name in zip(arms, names):
        cell = config.replace(
            label=f"{config.label}_{init}_{placement}",
            init=init,
            placement=placement,
            out_dir=str(config.output_dir() / f"{init}_{placement}"),
        )
        report = run_estimation(cell, client=client, plan=plans.get(placement))
        if placement not in plans:
            plans[placement] = PlacementPlan.load(Path(report.out_dir) / "plan.json")
        reports.append(report)

    comparison = ComparisonReport(names, reports)
    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(comparison.summary(), indent=2))
    (out / "curves.csv").write_text(comparison.curves_csv())
    return comparison
