"""
Measurement placement: uniform random baseline, greedy D-optimal selection on a
candidate grid, and VLM-proposed positions with one repair round-trip.

All three planners return a ``PlacementPlan`` checked by ``validate_plan``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import (
    PlacementBoundsError,
    PlacementCountError,
    PlacementError,
    VlmResponseError,
)
from .forward_rt import RtConfig, received_strength_with_grad, trace_paths
from .geometry import Scene, TrialConfig, Vec3, parse_scene_xml, scene_to_xml
from .inverse import MEASUREMENT_FLOOR
from .materials import as_sigma_array
from .vlm import extract_json, render_prompt

logger = logging.getLogger(__name__)

SOURCES = ("random", "greedy", "vlm")
POSITION_MARGIN = 0.1
MIN_SEPARATION = 0.2
GRID_PITCH = 1.0
GRID_HEIGHT = 1.5
LOG_DET_REGULARIZER = 1e-12
MAX_ATTEMPTS = 10000


@dataclass(frozen=True)
class PlacementPlan:
    trials: tuple[TrialConfig, ...]
    source: str
    rationale: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        if self.source not in SOURCES:
            raise PlacementError(f"Unknown plan source {self.source!r}")
        if self.rationale and len(self.rationale) != len(self.trials):
            raise PlacementError("Rationale must have one entry per trial")

    @property
    def m(self) -> int:
        return len(self.trials)

    @property
    def n(self) -> int:
        return self.trials[0].n if self.trials else 0

    def to_list(self) -> list[dict]:
        items = []
        for index, trial in enumerate(self.trials):
            item = trial.to_dict()
            item["source"] = self.source
            item["rationale"] = list(self.rationale[index]) if self.rationale else []
            items.append(item)
        return items

    @classmethod
    def from_list(cls, items: list[dict]) -> PlacementPlan:
        if not items:
            return cls(trials=(), source="random")
        sources = {item.get("source", "random") for item in items}
        if len(sources) != 1:
            raise PlacementError(f"Plan mixes sources {sorted(sources)}")
        trials = tuple(TrialConfig.from_dict(item) for item in items)
        rationale = tuple(tuple(item.get("rationale") or ()) for item in items)
        if not any(rationale):
            rationale = ()
        return cls(trials=trials, source=sources.pop(), rationale=rationale)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_list(), indent=2))

    @classmethod
    def load(cls, path) -> PlacementPlan:
        try:
            items = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise PlacementError(f"Failed to read plan {path}: {e!s}") from e
        return cls.from_list(items)


def point_problem(scene: Scene, point, margin: float = POSITION_MARGIN) -> str | None:
    """Why ``point`` is not a valid measurement position, or None."""
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        return "non-finite coordinate"
    lo = scene.room_min.as_array() + margin
    hi = scene.room_max.as_array() - margin
    if not lo[2] <= p[2] <= hi[2]:
        return f"z={p[2]:g} outside [{lo[2]:g}, {hi[2]:g}]"
    if np.any(p[:2] < lo[:2]) or np.any(p[:2] > hi[:2]):
        return f"closer than {margin:g} m to a wall or outside the room"
    for box in scene.boxes:
        box_lo, box_hi = box.bounds
        if np.all(p > box_lo - margin) and np.all(p < box_hi + margin):
            return f"inside or closer than {margin:g} m to {box.name}"
    return None


def _separation_problems(points, labels) -> list[str]:
    problems = []
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            gap = float(np.linalg.norm(np.subtract(points[i], points[j])))
            if gap < MIN_SEPARATION:
                problems.append(f"{labels[i]} and {labels[j]} are {gap:.3f} m apart")
    return problems


def plan_problems(scene: Scene, trials, n: int | None = None, m: int | None = None) -> list[str]:
    problems = []
    if m is not None and len(trials) != m:
        problems.append(f"expected {m} trials, got {len(trials)}")
    for t, trial in enumerate(trials):
        if n is not None and trial.n != n:
            problems.append(f"trial {t + 1}: expected {n} receivers, got {trial.n}")
        labels = [f"trial {t + 1} Tx"] + [f"trial {t + 1} Rx{i + 1}" for i in range(trial.n)]
        for label, point in zip(labels, trial.points):
            problem = point_problem(scene, point)
            if problem:
                problems.append(f"{label} {tuple(point)}: {problem}")
        problems.extend(_separation_problems(trial.points, labels))
    return problems


def validate_plan(scene: Scene, plan: PlacementPlan, n: int | None = None, m: int | None = None) -> None:
    problems = plan_problems(scene, plan.trials, n, m)
    if problems:
        raise PlacementError("Invalid placement plan: " + "; ".join(problems))


def random_placement(scene: Scene, n: int, m: int, seed: int, max_attempts: int = MAX_ATTEMPTS) -> PlacementPlan:
    """Uniform positions over free space, rejection-sampled per trial."""
    if n < 1 and m > 0:
        raise PlacementError(f"A trial needs at least one receiver, got n={n}")
    rng = np.random.default_rng(seed)
    lo = scene.room_min.as_array() + POSITION_MARGIN
    hi = scene.room_max.as_array() - POSITION_MARGIN
    trials = []
    for trial_index in range(m):
        points = []
        attempts = 0
        while len(points) < n + 1:
            attempts += 1
            if attempts > max_attempts:
                raise PlacementError(
                    f"Could not place {n + 1} positions for trial {trial_index + 1} "
                    f"after {max_attempts} attempts"
                )
            candidate = rng.uniform(lo, hi)
            if point_problem(scene, candidate) is not None:
                continue
            if any(np.linalg.norm(candidate - p) < MIN_SEPARATION for p in points):
                continue
            points.append(candidate)
        trials.append(TrialConfig(tx=Vec3.of(points[0]), rx=tuple(Vec3.of(p) for p in points[1:])))
    return PlacementPlan(trials=tuple(trials), source="random")


@dataclass(frozen=True, eq=False)
class CandidateGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @classmethod
    def for_scene(cls, scene: Scene, pitch: float = GRID_PITCH, heights=(GRID_HEIGHT,)) -> CandidateGrid:
        """Lattice points at cell centers that pass the free-space test."""
        lo = scene.room_min.as_array()
        hi = scene.room_max.as_array()
        xs = np.arange(lo[0] + pitch / 2, hi[0], pitch)
        ys = np.arange(lo[1] + pitch / 2, hi[1], pitch)
        points = [
            (x, y, z)
            for z in heights
            for y in ys
            for x in xs
            if point_problem(scene, (x, y, z)) is None
        ]
        return cls(np.array(points, dtype=float).reshape(-1, 3))


def sensitivity_rows(trace, sigma, eps, config: RtConfig) -> np.ndarray:
    """Relative sensitivities sigma_k * dr_n/dsigma_k / r_n, one row per receiver."""
    evaluation = received_strength_with_grad(trace, sigma, eps, config)
    strengths = evaluation.strengths
    rows = np.zeros_like(evaluation.jacobian)
    heard = strengths > MEASUREMENT_FLOOR
    rows[heard] = evaluation.jacobian[heard] * np.asarray(sigma)[None, :] / strengths[heard, None]
    return rows


def log_det(gram: np.ndarray) -> float:
    k = gram.shape[0]
    _, value = np.linalg.slogdet(gram + LOG_DET_REGULARIZER * np.eye(k))
    return float(value)


def plan_log_det(scene: Scene, plan: PlacementPlan, sigma_prior, eps, config: RtConfig) -> float:
    """Greedy objective evaluated on a whole plan."""
    sigma = as_sigma_array(sigma_prior, scene.num_slots)
    gram = np.zeros((scene.num_slots, scene.num_slots))
    for trial in plan.trials:
        rows = sensitivity_rows(trace_paths(scene, trial, config), sigma, eps, config)
        gram += rows.T @ rows
    return log_det(gram)


def greedy_placement(
    scene: Scene,
    sigma_prior,
    eps,
    config: RtConfig,
    candidates: CandidateGrid | None = None,
    n: int = 8,
    m: int = 3,
) -> PlacementPlan:
    """Greedy D-optimal selection on the candidate grid.

    For each trial the Tx maximizing log det with all of its receiver rows is
    picked first, then receivers are added one at a time. Ties go to the lowest
    candidate index.
    """
    candidates = candidates if candidates is not None else CandidateGrid.for_scene(scene)
    points = candidates.points
    if len(points) < n + 1:
        raise PlacementError(f"{len(points)} candidates cannot host {n} receivers plus a Tx")
    sigma = as_sigma_array(sigma_prior, scene.num_slots)
    k = scene.num_slots
    rows_by_tx: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def rows_for(tx_index: int):
        if tx_index not in rows_by_tx:
            tx = points[tx_index]
            rx_index = np.array(
                [
                    j
                    for j in range(len(points))
                    if j != tx_index and np.linalg.norm(points[j] - tx) >= MIN_SEPARATION
                ],
                dtype=int,
            )
            trial = TrialConfig(tx=Vec3.of(tx), rx=tuple(Vec3.of(points[j]) for j in rx_index))
            rows = sensitivity_rows(trace_paths(scene, trial, config), sigma, eps, config)
            rows_by_tx[tx_index] = (rx_index, rows.reshape(len(rx_index), k))
        return rows_by_tx[tx_index]

    gram = np.zeros((k, k))
    trials = []
    rationale = []
    for trial_number in range(m):
        best_tx, best_score = None, -math.inf
        for c in range(len(points)):
            rx_index, rows = rows_for(c)
            if len(rx_index) < n:
                continue
            score = log_det(gram + rows.T @ rows)
            if score > best_score:
                best_tx, best_score = c, score
        if best_tx is None:
            raise PlacementError(f"No Tx candidate has {n} separated receivers")

        rx_index, rows = rows_for(best_tx)
        notes = [f"Tx at candidate {best_tx}: log det with all receivers {best_score:.3f}"]
        chosen: list[int] = []
        for _ in range(n):
            best_row, best_gain = None, -math.inf
            for pos, j in enumerate(rx_index):
                if pos in chosen:
                    continue
                if any(np.linalg.norm(points[j] - points[rx_index[c]]) < MIN_SEPARATION for c in chosen):
                    continue
                score = log_det(gram + np.outer(rows[pos], rows[pos]))
                if score > best_gain:
                    best_row, best_gain = pos, score
            if best_row is None:
                raise PlacementError(f"Ran out of separated receivers for trial {trial_number + 1}")
            chosen.append(best_row)
            gram += np.outer(rows[best_row], rows[best_row])
            notes.append(f"Rx at candidate {rx_index[best_row]}: log det {best_gain:.3f}")
        trials.append(
            TrialConfig(
                tx=Vec3.of(points[best_tx]),
                rx=tuple(Vec3.of(points[rx_index[pos]]) for pos in chosen),
            )
        )
        rationale.append(tuple(notes))
        logger.info(f"Greedy trial {trial_number + 1}/{m}: log det {log_det(gram):.3f}")
    return PlacementPlan(trials=tuple(trials), source="greedy", rationale=tuple(rationale))


def _parse_position_answer(raw: str, scene: Scene, n: int, m: int):
    items = extract_json(raw)
    if not isinstance(items, list):
        raise VlmResponseError("Expected a JSON list of positions", raw=raw)
    groups: list[list[dict]] = []
    for item in items:
        if not isinstance(item, dict) or "type" not in item:
            raise VlmResponseError("Every position needs a 'type' field", raw=raw)
        try:
            item = {**item, "point": (float(item["x"]), float(item["y"]), float(item["z"]))}
        except (KeyError, TypeError, ValueError) as e:
            raise VlmResponseError(f"Position {item.get('id')!r} has bad coordinates", raw=raw) from e
        kind = str(item["type"]).strip().lower()
        if kind == "tx":
            groups.append([item])
        elif kind == "rx":
            if not groups:
                raise PlacementCountError("A receiver was listed before any transmitter")
            groups[-1].append(item)
        else:
            raise VlmResponseError(f"Unknown position type {item['type']!r}", raw=raw)

    if len(groups) != m:
        raise PlacementCountError(f"Expected {m} trials, the answer has {len(groups)}")
    for index, group in enumerate(groups):
        if len(group) - 1 != n:
            raise PlacementCountError(
                f"Trial {index + 1} has {len(group) - 1} receivers, expected {n}"
            )

    problems = []
    for group in groups:
        labels = [str(item.get("id", "?")) for item in group]
        points = [item["point"] for item in group]
        for label, point in zip(labels, points):
            problem = point_problem(scene, point)
            if problem:
                problems.append(f"{label} at {point}: {problem}")
        problems.extend(_separation_problems(points, labels))

    trials = tuple(
        TrialConfig(tx=Vec3.of(group[0]["point"]), rx=tuple(Vec3.of(i["point"]) for i in group[1:]))
        for group in groups
    ) if not problems else ()
    rationale = tuple(tuple(str(i.get("reasoning", "")) for i in group) for group in groups)
    return trials, rationale, problems


def vlm_placement(scene_xml: str | None, image_ref, n: int, m: int, client, scene: Scene | None = None) -> PlacementPlan:
    """Ask the model for positions, validate them and repair once if needed."""
    if scene is None:
        if scene_xml is None:
            raise PlacementError("vlm_placement needs the scene XML or a Scene")
        scene = parse_scene_xml(scene_xml)
    scene_xml = scene_xml or scene_to_xml(scene)
    inputs = {"scene_xml": scene_xml, "n": n, "m": m, "image_path": image_ref}
    context = {"scene": scene, "n": n, "m": m}

    raw = client.complete("pos", render_prompt("pos", inputs), image_path=image_ref, context=context)
    trials, rationale, problems = _parse_position_answer(raw, scene, n, m)
    if problems:
        logger.warning(f"VLM proposed {len(problems)} invalid positions, requesting a repair")
        repair_parts = render_prompt("pos", {**inputs, "repair": problems, "previous": raw})
        raw = client.complete("pos", repair_parts, image_path=image_ref, context=context)
        trials, rationale, problems = _parse_position_answer(raw, scene, n, m)
        if problems:
            raise PlacementBoundsError(
                "VLM positions still invalid after repair: " + "; ".join(problems), problems
            )
    plan = PlacementPlan(trials=trials, source="vlm", rationale=rationale)
    validate_plan(scene, plan, n, m)
    return plan
