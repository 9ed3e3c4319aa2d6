"""
Conductivity initialization strategies.
"""

from __future__ import annotations

import difflib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import MaterialError, VlmError, VlmResponseError
from .materials import (
    MaterialTable,
    SigmaVector,
    conductivity_at,
    normalize_name,
    resolve_material,
    slot_entries,
)
from .vlm import extract_json, render_prompt

logger = logging.getLogger(__name__)

STRATEGIES = ("itu", "vlm", "uniform", "random", "truth")
RANDOM_RANGE = (0.01, 0.06)
D_RANGE = (-1.0, 3.0)
FUZZY_THRESHOLD = 0.6


@dataclass(frozen=True)
class PriorInit:
    sigma_init: SigmaVector
    sources: tuple[str, ...]
    provenance: str = ""

    def __post_init__(self):
        if len(self.sources) != len(self.sigma_init):
            raise MaterialError("PriorInit needs one source tag per slot")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma_init.tolist(), "sources": list(self.sources)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, provenance: str = "") -> PriorInit:
        data = json.loads(text)
        return cls(SigmaVector(data["sigma"]), tuple(data["sources"]), provenance)


@dataclass(frozen=True)
class MaterialAssignment:
    material_name: str
    c: float
    d: float
    source: str = ""

    @property
    def is_plausible(self) -> bool:
        return (
            math.isfinite(self.c)
            and math.isfinite(self.d)
            and self.c >= 0
            and D_RANGE[0] <= self.d <= D_RANGE[1]
        )

    def conductivity(self, f_ghz: float) -> float:
        return self.c * f_ghz**self.d


def uniform_value(table: MaterialTable, f_ghz: float) -> float:
    values = [conductivity_at(e, f_ghz) for e in table if e.name not in table.uniform_exclude]
    if not values:
        raise MaterialError("No table entries left to average")
    return float(np.mean(values))


def uniform_init(table: MaterialTable, k: int, f_ghz: float) -> PriorInit:
    """Every slot at the mean table conductivity, Vacuum and Metal excluded."""
    value = uniform_value(table, f_ghz)
    return PriorInit(
        SigmaVector([value] * k, clamp=True),
        ("uniform",) * k,
        f"mean of {len(table) - len(table.uniform_exclude)} ITU entries at {f_ghz:g} GHz",
    )


def random_init(k: int, seed: int) -> PriorInit:
    if k < 1:
        raise MaterialError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(*RANDOM_RANGE, size=k)
    return PriorInit(
        SigmaVector(values, clamp=True),
        ("random",) * k,
        f"U[{RANDOM_RANGE[0]}, {RANDOM_RANGE[1]}] S/m, seed {seed}",
    )


def itu_init(table: MaterialTable, material_names, f_ghz: float) -> PriorInit:
    """Per-slot ITU conductivity with perfect material identification."""
    entries = slot_entries(table, material_names, f_ghz)
    values = [conductivity_at(e, f_ghz) for e in entries]
    return PriorInit(
        SigmaVector(values, clamp=True),
        tuple(f"itu:{e.name}" for e in entries),
        f"ITU-R P.2040 at {f_ghz:g} GHz",
    )


def truth_init(ground_truth) -> PriorInit:
    k = len(ground_truth.sigma_hat)
    return PriorInit(ground_truth.sigma_hat, ("truth",) * k, f"ground truth, seed {ground_truth.seed}")


def parse_assignments(raw: str) -> list[MaterialAssignment]:
    items = extract_json(raw)
    if not isinstance(items, list):
        raise VlmResponseError("Expected a JSON list of material assignments", raw=raw)
    assignments = []
    for item in items:
        try:
            assignment = MaterialAssignment(
                material_name=str(item["material_name"]),
                c=float(item["c"]),
                d=float(item["d"]),
                source=str(item.get("source", "")),
            )
        except (KeyError, TypeError, ValueError):
            logger.warning(f"Skipping malformed material assignment {item!r}")
            continue
        if not assignment.is_plausible:
            logger.warning(
                f"Rejecting implausible assignment {assignment.material_name}: "
                f"c={assignment.c}, d={assignment.d}"
            )
            continue
        assignments.append(assignment)
    return assignments


def _fuzzy_score(a: str, b: str) -> float:
    if not a or not b:
        return 0.0
    match = difflib.SequenceMatcher(None, a, b).find_longest_match(0, len(a), 0, len(b))
    return match.size / max(len(a), len(b))


def match_assignments(material_names, assignments) -> list[MaterialAssignment | None]:
    """Pick one assignment per slot: exact name, then substring, then fuzzy."""
    keyed = [(normalize_name(a.material_name), a) for a in assignments]
    matched = []
    for name in material_names:
        slot = normalize_name(name)
        found = next((a for key, a in keyed if key == slot), None)
        if found is None:
            found = next((a for key, a in keyed if key and (key in slot or slot in key)), None)
        if found is None:
            scored = [(_fuzzy_score(slot, key), a) for key, a in keyed]
            best = max(scored, key=lambda pair: pair[0], default=(0.0, None))
            if best[0] >= FUZZY_THRESHOLD:
                found = best[1]
        matched.append(found)
    return matched


def _source_tag(table: MaterialTable, assignment: MaterialAssignment) -> str:
    for candidate in (assignment.source.split(":", 1)[-1].strip(), assignment.material_name):
        try:
            return f"vlm:{resolve_material(table, candidate).name}"
        except MaterialError:
            continue
    return "vlm:unlisted"


def vlm_init(
    image_ref,
    table: MaterialTable,
    client,
    material_names,
    f_ghz: float,
    object_names=None,
) -> PriorInit:
    """Ask the model for (c, d) per object and map the answer onto the slots."""
    names = list(material_names)
    parts = render_prompt(
        "init", {"table": table, "image_path": image_ref, "object_names": object_names}
    )
    raw = client.complete(
        "init", parts, image_path=image_ref, context={"material_names": names, "table": table}
    )
    assignments = parse_assignments(raw)
    matched = match_assignments(names, assignments)
    if not any(matched):
        raise VlmResponseError("No scene material matched the model's answer", raw=raw)

    fallback = uniform_value(table, f_ghz)
    values, sources = [], []
    for name, assignment in zip(names, matched):
        if assignment is None:
            logger.warning(f"No VLM assignment for {name}, using the uniform value")
            values.append(fallback)
            sources.append("uniform")
        else:
            values.append(assignment.conductivity(f_ghz))
            sources.append(_source_tag(table, assignment))
    return PriorInit(
        SigmaVector(values, clamp=True),
        tuple(sources),
        f"VLM ({client.mode}) at {f_ghz:g} GHz, {sum(a is not None for a in matched)}/{len(names)} matched",
    )


def make_prior(strategy: str, scene, table: MaterialTable, f_ghz: float, seed: int = 0, client=None, image_ref=None, ground_truth=None) -> PriorInit:
    """Dispatch on an init strategy name."""
    names = scene.material_names
    if strategy == "itu":
        return itu_init(table, names, f_ghz)
    if strategy == "uniform":
        return uniform_init(table, len(names), f_ghz)
    if strategy == "random":
        return random_init(len(names), seed)
    if strategy == "truth":
        if ground_truth is None:
            raise MaterialError("The truth init needs the ground truth")
        return truth_init(ground_truth)
    if strategy == "vlm":
        if client is None:
            raise VlmError("The vlm init needs a VLM client")
        objects = [obj.name for obj in sorted(scene.objects, key=lambda o: o.material_slot)]
        return vlm_init(image_ref, table, client, names, f_ghz, object_names=objects)
    raise MaterialError(f"Unknown init strategy {strategy!r}")
