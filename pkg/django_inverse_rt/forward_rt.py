"""
Differentiable forward ray tracer.

``trace_paths`` enumerates the conductivity-independent path geometry for one
trial; ``received_strength`` and ``received_strength_with_grad`` evaluate the
received power and its exact Jacobian with respect to the K conductivities on
that cached geometry.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.constants import epsilon_0, speed_of_light

from .exceptions import ShapeMismatchError, TraceError
from .geometry import (
    EPSILON_OFFSET,
    Scene,
    TrialConfig,
    Vec3,
    launch_directions,
    mirror_point,
    nearest_hits,
    reflect_many,
    segment_blocked,
)
from .materials import ItuEntry, as_sigma_array

logger = logging.getLogger(__name__)

TRACE_FORMAT = "django_inverse_rt.trace"
TRACE_VERSION = 1

AGGREGATIONS = ("incoherent", "coherent")
POLARIZATIONS = ("unpolarized_average", "te_only", "tm_only")

MIN_INCIDENCE_COS = 1e-9
DEFAULT_P_TX = 10 ** (44 / 10) / 1000.0


@dataclass(frozen=True)
class RtConfig:
    f_c: float = 3.5e9
    p_tx: float = DEFAULT_P_TX
    g_tx: float = 1.0
    g_rx: float = 1.0
    u_ray: int = 5000
    depth: int = 4
    rx_radius: float = 0.15
    aggregation: str = "incoherent"
    polarization: str = "unpolarized_average"

    def __post_init__(self):
        if not self.f_c > 0:
            raise TraceError(f"f_c must be positive, got {self.f_c}")
        if not self.p_tx > 0:
            raise TraceError(f"p_tx must be positive, got {self.p_tx}")
        if not (self.g_tx > 0 and self.g_rx > 0):
            raise TraceError("Antenna gains must be positive")
        if self.u_ray < 1:
            raise TraceError(f"u_ray must be >= 1, got {self.u_ray}")
        if self.depth < 0:
            raise TraceError(f"depth must be >= 0, got {self.depth}")
        if not self.rx_radius > 0:
            raise TraceError(f"rx_radius must be positive, got {self.rx_radius}")
        if self.aggregation not in AGGREGATIONS:
            raise TraceError(f"Unknown aggregation {self.aggregation!r}")
        if self.polarization not in POLARIZATIONS:
            raise TraceError(f"Unknown polarization model {self.polarization!r}")

    @property
    def wavelength(self) -> float:
        return speed_of_light / self.f_c

    @property
    def f_ghz(self) -> float:
        return self.f_c / 1e9

    def replace(self, **overrides) -> RtConfig:
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RtConfig:
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise TraceError(f"Unknown RtConfig fields: {sorted(unknown)}")
        return cls(**data)


class Interaction(NamedTuple):
    surface_id: int
    material_slot: int
    incidence_cos: float


@dataclass(frozen=True)
class PathRecord:
    receiver_index: int
    interactions: tuple[Interaction, ...]
    total_length: float

    @property
    def segment_count(self) -> int:
        return len(self.interactions) + 1

    @property
    def key(self) -> tuple:
        return (self.receiver_index, tuple(i.surface_id for i in self.interactions))

    @property
    def slots(self) -> tuple[int, ...]:
        return tuple(i.material_slot for i in self.interactions)


class CompiledPaths(NamedTuple):
    receiver: np.ndarray
    length: np.ndarray
    slots: np.ndarray
    cos: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class TraceResult:
    """Every path found for one trial, sorted by (receiver, surface sequence)."""

    paths: tuple[PathRecord, ...]
    num_receivers: int
    num_slots: int
    trial: TrialConfig | None = None

    @property
    def per_receiver_counts(self) -> list[int]:
        counts = [0] * self.num_receivers
        for path in self.paths:
            counts[path.receiver_index] += 1
        return counts

    @property
    def touched_slots(self) -> set[int]:
        return {slot for path in self.paths for slot in path.slots}

    @cached_property
    def compiled(self) -> CompiledPaths:
        count = len(self.paths)
        width = max([1] + [len(p.interactions) for p in self.paths])
        slots = np.full((count, width), -1, dtype=int)
        cos = np.ones((count, width))
        for row, path in enumerate(self.paths):
            for col, interaction in enumerate(path.interactions):
                slots[row, col] = interaction.material_slot
                cos[row, col] = interaction.incidence_cos
        return CompiledPaths(
            receiver=np.array([p.receiver_index for p in self.paths], dtype=int),
            length=np.array([p.total_length for p in self.paths], dtype=float),
            slots=slots,
            cos=cos,
            valid=slots >= 0,
        )


@dataclass(eq=False)
class GradEval:
    strengths: np.ndarray
    jacobian: np.ndarray
    timings: dict = dataclasses.field(default_factory=dict)


def complex_permittivity(eps_real, sigma, f_c):
    return eps_real - 1j * np.asarray(sigma) / (2.0 * math.pi * f_c * epsilon_0)


def _fresnel_terms(eta, cos):
    """Vectorized (Gamma_TE, Gamma_TM, dGamma_TE/deta, dGamma_TM/deta).

    The TM sign makes both coefficients equal (1 - sqrt(eta)) / (1 + sqrt(eta))
    at normal incidence.
    """
    sin2 = 1.0 - cos * cos
    root = np.sqrt(eta - sin2 + 0j)
    te_den = cos + root
    tm_den = root + eta * cos
    gamma_te = (cos - root) / te_den
    gamma_tm = (root - eta * cos) / tm_den
    with np.errstate(divide="ignore", invalid="ignore"):
        dte = -cos / (root * te_den**2)
        dtm = cos * (2.0 * sin2 - eta) / (root * tm_den**2)
    return gamma_te, gamma_tm, dte, dtm


def fresnel_reflection(eps_real, sigma, f_c, incidence_cos, polarization="TE") -> complex:
    """Complex reflection coefficient of a half-space, TE or TM."""
    if not eps_real >= 1.0:
        raise TraceError(f"eps_real must be >= 1, got {eps_real}")
    if not sigma >= 0.0:
        raise TraceError(f"sigma must be >= 0, got {sigma}")
    if not 0.0 < incidence_cos <= 1.0:
        raise TraceError(f"incidence_cos must be in (0, 1], got {incidence_cos}")
    pol = polarization.upper()
    if pol not in ("TE", "TM"):
        raise TraceError(f"Unknown polarization {polarization!r}")
    eta = complex_permittivity(eps_real, sigma, f_c)
    te, tm, _, _ = _fresnel_terms(np.asarray(eta), np.asarray(float(incidence_cos)))
    return complex(te if pol == "TE" else tm)


def _power_weight(eta, cos, polarization, deta_dsigma=None):
    """Per-bounce power weight w = |Gamma|^2 and, optionally, dw/dsigma."""
    te, tm, dte, dtm = _fresnel_terms(eta, cos)
    w_te = np.abs(te) ** 2
    w_tm = np.abs(tm) ** 2
    if polarization == "te_only":
        w = w_te
    elif polarization == "tm_only":
        w = w_tm
    else:
        w = 0.5 * (w_te + w_tm)
    if deta_dsigma is None:
        return w, None
    dw_te = 2.0 * np.real(np.conj(te) * dte * deta_dsigma)
    dw_tm = 2.0 * np.real(np.conj(tm) * dtm * deta_dsigma)
    if polarization == "te_only":
        dw = dw_te
    elif polarization == "tm_only":
        dw = dw_tm
    else:
        dw = 0.5 * (dw_te + dw_tm)
    return w, dw


def friis(config: RtConfig, length) -> np.ndarray:
    """Free-space received power at ``length`` meters."""
    scale = config.wavelength / (4.0 * math.pi * np.asarray(length, dtype=float))
    return config.p_tx * config.g_tx * config.g_rx * scale**2


def _check_inside(scene: Scene, trial: TrialConfig):
    for label, point in [("Tx", trial.tx)] + [(f"Rx{i}", p) for i, p in enumerate(trial.rx)]:
        if not scene.is_free(point, margin=EPSILON_OFFSET):
            raise TraceError(f"{label} at {tuple(point)} is outside the room or inside an object")


def _rebuild_path(scene: Scene, tx: np.ndarray, rx: np.ndarray, sequence: tuple[int, ...]):
    """Exact specular path through ``sequence`` via the image method, or None."""
    surfaces = [scene.surface(sid) for sid in sequence]
    images = []
    source = tx
    for surface in surfaces:
        source = mirror_point(source, surface)
        images.append(source)

    points = [None] * len(surfaces)
    target = rx
    for i in range(len(surfaces) - 1, -1, -1):
        surface = surfaces[i]
        axis = surface.axis
        plane = surface.center[axis]
        start, end = target, images[i]
        denom = end[axis] - start[axis]
        if denom == 0.0:
            return None
        s = (plane - start[axis]) / denom
        if not 0.0 < s < 1.0:
            return None
        point = start + s * (end - start)
        offset = np.abs(point - np.array(surface.center)) - np.array(surface.half_extents)
        if np.any(offset > 1e-9):
            return None
        point[axis] = plane
        points[i] = point
        target = point

    chain = [tx, *points, rx]
    interactions = []
    for i, surface in enumerate(surfaces):
        normal = np.array(surface.normal)
        incoming = chain[i] - chain[i + 1]
        outgoing = chain[i + 2] - chain[i + 1]
        if np.dot(incoming, normal) <= 0.0 or np.dot(outgoing, normal) <= 0.0:
            return None
        cos = float(np.dot(incoming, normal) / np.linalg.norm(incoming))
        if cos <= MIN_INCIDENCE_COS:
            return None
        interactions.append(Interaction(surface.id, surface.material_slot, min(cos, 1.0)))

    for start, end in zip(chain[:-1], chain[1:]):
        if segment_blocked(scene, start, end):
            return None
    length = float(sum(np.linalg.norm(b - a) for a, b in zip(chain[:-1], chain[1:])))
    return tuple(interactions), length


def _discover_sequences(scene: Scene, tx: np.ndarray, receivers: np.ndarray, config: RtConfig):
    """Launch the ray fan and collect (receiver, surface sequence) candidates."""
    candidates = set()
    if config.depth == 0 or len(receivers) == 0 or not scene.surfaces:
        return candidates
    arrays = scene.arrays
    directions = launch_directions(config.u_ray)
    origins = np.repeat(tx[None, :], len(directions), axis=0)
    history = np.empty((len(directions), 0), dtype=int)
    radius2 = config.rx_radius**2

    for bounce in range(config.depth + 1):
        t, index = nearest_hits(scene, origins, directions)
        if bounce > 0:
            rel = receivers[None, :, :] - origins[:, None, :]
            along = np.einsum("rnk,rk->rn", rel, directions)
            along = np.clip(along, 0.0, t[:, None])
            closest = origins[:, None, :] + along[..., None] * directions[:, None, :]
            dist2 = np.sum((closest - receivers[None]) ** 2, axis=-1)
            for ray, rx_index in zip(*np.nonzero(dist2 <= radius2)):
                candidates.add((int(rx_index), tuple(history[ray].tolist())))
        if bounce == config.depth:
            break
        alive = index >= 0
        if not np.any(alive):
            break
        origins = origins[alive] + t[alive, None] * directions[alive]
        directions = reflect_many(directions[alive], arrays.normals[index[alive]])
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        history = np.concatenate([history[alive], index[alive, None]], axis=1)
    return candidates


def trace_paths(scene: Scene, trial: TrialConfig, config: RtConfig) -> TraceResult:
    """Enumerate every LoS and specular path from the trial's Tx to each Rx."""
    _check_inside(scene, trial)
    tx = trial.tx.as_array()
    receivers = np.array([p for p in trial.rx], dtype=float).reshape(-1, 3)

    paths = []
    for n, rx in enumerate(receivers):
        if not segment_blocked(scene, tx, rx):
            paths.append(PathRecord(n, (), float(np.linalg.norm(rx - tx))))

    candidates = _discover_sequences(scene, tx, receivers, config)
    rejected = 0
    for rx_index, sequence in sorted(candidates):
        rebuilt = _rebuild_path(scene, tx, receivers[rx_index], sequence)
        if rebuilt is None:
            rejected += 1
            continue
        interactions, length = rebuilt
        paths.append(PathRecord(rx_index, interactions, length))

    paths.sort(key=lambda p: p.key)
    logger.debug(
        f"Traced {len(paths)} paths for {len(receivers)} receivers "
        f"({len(candidates)} candidates, {rejected} rejected)"
    )
    return TraceResult(tuple(paths), len(receivers), scene.num_slots, trial=trial)


def trace_trials(scene: Scene, trials, config: RtConfig) -> list[TraceResult]:
    return [trace_paths(scene, trial, config) for trial in trials]


def _check_dims(trace: TraceResult, sigma, eps):
    sigma = as_sigma_array(sigma)
    eps = np.asarray(eps, dtype=float).reshape(-1)
    if len(sigma) != trace.num_slots:
        raise ShapeMismatchError(f"sigma has {len(sigma)} entries, trace expects {trace.num_slots}")
    if len(eps) != trace.num_slots:
        raise ShapeMismatchError(f"eps has {len(eps)} entries, trace expects {trace.num_slots}")
    return sigma, eps


def _prefix_suffix(factors):
    ones = np.ones((factors.shape[0], 1), dtype=factors.dtype)
    prefix = np.cumprod(np.concatenate([ones, factors[:, :-1]], axis=1), axis=1)
    suffix = np.cumprod(np.concatenate([ones, factors[:, :0:-1]], axis=1), axis=1)[:, ::-1]
    return prefix, suffix


def _bounce_inputs(trace: TraceResult, sigma, eps, config: RtConfig):
    compiled = trace.compiled
    safe = np.where(compiled.valid, compiled.slots, 0)
    if trace.num_slots == 0:
        eta = np.ones(safe.shape, dtype=complex)
    else:
        eta = complex_permittivity(eps[safe], sigma[safe], config.f_c)
    return compiled, safe, eta


def _evaluate(trace: TraceResult, sigma, eps, config: RtConfig, with_grad: bool) -> GradEval:
    sigma, eps = _check_dims(trace, sigma, eps)
    if config.aggregation == "coherent":
        return _evaluate_coherent(trace, sigma, eps, config, with_grad)

    started = time.perf_counter()
    compiled, safe, eta = _bounce_inputs(trace, sigma, eps, config)
    deta = -1j / (2.0 * math.pi * config.f_c * epsilon_0) if with_grad else None
    w, dw = _power_weight(eta, compiled.cos, config.polarization, deta)
    w = np.where(compiled.valid, w, 1.0)
    base = friis(config, compiled.length)
    path_power = base * np.prod(w, axis=1)
    strengths = np.bincount(compiled.receiver, weights=path_power, minlength=trace.num_receivers)
    forward_done = time.perf_counter()

    jacobian = np.zeros((trace.num_receivers, trace.num_slots))
    if with_grad and len(trace.paths):
        dw = np.where(compiled.valid, dw, 0.0)
        prefix, suffix = _prefix_suffix(w)
        contrib = base[:, None] * dw * prefix * suffix
        rows = np.broadcast_to(compiled.receiver[:, None], safe.shape)[compiled.valid]
        np.add.at(jacobian, (rows, safe[compiled.valid]), contrib[compiled.valid])
    return GradEval(
        strengths=strengths.astype(float),
        jacobian=jacobian,
        timings={
            "forward": forward_done - started,
            "gradient": time.perf_counter() - forward_done,
        },
    )


def _evaluate_coherent(trace: TraceResult, sigma, eps, config: RtConfig, with_grad: bool) -> GradEval:
    """Complex path sum per polarization; unpolarized averages TE and TM powers."""
    started = time.perf_counter()
    compiled, safe, eta = _bounce_inputs(trace, sigma, eps, config)
    te, tm, dte, dtm = _fresnel_terms(eta, compiled.cos)
    deta = -1j / (2.0 * math.pi * config.f_c * epsilon_0)
    amplitude = np.sqrt(friis(config, compiled.length)) * np.exp(
        -2j * math.pi * compiled.length / config.wavelength
    )
    chains = {"te_only": [(te, dte)], "tm_only": [(tm, dtm)]}.get(
        config.polarization, [(te, dte), (tm, dtm)]
    )
    n, k = trace.num_receivers, trace.num_slots
    strengths = np.zeros(n)
    jacobian = np.zeros((n, k))
    gradient_seconds = 0.0
    for gamma, dgamma in chains:
        gamma = np.where(compiled.valid, gamma, 1.0 + 0j)
        field_sum = np.zeros(n, dtype=complex)
        np.add.at(field_sum, compiled.receiver, amplitude * np.prod(gamma, axis=1))
        strengths += np.abs(field_sum) ** 2 / len(chains)
        if with_grad and len(trace.paths):
            grad_started = time.perf_counter()
            dgamma = np.where(compiled.valid, dgamma * deta, 0.0)
            prefix, suffix = _prefix_suffix(gamma)
            contrib = amplitude[:, None] * dgamma * prefix * suffix
            dfield = np.zeros((n, k), dtype=complex)
            rows = np.broadcast_to(compiled.receiver[:, None], safe.shape)[compiled.valid]
            np.add.at(dfield, (rows, safe[compiled.valid]), contrib[compiled.valid])
            jacobian += 2.0 * np.real(np.conj(field_sum)[:, None] * dfield) / len(chains)
            gradient_seconds += time.perf_counter() - grad_started
    total = time.perf_counter() - started
    return GradEval(
        strengths=strengths,
        jacobian=jacobian,
        timings={"forward": total - gradient_seconds, "gradient": gradient_seconds},
    )


def received_strength(trace: TraceResult, sigma, eps, config: RtConfig) -> np.ndarray:
    """Received power per receiver in watts."""
    return _evaluate(trace, sigma, eps, config, with_grad=False).strengths


def received_strength_with_grad(trace: TraceResult, sigma, eps, config: RtConfig) -> GradEval:
    return _evaluate(trace, sigma, eps, config, with_grad=True)


def two_ray_oracle(tx, rx, floor_entry: ItuEntry, sigma_floor: float, config: RtConfig, floor_z: float = 0.0) -> float:
    """LoS plus one floor bounce, built from the image source in closed form."""
    tx = Vec3.of(tx).as_array()
    rx = Vec3.of(rx).as_array()
    if tx[2] <= floor_z or rx[2] <= floor_z:
        raise TraceError("Both points must be above the floor")
    image = tx.copy()
    image[2] = 2.0 * floor_z - tx[2]
    d_los = float(np.linalg.norm(rx - tx))
    d_ref = float(np.linalg.norm(rx - image))
    cos = (tx[2] + rx[2] - 2.0 * floor_z) / d_ref
    eta = complex_permittivity(floor_entry.eps_real, sigma_floor, config.f_c)
    if config.aggregation == "incoherent":
        w, _ = _power_weight(np.asarray(eta), np.asarray(cos), config.polarization)
        return float(friis(config, d_los) + friis(config, d_ref) * w)
    te, tm, _, _ = _fresnel_terms(np.asarray(eta), np.asarray(cos))
    gammas = {"te_only": [te], "tm_only": [tm]}.get(config.polarization, [te, tm])
    k0 = 2.0 * math.pi / config.wavelength
    total = 0.0
    for gamma in gammas:
        field = np.sqrt(friis(config, d_los)) * np.exp(-1j * k0 * d_los) + np.sqrt(
            friis(config, d_ref)
        ) * gamma * np.exp(-1j * k0 * d_ref)
        total += float(np.abs(field) ** 2) / len(gammas)
    return total


def trace_to_dict(trace: TraceResult) -> dict:
    return {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "num_receivers": trace.num_receivers,
        "num_slots": trace.num_slots,
        "trial": trace.trial.to_dict() if trace.trial else None,
        "paths": [
            {
                "receiver": p.receiver_index,
                "length": p.total_length,
                "interactions": [list(i) for i in p.interactions],
            }
            for p in trace.paths
        ],
    }


def trace_from_dict(data: dict) -> TraceResult:
    if data.get("format") != TRACE_FORMAT:
        raise TraceError("Not a trace cache file")
    if data.get("version") != TRACE_VERSION:
        raise TraceError(f"Unsupported trace cache version {data.get('version')!r}")
    try:
        paths = tuple(
            PathRecord(
                int(p["receiver"]),
                tuple(Interaction(int(s), int(k), float(c)) for s, k, c in p["interactions"]),
                float(p["length"]),
            )
            for p in data["paths"]
        )
        trial = TrialConfig.from_dict(data["trial"]) if data.get("trial") else None
        return TraceResult(paths, int(data["num_receivers"]), int(data["num_slots"]), trial=trial)
    except (KeyError, TypeError, ValueError) as e:
        raise TraceError(f"Malformed trace cache: {e!s}") from e


def save_trace(traces, path) -> None:
    """Write one or more traces to a JSON cache file."""
    items = [traces] if isinstance(traces, TraceResult) else list(traces)
    payload = {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "traces": [trace_to_dict(t) for t in items],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_trace(path) -> list[TraceResult]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise TraceError(f"Failed to read trace cache {path}: {e!s}") from e
    if data.get("format") != TRACE_FORMAT:
        raise TraceError("Not a trace cache file")
    if data.get("version") != TRACE_VERSION:
        raise TraceError(f"Unsupported trace cache version {data.get('version')!r}")
    return [trace_from_dict(item) for item in data.get("traces", [])]
