"""
Gradient-based inversion: NAE loss, Adam updates with clamping, the
loss/parameter stability stopping rule and per-iteration tracing.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import NonFiniteLossError, ShapeMismatchError
from .forward_rt import RtConfig, TraceResult, received_strength_with_grad, trace_trials
from .materials import (
    SIGMA_MAX,
    SIGMA_MIN,
    GroundTruth,
    SigmaVector,
    as_sigma_array,
    load_material_table,
    slot_permittivities,
)

logger = logging.getLogger(__name__)

MEASUREMENT_FLOOR = 1e-15
CSV_FLOAT_FORMAT = "{:.12e}"


@dataclass(frozen=True, eq=False)
class Measurement:
    """Measured strengths in watts for one trial, floored at MEASUREMENT_FLOOR."""

    strengths: np.ndarray

    def __post_init__(self):
        arr = np.array(self.strengths, dtype=float).reshape(-1)
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ShapeMismatchError("Measured strengths must be finite and non-negative")
        arr = np.maximum(arr, MEASUREMENT_FLOOR)
        arr.flags.writeable = False
        object.__setattr__(self, "strengths", arr)

    def __len__(self):
        return len(self.strengths)

    def to_list(self) -> list[float]:
        return self.strengths.tolist()


@dataclass(frozen=True)
class StopCriteria:
    alpha: float = 1e-5
    beta: float = 1e-4
    patience: int = 50
    max_iter: int = 1000

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.patience > 0 and self.max_iter > 0):
            raise ValueError("Stop criteria must all be positive")


@dataclass(frozen=True)
class EstimateOptions:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("sigma bounds must satisfy 0 < sigma_min < sigma_max")


@dataclass(frozen=True, eq=False)
class AdamState:
    sigma: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, sigma) -> AdamState:
        sigma = np.array(sigma, dtype=float).reshape(-1)
        return cls(sigma=sigma, m=np.zeros_like(sigma), v=np.zeros_like(sigma), t=0)


@dataclass(frozen=True)
class IterationRecord:
    i: int
    loss: float
    sigma: tuple[float, ...]
    mre: float | None = None
    t_forward: float = 0.0
    t_grad: float = 0.0
    t_update: float = 0.0


@dataclass
class EstimationTrace:
    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str | None = None

    def __len__(self):
        return len(self.records)

    @property
    def final_iteration(self) -> int:
        return self.records[-1].i if self.records else 0

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def mres(self) -> list[float | None]:
        return [r.mre for r in self.records]

    @property
    def num_slots(self) -> int:
        return len(self.records[0].sigma) if self.records else 0

    def iterations_to_mre(self, threshold: float) -> int | None:
        for record in self.records:
            if record.mre is not None and record.mre <= threshold:
                return record.i
        return None

    def iteration_seconds(self) -> float:
        return sum(r.t_forward + r.t_grad + r.t_update for r in self.records)

    def mean_timings(self) -> dict:
        if not self.records:
            return {"forward": 0.0, "gradient": 0.0, "update": 0.0}
        count = len(self.records)
        return {
            "forward": sum(r.t_forward for r in self.records) / count,
            "gradient": sum(r.t_grad for r in self.records) / count,
            "update": sum(r.t_update for r in self.records) / count,
        }

    def csv_header(self) -> list[str]:
        sigma_cols = [f"sigma_{k + 1}" for k in range(self.num_slots)]
        return ["iter", "loss", "mre", *sigma_cols, "t_forward_s", "t_grad_s", "t_update_s"]

    def to_csv(self, path=None) -> str:
        """Render the trace as fixed-precision CSV, writing it to ``path`` if given."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.csv_header())
        fmt = CSV_FLOAT_FORMAT.format
        for r in self.records:
            writer.writerow(
                [
                    r.i,
                    fmt(r.loss),
                    "" if r.mre is None else fmt(r.mre),
                    *(fmt(s) for s in r.sigma),
                    fmt(r.t_forward),
                    fmt(r.t_grad),
                    fmt(r.t_update),
                ]
            )
        text = buffer.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> EstimationTrace:
        reader = csv.DictReader(io.StringIO(text))
        sigma_cols = [c for c in reader.fieldnames or [] if c.startswith("sigma_")]
        records = [
            IterationRecord(
                i=int(row["iter"]),
                loss=float(row["loss"]),
                sigma=tuple(float(row[c]) for c in sigma_cols),
                mre=float(row["mre"]) if row["mre"] else None,
                t_forward=float(row["t_forward_s"]),
                t_grad=float(row["t_grad_s"]),
                t_update=float(row["t_update_s"]),
            )
            for row in reader
        ]
        return cls(records=records)


def _as_strengths(values) -> np.ndarray:
    if isinstance(values, Measurement):
        return values.strengths
    return np.asarray(values, dtype=float).reshape(-1)


def nae_loss(measured, simulated) -> float:
    """Sum over trials of the mean normalized absolute error per trial."""
    if len(measured) != len(simulated):
        raise ShapeMismatchError(f"{len(measured)} measured trials vs {len(simulated)} simulated")
    total = 0.0
    for r, s in zip(measured, simulated):
        r = np.maximum(_as_strengths(r), MEASUREMENT_FLOOR)
        s = _as_strengths(s)
        if r.shape != s.shape:
            raise ShapeMismatchError(f"Trial shapes differ: {r.shape} vs {s.shape}")
        if r.size:
            total += float(np.mean(np.abs(r - s) / r))
    return total


def _loss_and_grad_timed(traces, sigma, eps, config, measured):
    if len(traces) != len(measured):
        raise ShapeMismatchError(f"{len(traces)} traces vs {len(measured)} measurements")
    sigma = as_sigma_array(sigma)
    loss = 0.0
    gradient = np.zeros_like(sigma)
    t_forward = 0.0
    t_grad = 0.0
    for trace, measurement in zip(traces, measured):
        r = np.maximum(_as_strengths(measurement), MEASUREMENT_FLOOR)
        evaluation = received_strength_with_grad(trace, sigma, eps, config)
        started = time.perf_counter()
        if evaluation.strengths.shape != r.shape:
            raise ShapeMismatchError(
                f"Measurement has {r.size} receivers, trace has {evaluation.strengths.size}"
            )
        if r.size:
            residual = r - evaluation.strengths
            loss += float(np.mean(np.abs(residual) / r))
            weights = -np.sign(residual) / (r.size * r)
            gradient += weights @ evaluation.jacobian
        t_forward += evaluation.timings["forward"]
        t_grad += evaluation.timings["gradient"] + (time.perf_counter() - started)
    return loss, gradient, t_forward, t_grad


def loss_and_grad(traces, sigma, eps, config: RtConfig, measured) -> tuple[float, np.ndarray]:
    """NAE loss and its gradient with respect to sigma; sign(0) is taken as 0."""
    loss, gradient, _, _ = _loss_and_grad_timed(traces, sigma, eps, config, measured)
    return loss, gradient


def adam_step(state: AdamState, gradient, options: EstimateOptions) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step, clamped to the sigma bounds."""
    g = np.asarray(gradient, dtype=float).reshape(-1)
    if g.shape != state.sigma.shape:
        raise ShapeMismatchError(f"Gradient has {g.size} entries, state has {state.sigma.size}")
    t = state.t + 1
    m = options.beta1 * state.m + (1.0 - options.beta1) * g
    v = options.beta2 * state.v + (1.0 - options.beta2) * (g * g)
    m_hat = m / (1.0 - options.beta1**t)
    v_hat = v / (1.0 - options.beta2**t)
    sigma = state.sigma - options.lr * m_hat / (np.sqrt(v_hat) + options.adam_eps)
    sigma = np.clip(sigma, options.sigma_min, options.sigma_max)
    return sigma, AdamState(sigma=sigma, m=m, v=v, t=t)


def _window_stable(records, criteria: StopCriteria, check_sigma: bool = True) -> bool:
    if len(records) < criteria.patience + 1:
        return False
    window = records[-(criteria.patience + 1) :]
    for before, after in zip(window[:-1], window[1:]):
        if abs(before.loss - after.loss) > criteria.alpha:
            return False
        if check_sigma and np.max(np.abs(np.subtract(before.sigma, after.sigma)), initial=0.0) > criteria.beta:
            return False
    return True


def loss_stable(trace: EstimationTrace, criteria: StopCriteria) -> bool:
    """True when the last ``patience`` loss changes are all within ``alpha``, whatever sigma did."""
    return _window_stable(trace.records, criteria, check_sigma=False)


def check_stop(trace: EstimationTrace, criteria: StopCriteria) -> bool:
    """True once loss and every sigma have been stable for ``patience`` steps,
    or once ``max_iter`` records exist."""
    return len(trace.records) >= criteria.max_iter or _window_stable(trace.records, criteria)


def stop_reason(trace: EstimationTrace, criteria: StopCriteria) -> str | None:
    if _window_stable(trace.records, criteria):
        return "converged"
    if len(trace.records) >= criteria.max_iter:
        return "max_iter"
    return None


def mre(sigma, truth) -> float:
    """Mean relative error of ``sigma`` against the true conductivities."""
    reference = truth.sigma_hat if isinstance(truth, GroundTruth) else truth
    reference = as_sigma_array(reference)
    estimate_ = as_sigma_array(sigma)
    if estimate_.shape != reference.shape:
        raise ShapeMismatchError(f"{estimate_.size} estimates vs {reference.size} true values")
    if reference.size == 0:
        return 0.0
    return float(np.mean(np.abs(estimate_ - reference) / reference))


def estimate(
    scene,
    trials,
    measured,
    sigma_init,
    eps=None,
    config: RtConfig | None = None,
    options: EstimateOptions | None = None,
    criteria: StopCriteria | None = None,
    truth: GroundTruth | None = None,
    traces: list[TraceResult] | None = None,
    on_iteration=None,
) -> tuple[SigmaVector, EstimationTrace]:
    """Run the inverse loop from ``sigma_init`` until the stop rule fires.

    Path geometry is traced once and reused for every iteration. ``truth`` is
    only used to fill in the MRE column.
    """
    config = config or RtConfig()
    options = options or EstimateOptions()
    criteria = criteria or StopCriteria()
    if eps is None:
        eps = slot_permittivities(load_material_table(), scene.material_names)
    if traces is None:
        traces = trace_trials(scene, trials, config)
    if len(traces) != len(measured):
        raise ShapeMismatchError(f"{len(traces)} trials vs {len(measured)} measurements")

    state = AdamState.fresh(as_sigma_array(sigma_init, scene.num_slots))
    trace = EstimationTrace()
    for i in range(1, criteria.max_iter + 1):
        iteration_started = time.perf_counter()
        loss, gradient, t_forward, t_grad = _loss_and_grad_timed(
            traces, state.sigma, eps, config, measured
        )
        if not (math.isfinite(loss) and np.all(np.isfinite(gradient))):
            raise NonFiniteLossError(
                f"Non-finite loss {loss!r} at iteration {i}, sigma={state.sigma.tolist()}"
            )
        record = IterationRecord(
            i=i,
            loss=loss,
            sigma=tuple(state.sigma.tolist()),
            mre=mre(state.sigma, truth) if truth is not None else None,
            t_forward=t_forward,
            t_grad=t_grad,
        )
        trace.records.append(record)
        if on_iteration is not None:
            on_iteration(record)
        stop = check_stop(trace, criteria)
        if not stop:
            _, state = adam_step(state, gradient, options)
        # update time is whatever the iteration spent outside forward and gradient
        elapsed = time.perf_counter() - iteration_started
        trace.records[-1] = replace(record, t_update=max(elapsed - t_forward - t_grad, 0.0))
        if stop:
            break

    trace.stop_reason = stop_reason(trace, criteria)
    final = trace.records[-1]
    logger.info(
        f"Estimation stopped after {final.i} iterations ({trace.stop_reason}), loss {final.loss:.3e}"
    )
    return SigmaVector(final.sigma, clamp=True), trace
