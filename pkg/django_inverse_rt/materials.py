"""
ITU-R P.2040 material table, the conductivity power law and ground-truth
generation.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .conf import get_setting
from .exceptions import MaterialError, ShapeMismatchError

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-6
SIGMA_MAX = 1e8

LAMBDA_MEAN = 1.0
LAMBDA_STD = 0.1
LAMBDA_BOUNDS = (0.8, 1.2)


def normalize_name(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", str(name).lower())


@dataclass(frozen=True)
class ItuEntry:
    name: str
    c: float
    d: float
    eps_real: float
    f_min_ghz: float | None = None
    f_max_ghz: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.c) and math.isfinite(self.d)):
            raise MaterialError(f"{self.name}: (c, d) must be finite")
        if self.c < 0:
            raise MaterialError(f"{self.name}: c must be >= 0, got {self.c}")
        if not self.eps_real >= 1.0:
            raise MaterialError(f"{self.name}: eps_real must be >= 1, got {self.eps_real}")

    def in_band(self, f_ghz: float) -> bool:
        if self.f_min_ghz is not None and f_ghz < self.f_min_ghz:
            return False
        return not (self.f_max_ghz is not None and f_ghz > self.f_max_ghz)


def conductivity_at(entry: ItuEntry, f_ghz: float) -> float:
    """sigma = c * f_ghz ** d, in S/m."""
    if not f_ghz > 0:
        raise MaterialError(f"Frequency must be positive, got {f_ghz} GHz")
    return entry.c * f_ghz**entry.d


@dataclass(frozen=True)
class MaterialTable:
    entries: dict[str, ItuEntry]
    aliases: dict[str, str] = field(default_factory=dict)
    uniform_exclude: tuple[str, ...] = ("Vacuum", "Metal")

    def __post_init__(self):
        for alias, target in self.aliases.items():
            if target not in self.entries:
                raise MaterialError(f"Alias {alias!r} points at unknown material {target!r}")

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    @property
    def _by_normalized(self) -> dict[str, ItuEntry]:
        return {normalize_name(name): entry for name, entry in self.entries.items()}

    @property
    def _aliases_normalized(self) -> dict[str, str]:
        return {normalize_name(alias): target for alias, target in self.aliases.items()}

    def _lookup(self, key: str) -> ItuEntry | None:
        entry = self._by_normalized.get(key)
        if entry is not None:
            return entry
        target = self._aliases_normalized.get(key)
        return self.entries[target] if target else None

    def resolve(self, name: str) -> ItuEntry:
        return resolve_material(self, name)

    def coefficients(self) -> dict[str, tuple[float, float]]:
        return {name: (entry.c, entry.d) for name, entry in self.entries.items()}

    def subset(self, names) -> MaterialTable:
        return MaterialTable(
            entries={n: self.entries[n] for n in names},
            aliases={a: t for a, t in self.aliases.items() if t in names},
            uniform_exclude=tuple(n for n in self.uniform_exclude if n in names),
        )

    @classmethod
    def from_dict(cls, data: dict) -> MaterialTable:
        try:
            entries = {}
            for raw in data["entries"]:
                entry = ItuEntry(
                    name=raw["name"],
                    c=float(raw["c"]),
                    d=float(raw["d"]),
                    eps_real=float(raw.get("eps_real", 1.0)),
                    f_min_ghz=raw.get("f_min_ghz"),
                    f_max_ghz=raw.get("f_max_ghz"),
                )
                entries[entry.name] = entry
        except (KeyError, TypeError, ValueError) as e:
            raise MaterialError(f"Malformed material table: {e!s}") from e
        if not entries:
            raise MaterialError("Material table is empty")
        return cls(
            entries=entries,
            aliases=dict(data.get("aliases", {})),
            uniform_exclude=tuple(data.get("uniform_exclude", ("Vacuum", "Metal"))),
        )


@lru_cache(maxsize=8)
def _load_table(path: str) -> MaterialTable:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MaterialError(f"Failed to load material table {path}: {e!s}") from e
    table = MaterialTable.from_dict(data)
    logger.debug(f"Loaded {len(table)} materials from {path}")
    return table


def load_material_table(path=None) -> MaterialTable:
    """Load the ITU table, defaulting to ``INVERSE_RT_MATERIAL_TABLE``."""
    return _load_table(str(path or get_setting("INVERSE_RT_MATERIAL_TABLE")))


def resolve_material(table: MaterialTable, name: str) -> ItuEntry:
    """Map a material or slot name to its table entry.

    Tries the normalized name, then the alias map, then the same two lookups
    with leading ``Prefix_`` tokens dropped (``Wall1_Brick`` -> ``Brick``).
    """
    entry = table._lookup(normalize_name(name))
    if entry is not None:
        return entry
    tokens = [t for t in re.split(r"[^A-Za-z0-9]+", str(name)) if t]
    for start in range(1, len(tokens)):
        entry = table._lookup(normalize_name("".join(tokens[start:])))
        if entry is not None:
            return entry
    raise MaterialError(f"Unknown material {name!r}")


class SigmaVector:
    """K conductivities in S/m, each within [SIGMA_MIN, SIGMA_MAX]."""

    __slots__ = ("_values",)

    def __init__(self, values, clamp: bool = False):
        arr = np.array(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise MaterialError("Conductivities must be finite")
        if clamp:
            arr = np.clip(arr, SIGMA_MIN, SIGMA_MAX)
        elif np.any(arr < SIGMA_MIN) or np.any(arr > SIGMA_MAX):
            raise MaterialError(
                f"Conductivities must lie in [{SIGMA_MIN:g}, {SIGMA_MAX:g}] S/m, got {arr.tolist()}"
            )
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __array__(self, dtype=None, copy=None):
        return np.array(self._values, dtype=dtype)

    def __len__(self):
        return len(self._values)

    def __iter__(self):
        return iter(self._values.tolist())

    def __getitem__(self, index):
        return self._values[index]

    def __eq__(self, other):
        if not isinstance(other, SigmaVector):
            return NotImplemented
        return self._values.tobytes() == other._values.tobytes()

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        return f"SigmaVector({self._values.tolist()})"

    def tolist(self) -> list[float]:
        return self._values.tolist()


def as_sigma_array(sigma, k: int | None = None) -> np.ndarray:
    arr = np.asarray(sigma, dtype=float).reshape(-1)
    if k is not None and len(arr) != k:
        raise ShapeMismatchError(f"Expected {k} conductivities, got {len(arr)}")
    return arr


@dataclass(frozen=True)
class GroundTruth:
    sigma_hat: SigmaVector
    lambda_draws: tuple[float, ...]
    seed: int
    material_names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "sigma_hat": self.sigma_hat.tolist(),
            "lambda_draws": list(self.lambda_draws),
            "seed": self.seed,
            "material_names": list(self.material_names),
        }


def truncated_normal(rng, size, mean=LAMBDA_MEAN, std=LAMBDA_STD, bounds=LAMBDA_BOUNDS):
    """Rejection-sampled normal draws restricted to ``bounds``."""
    low, high = bounds
    if std == 0:
        if not low <= mean <= high:
            raise MaterialError(f"mean {mean} lies outside {bounds}")
        return np.full(size, float(mean))
    out = np.empty(size)
    filled = 0
    while filled < size:
        draws = rng.normal(mean, std, size=max(2 * (size - filled), 16))
        draws = draws[(draws >= low) & (draws <= high)]
        take = min(len(draws), size - filled)
        out[filled : filled + take] = draws[:take]
        filled += take
    return out


def slot_entries(table: MaterialTable, material_names, f_ghz: float | None = None) -> list[ItuEntry]:
    entries = [resolve_material(table, name) for name in material_names]
    if f_ghz is not None:
        for name, entry in zip(material_names, entries):
            if not entry.in_band(f_ghz):
                logger.warning(f"{f_ghz} GHz is outside the ITU validity range of {entry.name} ({name})")
    return entries


def slot_conductivities(table: MaterialTable, material_names, f_ghz: float) -> np.ndarray:
    return np.array(
        [conductivity_at(entry, f_ghz) for entry in slot_entries(table, material_names, f_ghz)]
    )


def slot_permittivities(table: MaterialTable, material_names) -> np.ndarray:
    return np.array([entry.eps_real for entry in slot_entries(table, material_names)])


def perturb_ground_truth(
    table: MaterialTable,
    material_names,
    f_ghz: float,
    seed: int,
    std: float = LAMBDA_STD,
) -> GroundTruth:
    """sigma_hat_k = lambda_k * sigma_ITU_k, lambda ~ N(1, std^2) truncated to [0.8, 1.2]."""
    names = tuple(material_names)
    base = slot_conductivities(table, names, f_ghz)
    rng = np.random.default_rng(seed)
    draws = truncated_normal(rng, len(names), std=std)
    return GroundTruth(
        sigma_hat=SigmaVector(draws * base),
        lambda_draws=tuple(draws.tolist()),
        seed=seed,
        material_names=names,
    )
