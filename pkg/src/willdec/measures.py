"""Finite atomic measures and time-gridded measure-valued trajectories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleMeasure:
    """Finite atomic measure: locations (k, d) with positive masses (k,)."""

    locations: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        mas = np.asarray(self.masses, dtype=float).reshape(-1)
        if loc.shape[0] != mas.shape[0]:
            raise MeasureError("locations and masses disagree in length")
        if (mas <= 0).any():
            raise MeasureError("atom masses must be positive")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "masses", mas)

    @classmethod
    def empty(cls, d: int = 1) -> "ParticleMeasure":
        return cls(locations=np.empty((0, d)), masses=np.empty(0))

    @classmethod
    def delta(cls, x, mass: float = 1.0) -> "ParticleMeasure":
        return cls(locations=np.atleast_2d(np.asarray(x, dtype=float)), masses=np.array([mass]))

    @property
    def n_atoms(self) -> int:
        return self.masses.shape[0]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def is_zero(self) -> bool:
        return self.n_atoms == 0

    def integrate(self, f) -> float:
        """<f, mu> for a vectorised field f."""
        if self.is_zero:
            return 0.0
        return float(np.dot(self.masses, np.asarray(f(self.locations), dtype=float)))

    def pair_values(self, values: np.ndarray) -> float:
        """<f, mu> given f already evaluated on the atoms."""
        if self.is_zero:
            return 0.0
        return float(np.dot(self.masses, values))

    def scaled(self, factor: float) -> "ParticleMeasure":
        if factor <= 0:
            raise MeasureError("scale factor must be positive")
        return ParticleMeasure(self.locations, self.masses * factor)

    def __add__(self, other: "ParticleMeasure") -> "ParticleMeasure":
        if self.is_zero:
            return other
        if other.is_zero:
            return self
        return ParticleMeasure(
            np.vstack([self.locations, other.locations]),
            np.concatenate([self.masses, other.masses]),
        )

    def weighted_mean(self) -> np.ndarray:
        if self.is_zero:
            raise MeasureError("weighted_mean of the zero measure")
        return self.locations.T @ self.masses / self.total_mass

    def weighted_dispersion(self) -> float:
        """Mass-weighted spatial standard deviation of the normalised measure."""
        if self.is_zero:
            raise MeasureError("dispersion of the zero measure")
        w = self.masses / self.total_mass
        mean = self.locations.T @ w
        var = ((self.locations - mean) ** 2).T @ w
        return float(math.sqrt(var.sum()))


@dataclass
class TrajectoryRecord:
    """Measure-valued path on a time grid, with grid-resolved death time.

    The zero measure is a trap: once a stored measure is empty all later
    ones are too, and extinction_time is the first grid time with an
    empty measure (inf if the path is alive at the last grid time).
    Assembled decomposition paths set enforce_trap=False (clone
    truncation can leave empty gaps before a late immigrant); there the
    death time is the start of the final run of empty measures.
    """

    times: np.ndarray
    measures: List[ParticleMeasure]
    enforce_trap: bool = True
    extinction_time: float = field(init=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.measures):
            raise MeasureError("times and measures disagree in length")
        ext = math.inf
        seen_zero = False
        for t, m in zip(self.times, self.measures):
            if seen_zero and not m.is_zero:
                if self.enforce_trap:
                    raise MeasureError("zero is a trap: nonempty measure after extinction")
                seen_zero = False
                ext = math.inf
            if m.is_zero and not seen_zero:
                seen_zero = True
                ext = float(t)
        self.extinction_time = ext

    @property
    def d(self) -> int:
        return self.measures[0].d

    def at(self, t: float) -> ParticleMeasure:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9:
            raise MeasureError(f"time {t} is not on the trajectory grid")
        return self.measures[idx]

    def total_mass_series(self) -> np.ndarray:
        return np.array([m.total_mass for m in self.measures])

    def shifted(self, offset: float) -> "TrajectoryRecord":
        return TrajectoryRecord(times=self.times + offset, measures=list(self.measures))


def trajectories_to_csv_rows(records: Iterable[TrajectoryRecord]) -> Iterable[str]:
    """CSV rows (replica_id, t, x_1..x_d, mass), deterministic order."""
    first = True
    for rid, rec in enumerate(records):
        if first:
            d = rec.d
            yield "replica_id,t," + ",".join(f"x_{j + 1}" for j in range(d)) + ",mass"
            first = False
        for t, m in zip(rec.times, rec.measures):
            for loc, mass in zip(m.locations, m.masses):
                coords = ",".join(repr(float(c)) for c in loc)
                yield f"{rid},{t!r},{coords},{mass!r}"


def summary_json(records: List[TrajectoryRecord], extra: Optional[dict] = None) -> str:
    ext = [None if math.isinf(r.extinction_time) else r.extinction_time for r in records]
    payload = {"n_replicas": len(records), "extinction_times": ext}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=1)
