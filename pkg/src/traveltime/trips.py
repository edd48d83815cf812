"""The :class:`Trip` record and the trip CSV interchange format."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InvalidTrip, TooFewTrips

TRIP_COLUMNS = ("trip_id", "seq", "edge_id", "entry_time_s", "travel_time_s", "distance_m")
RECURSION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Trip:
    """One traversal of a route: per-edge entry times and travel times.

    Times are seconds (entry times since the epoch), distances meters.
    """

    trip_id: str
    edge_ids: tuple[str, ...]
    entry_times: np.ndarray
    travel_times: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edge_ids", tuple(self.edge_ids))
        for name in ("entry_times", "travel_times", "distances"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.edge_ids)
        if n == 0:
            raise InvalidTrip(f"trip {self.trip_id!r} has no edges")
        if not (self.entry_times.size == self.travel_times.size == self.distances.size == n):
            raise InvalidTrip(f"trip {self.trip_id!r}: field lengths disagree")
        if not np.all(self.travel_times > 0):
            raise InvalidTrip(f"trip {self.trip_id!r}: travel times must be positive")
        gap = self.entry_times[1:] - (self.entry_times[:-1] + self.travel_times[:-1])
        if gap.size and np.max(np.abs(gap)) > RECURSION_TOL:
            raise InvalidTrip(f"trip {self.trip_id!r}: entry times do not chain with travel times")

    @property
    def n(self) -> int:
        return len(self.edge_ids)

    @property
    def start_time(self) -> float:
        return float(self.entry_times[0])

    @property
    def end_time(self) -> float:
        return float(self.entry_times[-1] + self.travel_times[-1])

    @property
    def total_time(self) -> float:
        return float(self.travel_times.sum())

    @property
    def distance(self) -> float:
        return float(self.distances.sum())

    def cumulative_times(self) -> np.ndarray:
        return np.cumsum(self.travel_times)


@dataclass(frozen=True)
class RouteQuery:
    """A route to predict: edge sequence plus the time the first edge is entered."""

    edge_ids: tuple[str, ...]
    start_time: float

    @property
    def n(self) -> int:
        return len(self.edge_ids)


def trip_from_route(trip_id: str, edge_ids: Sequence[str], start_time: float,
                    travel_times, distances) -> Trip:
    tt = np.asarray(travel_times, dtype=float)
    entry = start_time + np.concatenate(([0.0], np.cumsum(tt)[:-1]))
    return Trip(trip_id, tuple(edge_ids), entry, tt, np.asarray(distances, dtype=float))


def check_trips(X, *, min_trips: int = 0) -> list[Trip]:
    """Coerce ``X`` to a list of :class:`Trip` (accepts any iterable of trips)."""
    if isinstance(X, Trip):
        X = [X]
    trips = list(X)
    for t in trips:
        if not isinstance(t, Trip):
            raise TypeError(f"expected Trip objects, got {type(t).__name__}")
    if len(trips) < min_trips:
        raise TooFewTrips(f"need at least {min_trips} trips, got {len(trips)}")
    return trips


def check_routes(X) -> list:
    """Accept trips, :class:`RouteQuery` objects, or ``(edges, start_time)`` pairs."""
    if isinstance(X, (Trip, RouteQuery)):
        X = [X]
    out = []
    for item in X:
        if isinstance(item, (Trip, RouteQuery)):
            out.append(item)
        else:
            edges, t0 = item
            out.append(RouteQuery(tuple(edges), float(t0)))
    return out


def write_trips_csv(trips: Iterable[Trip], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_COLUMNS)
        for t in trips:
            for k in range(t.n):
                w.writerow([t.trip_id, k, t.edge_ids[k], repr(float(t.entry_times[k])),
                            repr(float(t.travel_times[k])), repr(float(t.distances[k]))])


def read_trips_csv(path) -> list[Trip]:
    """Read trips, grouping rows by ``trip_id`` in order of first appearance."""
    path = Path(path)
    groups: dict[str, list] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRIP_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InvalidTrip(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                rec = (int(row["seq"]), row["edge_id"], float(row["entry_time_s"]),
                       float(row["travel_time_s"]), float(row["distance_m"]))
            except (TypeError, ValueError) as exc:
                raise InvalidTrip(f"{path}:{reader.line_num}: {exc}") from None
            groups.setdefault(row["trip_id"], []).append(rec)
    trips = []
    for tid, recs in groups.items():
        recs.sort(key=lambda r: r[0])
        _, edges, entry, tt, dist = zip(*recs)
        try:
            trips.append(Trip(tid, edges, entry, tt, dist))
        except InvalidTrip as exc:
            raise InvalidTrip(f"{path}: {exc}") from None
    return trips
