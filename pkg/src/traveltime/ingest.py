"""From map-matched GPS points to cleaned trips, plus traffic-bin assignment.

The pipeline is ``segment_trips -> filter_motorized -> allocate_edge_times``.
Rows of the point CSV with an empty timestamp are unobserved intermediate
edges reported by the map matcher (e.g. inside a tunnel); they carry no time
and only take part in allocation.
"""

from __future__ import annotations

import csv
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import NonAdjacentJump
from .network import TransportNetwork
from .trips import Trip

logger = logging.getLogger(__name__)

POINT_COLUMNS = ("trip_id", "timestamp_s", "edge_id", "position_m", "speed_kmh")

GAP_SPLIT_S = 120.0
IDLE_SPLIT_S = 240.0
IDLE_DISPLACEMENT_M = 5.0
TRIM_SPEED_KMH = 10.0
MIN_MEDIAN_KMH = 20.0
MIN_MAX_KMH = 35.0
MIN_DISTANCE_M = 1000.0


# traffic bins ------------------------------------------------------------------

class TrafficBin(str, Enum):
    AM_RUSH = "AMRush"
    PM_RUSH = "PMRush"
    NON_RUSH = "NonRush"


MIXED = "Mixed"
BIN_ORDER = (TrafficBin.AM_RUSH, TrafficBin.PM_RUSH, TrafficBin.NON_RUSH)

DAY_S = 86_400.0
WEEK_S = 7 * DAY_S
_AM = (6.5 * 3600, 8.5 * 3600)
_PM = (15.5 * 3600, 17.0 * 3600)
# the epoch fell on a Thursday; shift so week-seconds count from Monday 00:00
_EPOCH_WEEKDAY = 3

_BOUNDARIES = sorted(
    d * DAY_S + edge for d in range(5) for window in (_AM, _PM) for edge in window)


def _week_seconds(t, tz_offset_s: float):
    return np.mod(np.asarray(t, dtype=float) + tz_offset_s + _EPOCH_WEEKDAY * DAY_S, WEEK_S)


def traffic_bin_codes(t, tz_offset_s: float = 0.0) -> np.ndarray:
    """Vectorised bin index (0 AM-rush, 1 PM-rush, 2 non-rush) for epoch seconds."""
    w = _week_seconds(t, tz_offset_s)
    day = np.floor(w / DAY_S)
    sod = w - day * DAY_S
    weekday = day < 5
    am = weekday & (sod >= _AM[0]) & (sod < _AM[1])
    pm = weekday & (sod >= _PM[0]) & (sod < _PM[1])
    return np.where(am, 0, np.where(pm, 1, 2)).astype(np.int64)


def traffic_bin_code(t: float, tz_offset_s: float = 0.0) -> int:
    """Scalar version of :func:`traffic_bin_codes` (no array overhead)."""
    w = math.fmod(t + tz_offset_s + _EPOCH_WEEKDAY * DAY_S, WEEK_S)
    if w < 0:
        w += WEEK_S
    day, sod = divmod(w, DAY_S)
    if day < 5:
        if _AM[0] <= sod < _AM[1]:
            return 0
        if _PM[0] <= sod < _PM[1]:
            return 1
    return 2


def assign_traffic_bin(timestamp: float, tz_offset_s: float = 0.0) -> TrafficBin:
    """Bin of an epoch timestamp, with local time = UTC + ``tz_offset_s``.

    Weekday ``[06:30, 08:30)`` is AM-rush, weekday ``[15:30, 17:00)`` is
    PM-rush, everything else (weekends included) is non-rush.
    """
    return BIN_ORDER[traffic_bin_code(float(timestamp), tz_offset_s)]


def span_bin_code(start: float, end: float, tz_offset_s: float = 0.0) -> int:
    """Bin code shared by every instant of ``[start, end)``, or -1 if it changes."""
    w = float(_week_seconds(start, tz_offset_s))
    i = bisect_right(_BOUNDARIES, w)
    nxt = _BOUNDARIES[i] if i < len(_BOUNDARIES) else WEEK_S
    if start + (nxt - w) < end:
        return -1
    return traffic_bin_code(start, tz_offset_s)


def bin_of_trip(trip: Trip, tz_offset_s: float = 0.0):
    """Common bin of the whole ``[start, end)`` span, or :data:`MIXED`."""
    code = span_bin_code(trip.start_time, trip.end_time, tz_offset_s)
    return MIXED if code < 0 else BIN_ORDER[code]


# points -----------------------------------------------------------------------

@dataclass(frozen=True)
class MatchedPoint:
    trip_id: str
    timestamp: float | None
    edge_id: str
    position_m: float | None = None
    speed_kmh: float | None = None

    @property
    def observed(self) -> bool:
        return self.timestamp is not None


@dataclass
class CleaningReport:
    raw_groups: int = 0
    segments: int = 0
    empty_segments: int = 0
    removed_median: int = 0
    removed_max: int = 0
    removed_distance: int = 0
    kept: int = 0
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "notes"}


def _opt_float(s):
    s = (s or "").strip()
    return float(s) if s else None


def read_points_csv(path) -> list[MatchedPoint]:
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(POINT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                out.append(MatchedPoint(row["trip_id"], _opt_float(row["timestamp_s"]), row["edge_id"],
                                        _opt_float(row["position_m"]), _opt_float(row["speed_kmh"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
    return out


def _group(points: Iterable[MatchedPoint]) -> dict[str, list[MatchedPoint]]:
    groups: dict[str, list[MatchedPoint]] = {}
    for p in points:
        groups.setdefault(p.trip_id, []).append(p)
    return groups


def _pos(p: MatchedPoint, length: float) -> float:
    # a missing position is taken as the middle of the edge
    if p.position_m is None:
        return 0.5 * length
    return min(max(p.position_m, 0.0), length)


def _path_distance(a: MatchedPoint, b: MatchedPoint, between: Sequence[MatchedPoint],
                   network: TransportNetwork | None) -> float:
    """Distance driven from observation ``a`` to ``b`` along the matched edges."""
    if a.edge_id == b.edge_id and not between:
        if a.position_m is not None and b.position_m is not None:
            return abs(b.position_m - a.position_m)
        if network is None:
            raise ValueError("a network is needed for points without a position")
        L = network.length(a.edge_id)
        return abs(_pos(b, L) - _pos(a, L))
    if network is None:
        raise ValueError("a network is needed to measure distance across edges")
    La, Lb = network.length(a.edge_id), network.length(b.edge_id)
    return (La - _pos(a, La)) + sum(network.length(m.edge_id) for m in between) + _pos(b, Lb)


def _observed_pairs(group: Sequence[MatchedPoint]):
    """Yield ``(i, j, markers_between)`` for consecutive observed points."""
    prev = None
    markers: list[MatchedPoint] = []
    for j, p in enumerate(group):
        if not p.observed:
            markers.append(p)
            continue
        if prev is not None:
            yield prev, j, markers
        prev, markers = j, []


def _fill_speeds(group: list[MatchedPoint], network) -> list[MatchedPoint]:
    if all(p.speed_kmh is not None for p in group if p.observed):
        return group
    obs = [j for j, p in enumerate(group) if p.observed]
    pair_speed = {}
    for i, j, between in _observed_pairs(group):
        dt = group[j].timestamp - group[i].timestamp
        dist = _path_distance(group[i], group[j], between, network)
        pair_speed[i] = 3.6 * dist / dt if dt > 0 else 0.0
    out = list(group)
    for n, j in enumerate(obs):
        if out[j].speed_kmh is not None:
            continue
        if j in pair_speed:
            v = pair_speed[j]
        elif n > 0:
            v = pair_speed[obs[n - 1]]
        else:
            v = 0.0
        out[j] = replace(out[j], speed_kmh=v)
    return out


def _trim(seg: list[MatchedPoint]) -> list[MatchedPoint]:
    fast = [j for j, p in enumerate(seg) if p.observed and p.speed_kmh > TRIM_SPEED_KMH]
    if not fast:
        return []
    return seg[fast[0]: fast[-1] + 1]


def segment_trips(points: Iterable[MatchedPoint], network: TransportNetwork | None = None,
                  report: CleaningReport | None = None) -> list[list[MatchedPoint]]:
    """Split raw point streams at long gaps and idle periods, then trim slow ends.

    A split happens when consecutive observations are more than 120 s apart,
    or when the vehicle stays within 5 m for more than 240 s.  Each piece is
    trimmed to run from the first to the last observation faster than
    10 km/h; pieces with no such observation are dropped.  Missing speeds are
    derived from along-network distance (needs ``network``) and written back
    onto the points, so running this again on its own output is a no-op.
    Groups that split are renamed ``<trip_id>_<k>``.
    """
    report = report if report is not None else CleaningReport()
    out = []
    for tid, group in _group(points).items():
        report.raw_groups += 1
        group = _fill_speeds(group, network)
        cuts: list[tuple[int, int]] = []  # (end of piece, start of next piece)
        idle_start = None
        for i, j, between in _observed_pairs(group):
            a, b = group[i], group[j]
            if b.timestamp - a.timestamp > GAP_SPLIT_S:
                cuts.append((i, j))
                idle_start = None
                continue
            moved = _path_distance(a, b, between, network)
            if moved < IDLE_DISPLACEMENT_M:
                idle_start = i if idle_start is None else idle_start
                if b.timestamp - group[idle_start].timestamp > IDLE_SPLIT_S:
                    # extend to the end of the idle run before cutting
                    continue
            else:
                if idle_start is not None and a.timestamp - group[idle_start].timestamp > IDLE_SPLIT_S:
                    cuts.append((idle_start, i))
                idle_start = None
        if idle_start is not None:
            last_obs = max(j for j, p in enumerate(group) if p.observed)
            if group[last_obs].timestamp - group[idle_start].timestamp > IDLE_SPLIT_S:
                cuts.append((idle_start, last_obs))

        pieces = []
        begin = 0
        for end, nxt in cuts:
            pieces.append(group[begin:end + 1])
            begin = nxt
        pieces.append(group[begin:])

        kept = []
        for piece in pieces:
            trimmed = _trim(piece)
            if trimmed:
                kept.append(trimmed)
            else:
                report.empty_segments += 1
        if len(kept) > 1:
            kept = [[replace(p, trip_id=f"{tid}_{k}") for p in seg] for k, seg in enumerate(kept, 1)]
        report.segments += len(kept)
        out.extend(kept)
    if report.empty_segments:
        logger.info("dropped %d segments with no observation above %.0f km/h",
                    report.empty_segments, TRIM_SPEED_KMH)
    return out


def driving_distance(group: Sequence[MatchedPoint], network: TransportNetwork | None) -> float:
    return sum(_path_distance(group[i], group[j], between, network)
               for i, j, between in _observed_pairs(group))


def filter_motorized(groups: Iterable[list[MatchedPoint]], network: TransportNetwork | None = None,
                     report: CleaningReport | None = None) -> list[list[MatchedPoint]]:
    """Drop likely walking or cycling: median < 20 km/h, max < 35 km/h, or < 1 km driven."""
    report = report if report is not None else CleaningReport()
    kept = []
    for g in groups:
        speeds = np.array([p.speed_kmh for p in g if p.observed], dtype=float)
        if np.median(speeds) < MIN_MEDIAN_KMH:
            report.removed_median += 1
        elif speeds.max() < MIN_MAX_KMH:
            report.removed_max += 1
        elif driving_distance(g, network) < MIN_DISTANCE_M:
            report.removed_distance += 1
        else:
            kept.append(g)
    report.kept += len(kept)
    return kept


@dataclass
class _Traversal:
    edge_id: str
    obs: list


def allocate_edge_times(points: Sequence[MatchedPoint], network: TransportNetwork,
                        across_rule: str = "distance") -> Trip:
    """Per-edge travel times for one trip.

    Time between two observations on the same edge goes to that edge.  An
    interval between observations on different edges (possibly with
    unobserved edges in between) is shared out by ``across_rule``:

    ``"distance"``
        in proportion to the distance driven on each edge during the
        interval; intermediate edges count their full length.  Per-edge
        times then add up to the trip duration.
    ``"half-fraction"``
        each observed side gets ``dt * 0.5 * d_side / length_side``;
        intermediate edges share what is left in proportion to length.  With
        no intermediate edges the remainder is not assigned.
    """
    if across_rule not in ("distance", "half-fraction"):
        raise ValueError(f"unknown across_rule {across_rule!r}")
    trav: list[_Traversal] = []
    for p in points:
        if p.edge_id not in network:
            raise NonAdjacentJump(f"trip {p.trip_id!r}: edge {p.edge_id!r} is not in the network")
        if p.observed and trav and trav[-1].edge_id == p.edge_id and trav[-1].obs:
            trav[-1].obs.append(p)
        elif trav and trav[-1].edge_id == p.edge_id and not p.observed:
            continue
        else:
            if trav and not network.is_adjacent(trav[-1].edge_id, p.edge_id):
                raise NonAdjacentJump(
                    f"trip {p.trip_id!r}: {p.edge_id!r} does not follow {trav[-1].edge_id!r}")
            trav.append(_Traversal(p.edge_id, [p] if p.observed else []))
    # leading/trailing unobserved edges have no time to share
    while trav and not trav[0].obs:
        trav.pop(0)
    while trav and not trav[-1].obs:
        trav.pop()
    if not trav:
        raise ValueError("no observed points to allocate")

    L = [network.length(t.edge_id) for t in trav]
    time = [t.obs[-1].timestamp - t.obs[0].timestamp if t.obs else 0.0 for t in trav]
    observed_idx = [k for k, t in enumerate(trav) if t.obs]
    for a, b in zip(observed_idx[:-1], observed_idx[1:]):
        dt = trav[b].obs[0].timestamp - trav[a].obs[-1].timestamp
        mids = list(range(a + 1, b))
        da = L[a] - _pos(trav[a].obs[-1], L[a])
        db = _pos(trav[b].obs[0], L[b])
        if across_rule == "distance":
            parts = {a: da, b: db, **{k: L[k] for k in mids}}
            total = sum(parts.values())
            if total <= 0:
                parts, total = {a: 1.0, b: 1.0}, 2.0
            for k, dist in parts.items():
                time[k] += dt * (dist / total)
        else:
            share_a = dt * 0.5 * da / L[a]
            share_b = dt * 0.5 * db / L[b]
            time[a] += share_a
            time[b] += share_b
            if mids:
                rest = max(dt - share_a - share_b, 0.0)
                span = sum(L[k] for k in mids)
                for k in mids:
                    time[k] += rest * L[k] / span

    dist = list(L)
    first, last = trav[0].obs[0], trav[-1].obs[-1]
    if len(trav) == 1:
        dist[0] = abs(_pos(last, L[0]) - _pos(first, L[0]))
    else:
        dist[0] = L[0] - _pos(first, L[0])
        dist[-1] = _pos(last, L[-1])

    keep = [k for k in range(len(trav)) if time[k] > 0]
    tt = np.array([time[k] for k in keep])
    entry = np.empty(len(keep))
    clock = first.timestamp
    for n, k in enumerate(keep):
        entry[n] = clock
        clock += time[k]
    return Trip(first.trip_id, tuple(trav[k].edge_id for k in keep), entry, tt,
                np.array([dist[k] for k in keep]))


def ingest(points: Iterable[MatchedPoint], network: TransportNetwork,
           report: CleaningReport | None = None, across_rule: str = "distance") -> list[Trip]:
    """Full cleaning pipeline: segment, filter, allocate."""
    report = report if report is not None else CleaningReport()
    groups = filter_motorized(segment_trips(points, network, report), network, report)
    return [allocate_edge_times(g, network, across_rule) for g in groups]
