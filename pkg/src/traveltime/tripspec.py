"""Trip-specific predictive distributions.

Edge travel-time moments are tabulated per ``(edge, exit edge, traffic bin)``
and summed along a route at deterministic entry times ``t*``.  Dependence
between consecutive edges enters through a pooled lag-1 (optionally lag-2)
correlation of standardized residuals, and a single scale ``nu_sq`` recalibrates
the resulting variance against realized trip totals.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DegenerateVariance,
    EmptyTraining,
    NoEligibleTrips,
    NonPositiveVariance,
    TooFewTrips,
)
from .ingest import BIN_ORDER, traffic_bin_code, traffic_bin_codes
from .population import Interval
from .stats import check_level, two_sided_z
from .trips import RouteQuery, Trip, check_routes, check_trips

ANY = "*"
TABLE_COLUMNS = ("edge_id", "exit_edge_id", "bin", "mean_tt_s", "var_tt_s2", "count")
BIN_NAMES = tuple(b.value for b in BIN_ORDER)

# resolution levels reported by EdgeMomentTable.lookup
EXIT_LEVEL, EDGE_LEVEL, GLOBAL_LEVEL = 0, 1, 2


@dataclass(frozen=True)
class Moment:
    mean: float
    var: float
    count: int

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)


def _group_moments(keys: np.ndarray, x: np.ndarray):
    """Count, mean and unbiased variance of ``x`` per row of the int key matrix."""
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    count = np.bincount(inv)
    # shift by each group's first value: constant groups then get exactly zero variance
    ref = np.empty(count.size)
    ref[inv[::-1]] = x[::-1]
    dev = x - ref[inv]
    shift = np.bincount(inv, weights=dev) / count
    mean = ref + shift
    ss = np.bincount(inv, weights=(dev - shift[inv]) ** 2)
    var = np.where(count > 1, ss / np.maximum(count - 1, 1), 0.0)
    return uniq, count, mean, var


class EdgeMomentTable:
    """Immutable lookup of edge travel-time moments with fallback.

    Lookups try ``(edge, exit, bin)``, then ``(edge, ANY, bin)``, then the
    bin-wide global entry ``(ANY, ANY, bin)``.  Only entries that met the
    count threshold at fit time are stored at the first two levels, so the
    table itself needs no threshold to resolve.

    Parameters
    ----------
    entries : dict
        ``(edge_id, exit_edge_id, bin) -> Moment`` with :data:`ANY` marking
        a dropped condition.
    tz_offset_s : float
        Offset used to bin timestamps.
    stratified : bool
        If False every lookup uses ``bin = ANY``.
    """

    def __init__(self, entries: dict, tz_offset_s: float = 0.0, stratified: bool = True):
        self._entries = dict(entries)
        self.tz_offset_s = float(tz_offset_s)
        self.stratified = bool(stratified)
        bins = BIN_NAMES if self.stratified else (ANY,)
        missing = [b for b in bins if (ANY, ANY, b) not in self._entries]
        if missing:
            raise EmptyTraining(f"no global entry for bins {missing}")

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EdgeMomentTable) and self._entries == other._entries
                and self.stratified == other.stratified and self.tz_offset_s == other.tz_offset_s)

    def items(self):
        return sorted(self._entries.items())

    def bin_at(self, t) -> np.ndarray:
        """Bin names for timestamps (``ANY`` when unstratified)."""
        if not self.stratified:
            return np.full(np.shape(t), ANY, dtype=object)
        return np.asarray(BIN_NAMES, dtype=object)[traffic_bin_codes(t, self.tz_offset_s)]

    def bin_name(self, t: float) -> str:
        if not self.stratified:
            return ANY
        return BIN_NAMES[traffic_bin_code(t, self.tz_offset_s)]

    def lookup(self, edge_id: str, exit_edge_id, bin_name: str) -> tuple[Moment, int]:
        """Resolve a key through the fallback chain; returns ``(moment, level)``."""
        b = bin_name if self.stratified else ANY
        e = self._entries
        if exit_edge_id is not None:
            hit = e.get((edge_id, exit_edge_id, b))
            if hit is not None:
                return hit, EXIT_LEVEL
        hit = e.get((edge_id, ANY, b))
        if hit is not None:
            return hit, EDGE_LEVEL
        return e[(ANY, ANY, b)], GLOBAL_LEVEL

    def resolve(self, edges: Sequence[str], times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Means, variances and levels along ``edges`` entered at ``times``."""
        n = len(edges)
        bins = self.bin_at(np.asarray(times, dtype=float))
        mean = np.empty(n)
        var = np.empty(n)
        level = np.empty(n, dtype=np.int64)
        for k in range(n):
            exit_id = edges[k + 1] if k + 1 < n else None
            mo, lv = self.lookup(edges[k], exit_id, bins[k])
            mean[k], var[k], level[k] = mo.mean, mo.var, lv
        return mean, var, level

    def to_dict(self) -> dict:
        return {"tz_offset_s": self.tz_offset_s, "stratified": self.stratified,
                "entries": [[e, x, b, mo.mean, mo.var, mo.count] for (e, x, b), mo in self.items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeMomentTable":
        entries = {(e, x, b): Moment(float(mu), float(v), int(c)) for e, x, b, mu, v, c in d["entries"]}
        return cls(entries, d.get("tz_offset_s", 0.0), d.get("stratified", True))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for (e, x, b), mo in self.items():
                w.writerow([e, x, b, repr(mo.mean), repr(mo.var), mo.count])

    @classmethod
    def from_csv(cls, path, tz_offset_s: float = 0.0) -> "EdgeMomentTable":
        path = Path(path)
        entries = {}
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(TABLE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                try:
                    mo = Moment(float(row["mean_tt_s"]), float(row["var_tt_s2"]), int(row["count"]))
                except ValueError as exc:
                    raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
                entries[(row["edge_id"], row["exit_edge_id"], row["bin"])] = mo
        stratified = any(b != ANY for (_, _, b) in entries)
        return cls(entries, tz_offset_s, stratified)


def fit_edge_moments(trips, network=None, min_count: int = 10, tz_offset_s: float = 0.0,
                     stratify: bool = True) -> EdgeMomentTable:
    """Tabulate sample moments of edge travel times.

    Each traversal is binned by its own entry time.  Exit-conditioned and
    edge-level entries are kept only with at least ``min_count``
    observations; the per-bin global entry is always kept.

    Raises
    ------
    EmptyTraining
        No trips, or some traffic bin has no observation at all.
    """
    return tabulate_moments(trips, lambda t: t.travel_times, network, min_count, tz_offset_s, stratify)


def tabulate_moments(trips, values, network=None, min_count: int = 10, tz_offset_s: float = 0.0,
                     stratify: bool = True) -> EdgeMomentTable:
    """Like :func:`fit_edge_moments` for any per-edge quantity ``values(trip)``."""
    trips = check_trips(trips)
    if not trips:
        raise EmptyTraining("no training trips")
    if network is not None:
        for t in trips:
            network.validate_route(t.edge_ids)
    ids: dict[str, int] = {}
    edge, exit_, x, times = [], [], [], []
    for t in trips:
        codes = [ids.setdefault(e, len(ids)) for e in t.edge_ids]
        edge.extend(codes)
        exit_.extend(codes[1:] + [-1])
        x.append(np.asarray(values(t), dtype=float))
        times.append(t.entry_times)
    edge = np.asarray(edge, dtype=np.int64)
    exit_ = np.asarray(exit_, dtype=np.int64)
    x = np.concatenate(x)
    times = np.concatenate(times)
    names = list(ids)
    if stratify:
        bins = traffic_bin_codes(times, tz_offset_s)
        bin_names = BIN_NAMES
    else:
        bins = np.zeros(x.size, dtype=np.int64)
        bin_names = (ANY,)

    entries = {}
    has_exit = exit_ >= 0
    keys = np.column_stack([edge[has_exit], exit_[has_exit], bins[has_exit]])
    if keys.size:
        for (e, nx, b), c, mu, v in zip(*_group_moments(keys, x[has_exit])):
            if c >= min_count:
                entries[(names[e], names[nx], bin_names[b])] = Moment(float(mu), float(v), int(c))
    for (e, b), c, mu, v in zip(*_group_moments(np.column_stack([edge, bins]), x)):
        if c >= min_count:
            entries[(names[e], ANY, bin_names[b])] = Moment(float(mu), float(v), int(c))
    for (b,), c, mu, v in zip(*_group_moments(bins[:, None], x)):
        entries[(ANY, ANY, bin_names[b])] = Moment(float(mu), float(v), int(c))
    empty = [b for b in bin_names if (ANY, ANY, b) not in entries]
    if empty:
        raise EmptyTraining(f"no training observation in bins {empty}")
    return EdgeMomentTable(entries, tz_offset_s, stratify)


# deterministic times and moments -------------------------------------------------

def _walk(route: Sequence[str], t0: float, table: EdgeMomentTable):
    """Forward recursion of entry times; returns ``(t_star, mean, var)``."""
    n = len(route)
    t_star = np.empty(n)
    mean = np.empty(n)
    var = np.empty(n)
    clock = float(t0)
    for k in range(n):
        t_star[k] = clock
        mo, _ = table.lookup(route[k], route[k + 1] if k + 1 < n else None, table.bin_name(clock))
        mean[k], var[k] = mo.mean, mo.var
        clock += mo.mean
    return t_star, mean, var


def deterministic_times(route: Sequence[str], t0: float, table: EdgeMomentTable) -> np.ndarray:
    """Entry times obtained by advancing the clock by each edge's tabulated mean."""
    return _walk(route, t0, table)[0]


def trip_mean(route: Sequence[str], t_star, table: EdgeMomentTable) -> float:
    """Sum of tabulated means with each edge binned at its deterministic entry time."""
    mean, _, _ = table.resolve(route, t_star)
    return float(mean.sum())


def _cumulative_variance(var: np.ndarray, xi1: float, xi2: float | None, order: int) -> np.ndarray:
    sd = np.sqrt(var)
    total = np.cumsum(var)
    cross1 = np.concatenate(([0.0], np.cumsum(sd[:-1] * sd[1:])))
    total = total + 2.0 * xi1 * cross1
    if order == 2:
        cross2 = np.concatenate(([0.0, 0.0], np.cumsum(sd[:-2] * sd[2:])))[: var.size]
        total = total + 2.0 * (xi2 or 0.0) * cross2
    if np.any((total < 0) | ((total == 0) & (np.cumsum(var) > 0))):
        raise NonPositiveVariance("correlation terms drive the route variance to zero or below")
    return total


def _check_order(order) -> int:
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order!r}")
    return int(order)


@dataclass(frozen=True)
class TripSpecificParams:
    xi1: float
    nu_sq: float
    m: int
    order: int = 1
    xi2: float | None = None

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, source) -> "TripSpecificParams":
        text = str(source) if str(source).lstrip().startswith("{") else Path(source).read_text(encoding="utf-8")
        d = json.loads(text)
        xi2 = d.get("xi2")
        return cls(float(d["xi1"]), float(d["nu_sq"]), int(d["m"]), int(d.get("order", 1)),
                   None if xi2 is None else float(xi2))


def trip_variance(route: Sequence[str], t_star, table: EdgeMomentTable, params, order: int = 1) -> float:
    """Route variance: edge variances plus neighbour covariance terms.

    ``params`` may be a :class:`TripSpecificParams` or a bare ``xi1`` float.
    """
    order = _check_order(order)
    xi1, xi2 = (params, None) if isinstance(params, (int, float)) else (params.xi1, params.xi2)
    _, var, _ = table.resolve(route, t_star)
    return float(_cumulative_variance(var, xi1, xi2, order)[-1])


def _residuals(trip: Trip, table: EdgeMomentTable):
    mean, var, level = table.resolve(trip.edge_ids, trip.entry_times)
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sd > 0, (trip.travel_times - mean) / sd, 0.0)
    return r, level > EXIT_LEVEL


def estimate_xi(trips, table: EdgeMomentTable, order: int = 1, include_imputed: bool = True) -> float:
    """Pooled lag-``order`` correlation of standardized edge residuals.

    Residuals are standardized with the table moments at the observed entry
    times.  Each trip contributes ``n_j^{-1}`` times the sum of products of
    residual pairs ``order`` edges apart; the estimate is the mean over trips
    with at least ``order + 1`` edges.  A zero table variance gives a zero
    residual.
    """
    order = _check_order(order)
    vals = []
    for t in check_trips(trips):
        if t.n < order + 1:
            continue
        r, imputed = _residuals(t, table)
        prod = r[:-order] * r[order:]
        if not include_imputed:
            prod = prod[~(imputed[:-order] | imputed[order:])]
        vals.append(prod.sum() / t.n)
    if not vals:
        raise NoEligibleTrips(f"no trip has at least {order + 1} edges")
    return float(np.mean(vals))


def standardized_errors(trips, table: EdgeMomentTable, params, order: int = 1) -> np.ndarray:
    """``(T_j - mu_j) / sigma_j`` with moments taken along each trip's ``t*``."""
    order = _check_order(order)
    xi1, xi2 = (params, None) if isinstance(params, (int, float)) else (params.xi1, params.xi2)
    out = []
    for t in check_trips(trips):
        _, mean, var = _walk(t.edge_ids, t.start_time, table)
        sigma_sq = _cumulative_variance(var, xi1, xi2, order)[-1]
        if not sigma_sq > 0:
            raise DegenerateVariance(f"trip {t.trip_id!r} has zero predicted variance")
        out.append((t.total_time - mean.sum()) / math.sqrt(sigma_sq))
    return np.asarray(out)


def estimate_nu(trips, table: EdgeMomentTable, params, order: int = 1) -> float:
    """Sample variance of the standardized trip errors (the calibration scale)."""
    trips = check_trips(trips)
    if len(trips) < 2:
        raise TooFewTrips(f"need at least 2 trips, got {len(trips)}")
    eps = standardized_errors(trips, table, params, order)
    nu_sq = float(np.var(eps, ddof=1))
    if not nu_sq > 0:
        raise DegenerateVariance("standardized errors have zero variance")
    return nu_sq


@dataclass(frozen=True)
class IntervalSequence:
    """Per-prefix prediction intervals along one route."""

    edge_ids: tuple
    points: np.ndarray
    lowers: np.ndarray
    uppers: np.ndarray
    sds: np.ndarray
    level: float

    def __len__(self) -> int:
        return len(self.edge_ids)

    @property
    def final(self) -> Interval:
        return Interval(float(self.lowers[-1]), float(self.points[-1]), float(self.uppers[-1]), self.level)


def trip_prediction_sequence(route: Sequence[str], t0: float, table: EdgeMomentTable,
                             params: TripSpecificParams, beta: float = 0.05,
                             order: int | None = None) -> IntervalSequence:
    """Intervals for the cumulative time after each prefix of ``route``.

    The ``k``-th interval is ``mean_k -/+ z * sqrt(nu_sq * var_k)`` where
    ``mean_k`` and ``var_k`` are the prefix mean and variance at ``t*``.
    """
    beta = check_level(beta)
    order = _check_order(params.order if order is None else order)
    route = tuple(route)
    _, mean, var = _walk(route, t0, table)
    points = np.cumsum(mean)
    sds = np.sqrt(params.nu_sq * _cumulative_variance(var, params.xi1, params.xi2, order))
    half = two_sided_z(beta) * sds
    return IntervalSequence(route, points, points - half, points + half, sds, 1.0 - beta)


class TripSpecificPredictor(BaseEstimator):
    """Predict route travel time from edge moments along deterministic times.

    Parameters
    ----------
    level : float, default 0.95
    order : {1, 2}, default 1
        Include the lag-2 covariance term when 2.
    min_count : int, default 10
        Observations needed before an exit- or edge-level entry is trusted.
    tz_offset_s : float, default 0.0
        Local time offset used for traffic bins.
    stratify : bool, default True
        Condition moments on traffic bin.
    include_imputed : bool, default True
        Whether residual pairs touching a fallback entry count toward ``xi``.
    fixed_nu_sq : float or None
        Use this scale instead of fitting one (``1.0`` switches calibration off).

    Attributes
    ----------
    table_ : EdgeMomentTable
    params_ : TripSpecificParams
    """

    def __init__(self, level=0.95, order=1, min_count=10, tz_offset_s=0.0, stratify=True,
                 include_imputed=True, fixed_nu_sq=None):
        self.level = level
        self.order = order
        self.min_count = min_count
        self.tz_offset_s = tz_offset_s
        self.stratify = stratify
        self.include_imputed = include_imputed
        self.fixed_nu_sq = fixed_nu_sq

    def fit(self, X, y=None, table: EdgeMomentTable | None = None):
        """Fit table, correlation and scale on trips ``X``.

        A prefitted ``table`` may be supplied; then only ``xi`` and
        ``nu_sq`` are estimated from ``X``.
        """
        check_level(1.0 - self.level)
        order = _check_order(self.order)
        trips = check_trips(X, min_trips=2)
        self.table_ = table if table is not None else fit_edge_moments(
            trips, min_count=self.min_count, tz_offset_s=self.tz_offset_s, stratify=self.stratify)
        xi1 = estimate_xi(trips, self.table_, 1, self.include_imputed)
        xi2 = estimate_xi(trips, self.table_, 2, self.include_imputed) if order == 2 else None
        base = TripSpecificParams(xi1, 1.0, len(trips), order, xi2)
        nu_sq = (float(self.fixed_nu_sq) if self.fixed_nu_sq is not None
                 else estimate_nu(trips, self.table_, base, order))
        self.params_ = TripSpecificParams(xi1, nu_sq, len(trips), order, xi2)
        return self

    @classmethod
    def from_parts(cls, table: EdgeMomentTable, params: TripSpecificParams, level=0.95):
        est = cls(level=level, order=params.order, tz_offset_s=table.tz_offset_s,
                  stratify=table.stratified)
        est.table_, est.params_ = table, params
        return est

    def predict_sequence(self, route, t0=None) -> IntervalSequence:
        check_is_fitted(self, "params_")
        if isinstance(route, (Trip, RouteQuery)):
            route, t0 = route.edge_ids, route.start_time
        return trip_prediction_sequence(route, t0, self.table_, self.params_, 1.0 - self.level)

    def predict_sequences(self, X) -> list[IntervalSequence]:
        return [self.predict_sequence(r) for r in check_routes(X)]

    def predict(self, X) -> np.ndarray:
        return np.array([s.points[-1] for s in self.predict_sequences(X)])

    def predict_interval(self, X):
        """Return ``(point, lower, upper)`` arrays for the full routes."""
        seqs = self.predict_sequences(X)
        return (np.array([s.points[-1] for s in seqs]), np.array([s.lowers[-1] for s in seqs]),
                np.array([s.uppers[-1] for s in seqs]))

    def standardized_residuals(self, X) -> np.ndarray:
        """Errors scaled by the calibrated sd; roughly standard normal when well fitted."""
        check_is_fitted(self, "params_")
        eps = standardized_errors(X, self.table_, self.params_, self.params_.order)
        return eps / math.sqrt(self.params_.nu_sq)
