"""Comparison models.

``NoDependenceLogNormal`` treats edge times as independent log-normals and
samples route totals with each replicate advancing its own clock.
``LogLinearTravelTime`` regresses log trip time on distance and traffic bin.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import RankDeficient, TooFewTrips
from .ingest import BIN_ORDER, TrafficBin, assign_traffic_bin, span_bin_code, traffic_bin_codes
from .population import Interval
from .stats import check_level, two_sided_z
from .trips import Trip, check_routes, check_trips
from .tripspec import ANY, BIN_NAMES, EdgeMomentTable, tabulate_moments

INTERVAL_COLUMNS = ("trip_id", "point_s", "lower_s", "upper_s")
RANK_TOL = 1e-10


# log-normal ----------------------------------------------------------------------

def fit_lognormal(trips, network=None, min_count: int = 10, tz_offset_s: float = 0.0,
                  stratify: bool = True) -> EdgeMomentTable:
    """Moments of log edge travel time, with the same fallback chain as the moment table.

    The returned table's ``mean`` is the log-mean and ``var`` the log-variance.
    """
    return tabulate_moments(trips, lambda t: np.log(t.travel_times), network, min_count,
                            tz_offset_s, stratify)


def _log_params(model: EdgeMomentTable, edges, exit_id, bin_codes):
    """Per-replicate log-mean and log-sd for one edge given replicate bins."""
    if not model.stratified:
        mo, _ = model.lookup(edges, exit_id, ANY)
        return mo.mean, mo.sd
    lo, hi = bin_codes.min(), bin_codes.max()
    if lo == hi:
        mo, _ = model.lookup(edges, exit_id, BIN_NAMES[lo])
        return mo.mean, mo.sd
    mu = np.empty(bin_codes.shape)
    sd = np.empty(bin_codes.shape)
    for b in np.unique(bin_codes):
        mo, _ = model.lookup(edges, exit_id, BIN_NAMES[b])
        sel = bin_codes == b
        mu[sel], sd[sel] = mo.mean, mo.sd
    return mu, sd


def sample_route_totals(model: EdgeMomentTable, route: Sequence[str], t0: float, samples: int,
                        rng_seed) -> np.ndarray:
    """Replicate cumulative times, shape ``(samples, len(route))``.

    Every replicate carries its own clock, so the traffic bin of later edges
    depends on the sampled times of earlier ones.
    """
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((len(route), samples))
    clock = np.full(samples, float(t0))
    cum = np.empty((samples, len(route)))
    for k, e in enumerate(route):
        exit_id = route[k + 1] if k + 1 < len(route) else None
        codes = None
        if model.stratified:
            # the replicates usually share one bin; skip the vectorised binning then
            lo, hi = float(clock.min()), float(clock.max())
            shared = span_bin_code(lo, np.nextafter(hi, np.inf), model.tz_offset_s)
            codes = (np.full(1, shared) if shared >= 0
                     else traffic_bin_codes(clock, model.tz_offset_s))
        mu, sd = _log_params(model, e, exit_id, codes)
        clock = clock + np.exp(mu + sd * z[k])
        cum[:, k] = clock - t0
    return cum


def predict_lognormal(model: EdgeMomentTable, route: Sequence[str], t0: float, beta: float = 0.05,
                      samples: int = 1000, rng_seed=0) -> Interval:
    """Monte Carlo interval: replicate mean and empirical ``beta/2`` quantiles."""
    beta = check_level(beta)
    totals = sample_route_totals(model, route, t0, samples, rng_seed)[:, -1]
    lo, hi = np.quantile(totals, [beta / 2.0, 1.0 - beta / 2.0])
    return Interval(float(lo), float(totals.mean()), float(hi), 1.0 - beta)


class NoDependenceLogNormal(BaseEstimator):
    """Independent log-normal edge times summed by simulation.

    Parameters
    ----------
    level : float, default 0.95
    samples : int, default 1000
        Replicates per route.
    min_count : int, default 10
    tz_offset_s : float, default 0.0
    stratify : bool, default True
    random_state : int, default 0
        Route ``i`` of a ``predict`` call uses the seed ``[random_state, i]``.
    """

    def __init__(self, level=0.95, samples=1000, min_count=10, tz_offset_s=0.0, stratify=True,
                 random_state=0):
        self.level = level
        self.samples = samples
        self.min_count = min_count
        self.tz_offset_s = tz_offset_s
        self.stratify = stratify
        self.random_state = random_state

    def fit(self, X, y=None):
        check_level(1.0 - self.level)
        self.model_ = fit_lognormal(X, min_count=self.min_count, tz_offset_s=self.tz_offset_s,
                                    stratify=self.stratify)
        return self

    def predict_interval(self, X, offset: int = 0):
        """Return ``(point, lower, upper)`` arrays.

        ``offset`` shifts the route index used for seeding, so a block of a
        larger batch gets the same draws as in the full call.
        """
        check_is_fitted(self, "model_")
        ivs = [predict_lognormal(self.model_, r.edge_ids, r.start_time, 1.0 - self.level,
                                 self.samples, [self.random_state, offset + i])
               for i, r in enumerate(check_routes(X))]
        return (np.array([iv.point for iv in ivs]), np.array([iv.lower for iv in ivs]),
                np.array([iv.upper for iv in ivs]))

    def predict(self, X) -> np.ndarray:
        return self.predict_interval(X)[0]

    def to_json(self, path=None) -> str:
        check_is_fitted(self, "model_")
        d = {"kind": "lognormal", "params": self.get_params(), "table": self.model_.to_dict()}
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path) -> "NoDependenceLogNormal":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        est = cls(**d["params"])
        est.model_ = EdgeMomentTable.from_dict(d["table"])
        return est


# log-linear ----------------------------------------------------------------------

@dataclass(frozen=True)
class LogLinearModel:
    """``log T = intercept + coef_distance * d + coef_bin[bin] + e``, ``sd(e) = residual_sd``.

    AM-rush is the reference bin (offset zero).
    """

    intercept: float
    coef_distance: float
    coef_bin: dict = field(default_factory=dict)
    residual_sd: float = 0.0
    m: int = 0

    def log_point(self, distance_m: float, bin_name: str) -> float:
        return self.intercept + self.coef_distance * distance_m + self.coef_bin.get(bin_name, 0.0)


def trip_bin(trip: Trip, tz_offset_s: float = 0.0) -> str:
    """Bin of the trip's start (a trip straddling a boundary takes its first bin)."""
    return assign_traffic_bin(trip.start_time, tz_offset_s).value


def _design(distance, bins) -> np.ndarray:
    distance = np.asarray(distance, dtype=float)
    X = np.ones((distance.size, 2 + len(BIN_ORDER) - 1))
    X[:, 1] = distance
    for j, b in enumerate(BIN_ORDER[1:]):
        X[:, 2 + j] = [bb == b.value for bb in bins]
    return X


def fit_loglinear(trips, tz_offset_s: float = 0.0) -> LogLinearModel:
    """Ordinary least squares of log total time on distance and bin, via QR.

    Raises
    ------
    TooFewTrips
        Fewer than ``p + 2`` trips.
    RankDeficient
        A diagonal of ``R`` is below ``1e-10`` times the largest one
        (e.g. a bin never appears, or all distances equal).
    """
    trips = check_trips(trips)
    X = _design([t.distance for t in trips], [trip_bin(t, tz_offset_s) for t in trips])
    y = np.log([t.total_time for t in trips])
    m, p = X.shape
    if m < p + 2:
        raise TooFewTrips(f"need at least {p + 2} trips, got {m}")
    # scale columns so the rank test is unit-free
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Q, R = np.linalg.qr(X / scale)
    d = np.abs(np.diag(R))
    if d.min() <= RANK_TOL * d.max():
        raise RankDeficient("design matrix is rank deficient")
    beta = np.linalg.solve(R, Q.T @ y) / scale
    resid = y - X @ beta
    sd = math.sqrt(float(resid @ resid) / (m - p))
    coef_bin = {BIN_ORDER[0].value: 0.0}
    coef_bin.update({b.value: float(beta[2 + j]) for j, b in enumerate(BIN_ORDER[1:])})
    return LogLinearModel(float(beta[0]), float(beta[1]), coef_bin, sd, m)


def predict_loglinear(model: LogLinearModel, distance_m: float, bin_name, beta: float = 0.05) -> Interval:
    """Back-transformed normal interval; the point is the log-normal mean."""
    beta = check_level(beta)
    if isinstance(bin_name, TrafficBin):
        bin_name = bin_name.value
    x = model.log_point(distance_m, bin_name)
    half = two_sided_z(beta) * model.residual_sd
    return Interval(math.exp(x - half), math.exp(x + 0.5 * model.residual_sd ** 2),
                    math.exp(x + half), 1.0 - beta)


class LogLinearTravelTime(BaseEstimator):
    """Estimator wrapper around :func:`fit_loglinear`.

    Bare routes need ``network`` at prediction time to get their distance.
    """

    def __init__(self, level=0.95, tz_offset_s=0.0):
        self.level = level
        self.tz_offset_s = tz_offset_s

    def fit(self, X, y=None):
        check_level(1.0 - self.level)
        self.model_ = fit_loglinear(X, self.tz_offset_s)
        return self

    def _features(self, X, network):
        out = []
        for r in check_routes(X):
            if isinstance(r, Trip):
                out.append((r.distance, trip_bin(r, self.tz_offset_s)))
            elif network is None:
                raise ValueError("routes without distances need a network")
            else:
                out.append((network.route_length_m(r.edge_ids),
                            assign_traffic_bin(r.start_time, self.tz_offset_s).value))
        return out

    def predict_interval(self, X, network=None):
        check_is_fitted(self, "model_")
        ivs = [predict_loglinear(self.model_, d, b, 1.0 - self.level) for d, b in self._features(X, network)]
        return (np.array([iv.point for iv in ivs]), np.array([iv.lower for iv in ivs]),
                np.array([iv.upper for iv in ivs]))

    def predict(self, X, network=None) -> np.ndarray:
        return self.predict_interval(X, network)[0]

    def to_json(self, path=None) -> str:
        check_is_fitted(self, "model_")
        m = self.model_
        d = {"kind": "loglinear", "params": self.get_params(), "intercept": m.intercept,
             "coef_distance": m.coef_distance, "coef_bin": m.coef_bin, "residual_sd": m.residual_sd,
             "m": m.m}
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path) -> "LogLinearTravelTime":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        est = cls(**d["params"])
        est.model_ = LogLinearModel(d["intercept"], d["coef_distance"], dict(d["coef_bin"]),
                                    d["residual_sd"], d["m"])
        return est


def load_baseline(path):
    kind = json.loads(Path(path).read_text(encoding="utf-8")).get("kind")
    if kind == "lognormal":
        return NoDependenceLogNormal.from_json(path)
    if kind == "loglinear":
        return LogLinearTravelTime.from_json(path)
    raise ValueError(f"{path}: unknown model kind {kind!r}")


# externally produced intervals -----------------------------------------------------

def write_intervals_csv(trip_ids, point, lower, upper, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERVAL_COLUMNS)
        for row in zip(trip_ids, point, lower, upper):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_intervals_csv(path) -> list[dict]:
    """Read ``trip_id,point_s,lower_s,upper_s`` rows into prediction dicts."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(INTERVAL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                out.append({"trip_id": row["trip_id"], "point": float(row["point_s"]),
                            "lower": float(row["lower_s"]), "upper": float(row["upper_s"])})
            except ValueError as exc:
                raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
    return out
