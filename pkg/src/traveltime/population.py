"""Population-level inference: the per-edge mean and route-length intervals.

Every trip contributes one number, its average time per unit ``T_j / n_j``.
The mean of those estimates the long-run time per edge; their variance,
divided by the average of ``1 / n_j``, gives a per-edge dispersion that scales
linearly with route length.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import NonPositiveLength, TooFewTrips
from .stats import check_level, t_quantile, two_sided_z
from .trips import Trip, check_routes, check_trips

UNITS = ("edge", "per-100m")


@dataclass(frozen=True)
class PopulationParams:
    mu_hat: float
    var_hat: float
    mean_inv_n: float
    sigma_prof_sq: float
    m: int
    unit: str = "edge"

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, source) -> "PopulationParams":
        text = Path(source).read_text(encoding="utf-8") if not str(source).lstrip().startswith("{") \
            else str(source)
        d = json.loads(text)
        return cls(float(d["mu_hat"]), float(d["var_hat"]), float(d["mean_inv_n"]),
                   float(d["sigma_prof_sq"]), int(d["m"]), d.get("unit", "edge"))


@dataclass(frozen=True)
class Interval:
    """Prediction interval.

    Symmetric intervals carry ``half_width`` so that ``width`` does not pick
    up the rounding of the endpoints around a large point value.
    """

    lower: float
    point: float
    upper: float
    level: float
    half_width: float | None = None

    @property
    def width(self) -> float:
        if self.half_width is not None:
            return 2.0 * self.half_width
        return self.upper - self.lower

    def __contains__(self, x) -> bool:
        return self.lower <= x <= self.upper


def route_units(trip, unit: str = "edge") -> int:
    """Route length ``n`` of a trip in the chosen unit.

    ``"per-100m"`` counts started 100 m blocks of driven distance.
    """
    if unit == "edge":
        return trip.n
    if unit == "per-100m":
        return max(1, math.ceil(trip.distance / 100.0))
    raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")


def estimate_population(trips, unit: str = "edge", min_edges: int = 1) -> PopulationParams:
    """Fit the per-unit mean and profile variance from a sample of trips.

    Parameters
    ----------
    trips : iterable of Trip
    unit : {"edge", "per-100m"}
    min_edges : int
        Trips with fewer edges are ignored.

    Raises
    ------
    TooFewTrips
        Fewer than two trips survive ``min_edges``.
    """
    trips = [t for t in check_trips(trips) if t.n >= min_edges]
    if len(trips) < 2:
        raise TooFewTrips(f"need at least 2 trips, got {len(trips)}")
    n = np.array([route_units(t, unit) for t in trips], dtype=float)
    T = np.array([t.total_time for t in trips])
    return params_from_arrays(T, n, unit)


def params_from_arrays(T, n, unit: str = "edge") -> PopulationParams:
    T = np.asarray(T, dtype=float)
    n = np.asarray(n, dtype=float)
    if T.size < 2:
        raise TooFewTrips(f"need at least 2 trips, got {T.size}")
    per_unit = T / n
    var_hat = float(np.var(per_unit, ddof=1))
    mean_inv_n = float(np.mean(1.0 / n))
    return PopulationParams(float(per_unit.mean()), var_hat, mean_inv_n,
                            var_hat / mean_inv_n, int(T.size), unit)


def mean_confidence_interval(params: PopulationParams, beta: float = 0.05) -> Interval:
    """Student-t interval for the per-unit mean."""
    beta = check_level(beta)
    if params.m < 2:
        raise TooFewTrips("need m >= 2")
    half = t_quantile(1.0 - beta / 2.0, params.m - 1) * math.sqrt(params.var_hat / params.m)
    return Interval(params.mu_hat - half, params.mu_hat, params.mu_hat + half, 1.0 - beta, half)


def population_prediction_interval(params: PopulationParams, n, beta: float = 0.05) -> Interval:
    """Interval for the total time of a new route of length ``n`` units.

    The half-width is ``z * sqrt(n * sigma_prof_sq * (1 + 1/m))``.  A normal
    quantile is used even though ``sigma_prof_sq`` is estimated.
    """
    beta = check_level(beta)
    if not n >= 1:
        raise NonPositiveLength(f"route length must be >= 1, got {n!r}")
    point = n * params.mu_hat
    half = two_sided_z(beta) * math.sqrt(n * params.sigma_prof_sq * (1.0 + 1.0 / params.m))
    return Interval(point - half, point, point + half, 1.0 - beta, half)


class PopulationIntervalEstimator(BaseEstimator):
    """Route-length-only predictor of total travel time.

    Parameters
    ----------
    level : float, default 0.95
        Nominal coverage of prediction intervals.
    unit : {"edge", "per-100m"}
        What ``n`` counts.  ``per-100m`` needs trips (with distances) or a
        ``network`` at prediction time.
    min_edges : int, default 1
        Trips shorter than this are left out of fitting.

    Attributes
    ----------
    params_ : PopulationParams
    """

    def __init__(self, level=0.95, unit="edge", min_edges=1):
        self.level = level
        self.unit = unit
        self.min_edges = min_edges

    def fit(self, X, y=None):
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        check_level(1.0 - self.level)
        self.params_ = estimate_population(X, self.unit, self.min_edges)
        return self

    @classmethod
    def from_params(cls, params: PopulationParams, level=0.95):
        est = cls(level=level, unit=params.unit)
        est.params_ = params
        return est

    def _lengths(self, X, network=None) -> np.ndarray:
        if np.ndim(X) == 1 and len(X) and all(isinstance(v, (int, np.integer)) for v in X):
            return np.asarray(X, dtype=float)
        out = []
        for r in check_routes(X):
            if isinstance(r, Trip):
                out.append(route_units(r, self.unit))
            elif self.unit == "edge":
                out.append(r.n)
            elif network is not None:
                out.append(max(1, math.ceil(network.route_length_m(r.edge_ids) / 100.0)))
            else:
                raise ValueError("per-100m prediction on bare routes needs a network")
        return np.asarray(out, dtype=float)

    def predict(self, X, network=None) -> np.ndarray:
        """Point predictions ``n * mu_hat`` for trips, routes or plain lengths."""
        check_is_fitted(self, "params_")
        return self._lengths(X, network) * self.params_.mu_hat

    def predict_interval(self, X, network=None):
        """Return ``(point, lower, upper)`` arrays at the estimator's level."""
        check_is_fitted(self, "params_")
        beta = 1.0 - self.level
        ivs = [population_prediction_interval(self.params_, n, beta) for n in self._lengths(X, network)]
        return (np.array([i.point for i in ivs]), np.array([i.lower for i in ivs]),
                np.array([i.upper for i in ivs]))

    def confidence_interval(self, beta=None) -> Interval:
        check_is_fitted(self, "params_")
        return mean_confidence_interval(self.params_, 1.0 - self.level if beta is None else beta)


__all__ = [
    "Interval",
    "PopulationIntervalEstimator",
    "PopulationParams",
    "estimate_population",
    "mean_confidence_interval",
    "population_prediction_interval",
    "route_units",
]
