"""Scoring: point error, coverage and interval-length metrics, coverage curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import EmptyInput, IdMismatch
from .trips import Trip, check_trips

METRICS = ("rmse", "mae", "mean_error", "mape_pct", "coverage_pct", "mean_interval_length_s",
           "relative_length_pct")
CURVE_COLUMNS = ("k", "coverage", "interval_width", "n_trips")


@dataclass
class MetricsReport:
    n: int
    rmse: float
    mae: float
    mean_error: float
    mape_pct: float
    coverage_pct: float
    mean_interval_length_s: float
    relative_length_pct: float
    strata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["strata"] = {k: v.as_dict() for k, v in self.strata.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def tidy_rows(self, stratum: str = "all") -> list[tuple]:
        rows = [(stratum, "n", self.n)] + [(stratum, m, getattr(self, m)) for m in METRICS]
        for name, sub in self.strata.items():
            rows.extend(sub.tidy_rows(name))
        return rows

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("stratum", "metric", "value"))
            for s, m, v in self.tidy_rows():
                w.writerow((s, m, repr(float(v)) if m != "n" else v))


def _align(predictions, actuals):
    """Match prediction rows to trips by id; returns arrays ``point, lower, upper, T, n``."""
    trips = check_trips(actuals)
    preds = list(predictions)
    if not preds:
        raise EmptyInput("no predictions to score")
    by_id = {t.trip_id: t for t in trips}
    if len(by_id) != len(trips):
        raise IdMismatch("duplicate trip ids among actuals")
    seen = set()
    rows = []
    for p in preds:
        tid = p["trip_id"]
        if tid not in by_id:
            raise IdMismatch(f"prediction for unknown trip {tid!r}")
        if tid in seen:
            raise IdMismatch(f"duplicate prediction for trip {tid!r}")
        seen.add(tid)
        t = by_id[tid]
        rows.append((p["point"], p["lower"], p["upper"], t.total_time, t.n))
    return tuple(np.array(c, dtype=float) for c in zip(*rows))


def _report(point, lower, upper, T, n) -> MetricsReport:
    err = point - T
    width = upper - lower
    return MetricsReport(
        n=int(T.size),
        rmse=float(math.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        mean_error=float(np.mean(err)),
        mape_pct=float(np.mean(np.abs(err) / T) * 100.0),
        coverage_pct=float(np.mean((lower <= T) & (T <= upper)) * 100.0),
        mean_interval_length_s=float(np.mean(width)),
        relative_length_pct=float(np.mean(width / T) * 100.0),
    )


def score(predictions, actuals) -> MetricsReport:
    """Error, coverage and width metrics.

    Parameters
    ----------
    predictions : iterable of dict
        Each with ``trip_id``, ``point``, ``lower`` and ``upper`` (seconds).
    actuals : iterable of Trip
        Must contain every predicted ``trip_id``.

    Notes
    -----
    Relative length is the mean of per-trip ``width / T``, in percent.
    """
    return _report(*_align(predictions, actuals))


def predictions_from_arrays(trip_ids, point, lower, upper) -> list[dict]:
    return [{"trip_id": i, "point": float(p), "lower": float(lo), "upper": float(hi)}
            for i, p, lo, hi in zip(trip_ids, point, lower, upper)]


def _stratum_labels(cutpoints: Sequence[int]) -> list[str]:
    cuts = list(cutpoints)
    labels = [f"n<={cuts[0]}"]
    labels += [f"{a}<n<={b}" for a, b in zip(cuts[:-1], cuts[1:])]
    labels.append(f"n>{cuts[-1]}")
    return labels


def length_stratified_report(predictions, actuals, cutpoints=(40, 80, 120)) -> MetricsReport:
    """Overall report with per-stratum reports of edge count attached.

    Strata are ``(a, b]`` in edge count, so ``n = 40`` falls in ``n<=40``.
    Empty strata are omitted.
    """
    point, lower, upper, T, n = _align(predictions, actuals)
    cuts = sorted(cutpoints)
    out = _report(point, lower, upper, T, n)
    idx = np.searchsorted(np.asarray(cuts, dtype=float), n, side="left")
    for j, label in enumerate(_stratum_labels(cuts)):
        sel = idx == j
        if sel.any():
            out.strata[label] = _report(point[sel], lower[sel], upper[sel], T[sel], n[sel])
    return out


@dataclass
class CoverageCurve:
    k: np.ndarray
    coverage: np.ndarray
    interval_width: np.ndarray
    n_trips: np.ndarray

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS)
            for row in zip(self.k, self.coverage, self.interval_width, self.n_trips):
                w.writerow((int(row[0]), repr(float(row[1])), repr(float(row[2])), int(row[3])))


def coverage_by_length(sequences, actuals, min_trips: int = 30) -> CoverageCurve:
    """Fraction of trips whose cumulative time after ``k`` edges is inside the ``k``-th interval.

    ``sequences`` pairs with ``actuals`` by position.  Only prefix lengths
    reached by at least ``min_trips`` trips are reported.
    """
    seqs = list(sequences)
    trips = check_trips(actuals)
    if len(seqs) != len(trips):
        raise IdMismatch(f"{len(seqs)} sequences for {len(trips)} trips")
    if not trips:
        raise EmptyInput("no trips")
    kmax = max(min(len(s.points), t.n) for s, t in zip(seqs, trips))
    hits = np.zeros(kmax)
    width = np.zeros(kmax)
    count = np.zeros(kmax, dtype=np.int64)
    for s, t in zip(seqs, trips):
        m = min(len(s.points), t.n)
        cum = t.cumulative_times()[:m]
        lo, hi = np.asarray(s.lowers)[:m], np.asarray(s.uppers)[:m]
        hits[:m] += (lo <= cum) & (cum <= hi)
        width[:m] += hi - lo
        count[:m] += 1
    keep = count >= min_trips
    k = np.arange(1, kmax + 1)[keep]
    c = count[keep]
    return CoverageCurve(k, hits[keep] / c, width[keep] / c, c)


@dataclass
class ErgodicityResult:
    k: np.ndarray
    space_average: np.ndarray
    n_trips: np.ndarray
    time_averages: dict
    mu_hat: float

    def to_csv(self, path) -> None:
        """Long format ``series,trip_id,k,value``; ``series`` is ``space`` or ``time``."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("series", "trip_id", "k", "value"))
            for k, v in zip(self.k, self.space_average):
                w.writerow(("space", "", int(k), repr(float(v))))
            for tid, curve in self.time_averages.items():
                for k, v in enumerate(curve, 1):
                    w.writerow(("time", tid, k, repr(float(v))))


def ergodicity_check(trips, min_edges: int = 10) -> ErgodicityResult:
    """Space averages across trips versus running time averages along each trip.

    The space average at ``k`` is the mean of ``cum_k / k`` over trips with
    at least ``k`` edges; each trip's time-average curve is ``cum_k / k``
    for ``k = 1..n``.
    """
    trips = [t for t in check_trips(trips) if t.n >= min_edges]
    if not trips:
        raise EmptyInput(f"no trip has at least {min_edges} edges")
    kmax = max(t.n for t in trips)
    total = np.zeros(kmax)
    count = np.zeros(kmax, dtype=np.int64)
    curves = {}
    for t in trips:
        curve = t.cumulative_times() / np.arange(1, t.n + 1)
        curves[t.trip_id] = curve
        total[: t.n] += curve
        count[: t.n] += 1
    mu_hat = float(np.mean([t.total_time / t.n for t in trips]))
    return ErgodicityResult(np.arange(1, kmax + 1), total / count, count, curves, mu_hat)


def score_trips(model, trips: Sequence[Trip]) -> MetricsReport:
    """Convenience: score any estimator with ``predict_interval`` on trips."""
    trips = check_trips(trips)
    point, lower, upper = model.predict_interval(trips)
    return score(predictions_from_arrays([t.trip_id for t in trips], point, lower, upper), trips)
