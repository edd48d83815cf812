import json
import math
from collections import defaultdict
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from traveltime.baselines import (
    LogLinearModel,
    LogLinearTravelTime,
    NoDependenceLogNormal,
    fit_loglinear,
    fit_lognormal,
    load_baseline,
    predict_loglinear,
    predict_lognormal,
    read_intervals_csv,
    sample_route_totals,
    write_intervals_csv,
)
from traveltime.exceptions import RankDeficient, TooFewTrips
from traveltime.ingest import assign_traffic_bin
from traveltime.simulator import simulate_trips
from traveltime.trips import RouteQuery, trip_from_route
from traveltime.tripspec import ANY, EdgeMomentTable, Moment, trip_variance

WED_0700 = datetime(2024, 1, 3, 7, 0, tzinfo=timezone.utc).timestamp()
STARTS = {"AMRush": WED_0700, "PMRush": WED_0700 + 9 * 3600, "NonRush": WED_0700 + 5 * 3600}


def _log_table(params):
    """Unstratified log-moment table from ``{edge: (log_mean, log_sd)}``."""
    entries = {(e, ANY, ANY): Moment(m, s * s, 10) for e, (m, s) in params.items()}
    entries[(ANY, ANY, ANY)] = Moment(0.0, 0.0, 1)
    return EdgeMomentTable(entries, stratified=False)


# log-normal fit ---------------------------------------------------------------------

def test_constant_observations():
    trips = [trip_from_route(f"t{i}", ["e", "f"], 0.0, [10.0, 10.0], [1.0, 1.0]) for i in range(10)]
    model = fit_lognormal(trips, stratify=False)
    mo, _ = model.lookup("e", "f", ANY)
    assert mo.mean == pytest.approx(math.log(10.0), rel=1e-15) and mo.var == 0.0


def test_lognormal_group_by_oracle(canonical):
    trips = simulate_trips(canonical.network, canonical.spec, canonical.mixing, 50, seed=12)
    model = fit_lognormal(trips, min_count=5)
    edge_obs = defaultdict(list)
    for t in trips:
        for k, e in enumerate(t.edge_ids):
            edge_obs[(e, assign_traffic_bin(t.entry_times[k]).value)].append(math.log(t.travel_times[k]))
    for (e, b), xs in edge_obs.items():
        if len(xs) < 5:
            continue
        mo, _ = model.lookup(e, None, b)
        assert mo.count == len(xs)
        assert mo.mean == pytest.approx(np.mean(xs), rel=1e-12)
        assert mo.var == pytest.approx(np.var(xs, ddof=1), rel=1e-9, abs=1e-12)


# log-normal prediction --------------------------------------------------------------

def test_zero_log_sd_collapses():
    model = _log_table({"a": (math.log(10.0), 0.0), "b": (math.log(4.0), 0.0)})
    iv = predict_lognormal(model, ["a", "b", "a"], 0.0, 0.05, samples=200, rng_seed=1)
    assert iv.lower == pytest.approx(24.0) and iv.upper == pytest.approx(24.0)
    assert iv.point == pytest.approx(24.0)


def test_single_edge_mean_closed_form():
    mu, s = 2.0, 0.4
    totals = sample_route_totals(_log_table({"a": (mu, s)}), ["a"], 0.0, 100_000, 5)[:, -1]
    se = totals.std(ddof=1) / math.sqrt(totals.size)
    assert abs(totals.mean() - math.exp(mu + s * s / 2)) < 3 * se


@pytest.mark.slow
def test_quantiles_match_large_sample_oracle():
    model = _log_table({"a": (2.0, 0.3), "b": (2.5, 0.5)})
    rng = np.random.default_rng(2024)
    oracle = np.sort(rng.lognormal(2.0, 0.3, 10**6) + rng.lognormal(2.5, 0.5, 10**6))
    n = 10_000
    iv = predict_lognormal(model, ["a", "b"], 0.0, 0.05, samples=n, rng_seed=3)
    # compare on the probability scale, where the Monte Carlo error is binomial
    tol = 4 * math.sqrt(0.025 * 0.975 / n)
    assert np.searchsorted(oracle, iv.lower) / oracle.size == pytest.approx(0.025, abs=tol)
    assert np.searchsorted(oracle, iv.upper) / oracle.size == pytest.approx(0.975, abs=tol)


def test_seed_determinism_and_permutation_invariance():
    model = _log_table({"a": (2.0, 0.3), "b": (2.5, 0.5)})
    a = predict_lognormal(model, ["a", "b"], 0.0, 0.1, samples=500, rng_seed=8)
    assert a == predict_lognormal(model, ["a", "b"], 0.0, 0.1, samples=500, rng_seed=8)
    assert a != predict_lognormal(model, ["a", "b"], 0.0, 0.1, samples=500, rng_seed=9)
    totals = sample_route_totals(model, ["a", "b"], 0.0, 500, 8)[:, -1]
    shuffled = np.random.default_rng(0).permutation(totals)
    assert np.array_equal(np.quantile(shuffled, [0.05, 0.95]), [a.lower, a.upper])
    assert shuffled.mean() == pytest.approx(a.point, rel=1e-14)


def test_replicate_clock_reresolves_bin():
    # 900 s edge from 08:20: replicates enter the second edge after 08:30
    entries = {("x", ANY, "AMRush"): Moment(math.log(900.0), 0.0, 10),
               ("y", ANY, "AMRush"): Moment(math.log(100.0), 0.0, 10),
               ("y", ANY, "NonRush"): Moment(math.log(10.0), 0.0, 10)}
    for b in ("AMRush", "PMRush", "NonRush"):
        entries[(ANY, ANY, b)] = Moment(0.0, 0.0, 1)
    model = EdgeMomentTable(entries)
    iv = predict_lognormal(model, ["x", "y"], WED_0700 + 80 * 60, samples=10, rng_seed=0)
    assert iv.point == pytest.approx(910.0)


def test_zero_correlation_matches_tripspec_variance():
    params = {"a": (2.0, 0.05), "b": (2.3, 0.08), "c": (1.8, 0.06)}
    model = _log_table(params)
    moments = {e: Moment(math.exp(m + s * s / 2), (math.exp(s * s) - 1) * math.exp(2 * m + s * s), 10)
               for e, (m, s) in params.items()}
    table = EdgeMomentTable({**{(e, ANY, ANY): mo for e, mo in moments.items()},
                             (ANY, ANY, ANY): Moment(1.0, 1.0, 1)}, stratified=False)
    route = ["a", "b", "c", "a", "b"]
    n = 40_000
    totals = sample_route_totals(model, route, 0.0, n, 4)[:, -1]
    expected = trip_variance(route, np.zeros(len(route)), table, 0.0)
    # the sample variance has relative sd of about sqrt(2/n) for near-normal totals
    assert totals.var(ddof=1) == pytest.approx(expected, rel=4 * math.sqrt(2 / n))


def test_lognormal_estimator(canonical, tmp_path):
    train = simulate_trips(canonical.network, canonical.spec, canonical.mixing, 300, seed=1)
    test = simulate_trips(canonical.network, canonical.spec, canonical.mixing, 12, seed=2)
    est = NoDependenceLogNormal(samples=200, random_state=4).fit(train)
    point, lo, hi = est.predict_interval(test)
    assert np.all(lo <= point) and np.all(point <= hi)
    tail = est.predict_interval(test[5:], offset=5)
    assert all(np.array_equal(x[5:], y) for x, y in zip((point, lo, hi), tail))
    est.to_json(tmp_path / "m.json")
    back = load_baseline(tmp_path / "m.json")
    assert isinstance(back, NoDependenceLogNormal)
    assert np.array_equal(back.predict_interval(test)[2], hi)


# log-linear -------------------------------------------------------------------------

def _loglinear_trips(coef, m, noise, seed):
    rng = np.random.default_rng(seed)
    bins = list(STARTS)
    trips = []
    for i in range(m):
        d = float(rng.uniform(500.0, 20_000.0))
        b = bins[i % 3]
        y = coef[0] + coef[1] * d + coef[2][b] + noise * rng.standard_normal()
        trips.append(trip_from_route(f"t{i}", ["e"], STARTS[b] + 60.0 * (i // 3 % 30), [math.exp(y)], [d]))
    return trips


COEF = (3.0, 1.5e-4, {"AMRush": 0.0, "PMRush": 0.2, "NonRush": -0.1})


def test_noiseless_recovery():
    model = fit_loglinear(_loglinear_trips(COEF, 30, 0.0, 1))
    assert model.intercept == pytest.approx(3.0, abs=1e-9)
    assert model.coef_distance == pytest.approx(1.5e-4, abs=1e-9)
    for b, v in COEF[2].items():
        assert model.coef_bin[b] == pytest.approx(v, abs=1e-9)
    assert model.residual_sd == pytest.approx(0.0, abs=1e-9)


def test_normal_equations_oracle():
    trips = _loglinear_trips(COEF, 20, 0.3, 2)
    X = np.array([[1.0, t.distance, assign_traffic_bin(t.start_time).value == "PMRush",
                   assign_traffic_bin(t.start_time).value == "NonRush"] for t in trips])
    y = np.log([t.total_time for t in trips])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    resid = y - X @ beta
    model = fit_loglinear(trips)
    got = [model.intercept, model.coef_distance, model.coef_bin["PMRush"], model.coef_bin["NonRush"]]
    assert got == pytest.approx(beta.tolist(), rel=1e-7, abs=1e-10)
    assert model.residual_sd == pytest.approx(math.sqrt(resid @ resid / 16), rel=1e-9)


def test_degenerate_interval():
    iv = predict_loglinear(LogLinearModel(1.0, 0.001, {"AMRush": 0.0}, 0.0, 10), 1000.0, "AMRush")
    assert iv.lower == iv.point == iv.upper == pytest.approx(math.exp(2.0))


@given(st.floats(100.0, 5e4), st.floats(1.0, 5e4))
def test_interval_is_multiplicative(d, delta):
    model = LogLinearModel(2.0, 1e-4, {"AMRush": 0.0, "PMRush": 0.3, "NonRush": 0.1}, 0.4, 50)
    a, b = predict_loglinear(model, d, "PMRush"), predict_loglinear(model, d + delta, "PMRush")
    ratio = math.exp(1e-4 * delta)
    assert b.lower / a.lower == pytest.approx(ratio, rel=1e-12)
    assert b.upper / a.upper == pytest.approx(ratio, rel=1e-12)


def test_loglinear_coverage_on_loglinear_data():
    model = fit_loglinear(_loglinear_trips(COEF, 2000, 0.25, 3))
    test = _loglinear_trips(COEF, 2000, 0.25, 4)
    covered = [predict_loglinear(model, t.distance, assign_traffic_bin(t.start_time), 0.05).__contains__(
        t.total_time) for t in test]
    assert 100 * np.mean(covered) == pytest.approx(95.0, abs=1.5)


def test_rank_deficient_and_too_few():
    am_only = [t for t in _loglinear_trips(COEF, 60, 0.2, 5) if assign_traffic_bin(t.start_time).value == "AMRush"]
    with pytest.raises(RankDeficient):
        fit_loglinear(am_only)
    with pytest.raises(TooFewTrips):
        fit_loglinear(_loglinear_trips(COEF, 5, 0.2, 5))


def test_loglinear_estimator(tmp_path, cycle3):
    est = LogLinearTravelTime(level=0.9).fit(_loglinear_trips(COEF, 60, 0.2, 6))
    q = RouteQuery(("a", "b"), STARTS["PMRush"])
    with pytest.raises(ValueError):
        est.predict([q])
    point = est.predict([q], network=cycle3)
    assert point[0] == pytest.approx(predict_loglinear(est.model_, 200.0, "PMRush").point)
    est.to_json(tmp_path / "l.json")
    assert load_baseline(tmp_path / "l.json").model_ == est.model_


def test_load_baseline_unknown_kind(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"kind": "hmm"}))
    with pytest.raises(ValueError):
        load_baseline(tmp_path / "x.json")


def test_intervals_csv_roundtrip(tmp_path):
    write_intervals_csv(["a", "b"], [10.0, 20.5], [8.0, 15.25], [12.0, 30.0], tmp_path / "i.csv")
    rows = read_intervals_csv(tmp_path / "i.csv")
    assert rows == [{"trip_id": "a", "point": 10.0, "lower": 8.0, "upper": 12.0},
                    {"trip_id": "b", "point": 20.5, "lower": 15.25, "upper": 30.0}]
    (tmp_path / "bad.csv").write_text("trip_id,point_s\na,1\n")
    with pytest.raises(ValueError):
        read_intervals_csv(tmp_path / "bad.csv")


def test_single_edge_replicates_are_lognormal():
    totals = sample_route_totals(_log_table({"a": (1.0, 0.5)}), ["a"], 0.0, 20_000, 11)[:, -1]
    assert stats.kstest(np.log(totals), "norm", args=(1.0, 0.5)).pvalue > 0.01
