import math
from collections import defaultdict
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traveltime.exceptions import (
    DegenerateVariance,
    EmptyTraining,
    NoEligibleTrips,
    NonPositiveVariance,
    TooFewTrips,
)
from traveltime.ingest import assign_traffic_bin
from traveltime.network import random_walk
from traveltime.simulator import MixingSpec, canonical_scenario, simulate_trips
from traveltime.stats import RunningMoments
from traveltime.trips import RouteQuery, trip_from_route
from traveltime.tripspec import (
    ANY,
    EDGE_LEVEL,
    EXIT_LEVEL,
    GLOBAL_LEVEL,
    EdgeMomentTable,
    Moment,
    TripSpecificParams,
    TripSpecificPredictor,
    deterministic_times,
    estimate_nu,
    estimate_xi,
    fit_edge_moments,
    standardized_errors,
    trip_mean,
    trip_prediction_sequence,
    trip_variance,
)

WED_0700 = datetime(2024, 1, 3, 7, 0, tzinfo=timezone.utc).timestamp()
WED_1200 = WED_0700 + 5 * 3600
WED_1600 = WED_0700 + 9 * 3600


def _flat_table(moments, stratified=False):
    """Unstratified table from ``{edge: (mean, var)}`` plus a global entry."""
    entries = {(e, ANY, ANY): Moment(m, v, 10) for e, (m, v) in moments.items()}
    entries[(ANY, ANY, ANY)] = Moment(10.0, 1.0, 100)
    return EdgeMomentTable(entries, stratified=stratified)


def _fillers():
    # one observation in each bin on an unrelated edge keeps every global entry non-empty
    return [trip_from_route(f"f{i}", ["z"], t, [30.0], [100.0])
            for i, t in enumerate((WED_0700, WED_1200, WED_1600))]


# table ------------------------------------------------------------------------------

def test_identical_observations():
    trips = [trip_from_route(f"t{i}", ["e", "f"], WED_0700 + i, [12.0, 5.0], [100.0, 100.0])
             for i in range(10)]
    table = fit_edge_moments(trips + _fillers())
    mo, level = table.lookup("e", "f", "AMRush")
    assert (mo.mean, mo.var, mo.count, level) == (12.0, 0.0, 10, EXIT_LEVEL)


def test_fallback_chain():
    trips = [trip_from_route(f"a{i}", ["e", "f"], WED_0700, [10.0, 5.0], [1.0, 1.0]) for i in range(9)]
    trips += [trip_from_route(f"b{i}", ["e", "g"], WED_0700, [20.0, 5.0], [1.0, 1.0]) for i in range(3)]
    trips += [trip_from_route(f"c{i}", ["h", "e"], WED_0700, [7.0, 1.0], [1.0, 1.0]) for i in range(3)]
    table = fit_edge_moments(trips + _fillers())
    # (e, f) has 9 and (e, g) 3: both fall back to e's 12 exit observations plus 3 route ends
    mo, level = table.lookup("e", "g", "AMRush")
    assert level == EDGE_LEVEL and mo.count == 15
    assert mo.mean == pytest.approx((9 * 10 + 3 * 20 + 3 * 1) / 15)
    # h has only 3 observations: straight to the bin global
    mo, level = table.lookup("h", "e", "AMRush")
    assert level == GLOBAL_LEVEL
    assert mo.count == 9 * 2 + 3 * 2 + 3 * 2 + 1
    assert table.lookup("e", "g", "NonRush")[1] == GLOBAL_LEVEL
    assert table.lookup("e", None, "AMRush")[1] == EDGE_LEVEL


def test_min_count_one_keeps_everything():
    trips = [trip_from_route("a", ["e", "f"], WED_0700, [10.0, 5.0], [1.0, 1.0])] + _fillers()
    table = fit_edge_moments(trips, min_count=1)
    assert table.lookup("e", "f", "AMRush") == (Moment(10.0, 0.0, 1), EXIT_LEVEL)


def test_empty_training():
    with pytest.raises(EmptyTraining):
        fit_edge_moments([])
    with pytest.raises(EmptyTraining):
        fit_edge_moments([trip_from_route("a", ["e"], WED_0700, [1.0], [1.0])])
    table = fit_edge_moments([trip_from_route("a", ["e"], WED_0700, [1.0], [1.0])], stratify=False)
    assert table.lookup("e", None, "PMRush")[0].mean == 1.0


def _group_by_oracle(trips, min_count):
    exit_obs, edge_obs, glob = defaultdict(list), defaultdict(list), defaultdict(list)
    for t in trips:
        for k, e in enumerate(t.edge_ids):
            b = assign_traffic_bin(t.entry_times[k]).value
            x = t.travel_times[k]
            if k + 1 < t.n:
                exit_obs[(e, t.edge_ids[k + 1], b)].append(x)
            edge_obs[(e, ANY, b)].append(x)
            glob[(ANY, ANY, b)].append(x)
    out = {}
    for source, threshold in ((exit_obs, min_count), (edge_obs, min_count), (glob, 1)):
        for key, xs in source.items():
            if len(xs) >= threshold:
                out[key] = (np.mean(xs), np.var(xs, ddof=1) if len(xs) > 1 else 0.0, len(xs))
    return out


def test_table_matches_group_by_oracle(canonical):
    sc = canonical
    trips = simulate_trips(sc.network, sc.spec, sc.mixing, 50, seed=77)
    table = fit_edge_moments(trips, min_count=5)
    oracle = _group_by_oracle(trips, 5)
    got = dict(table.items())
    assert set(got) == set(oracle)
    for key, (m, v, c) in oracle.items():
        assert got[key].count == c
        assert got[key].mean == pytest.approx(m, rel=1e-12)
        assert got[key].var == pytest.approx(v, rel=1e-9, abs=1e-9)


def test_table_csv_roundtrip(tmp_path, canonical):
    trips = simulate_trips(canonical.network, canonical.spec, canonical.mixing, 40, seed=2)
    table = fit_edge_moments(trips, min_count=3)
    table.to_csv(tmp_path / "t.csv")
    assert EdgeMomentTable.from_csv(tmp_path / "t.csv") == table
    assert EdgeMomentTable.from_dict(table.to_dict()) == table


# deterministic times ----------------------------------------------------------------

def test_deterministic_times_constant():
    table = _flat_table({"a": (10.0, 1.0), "b": (10.0, 1.0), "c": (10.0, 1.0)})
    assert deterministic_times(["a", "b", "c"], 5.0, table).tolist() == [5.0, 15.0, 25.0]
    t_star = deterministic_times(["a", "b", "c"], 5.0, table)
    assert trip_mean(["a", "b", "c"], t_star, table) == 30.0


def test_deterministic_times_cross_boundary():
    entries = {("x", ANY, "AMRush"): Moment(100.0, 1.0, 10), ("x", ANY, "NonRush"): Moment(50.0, 1.0, 10),
               ("y", ANY, "AMRush"): Moment(30.0, 1.0, 10), ("y", ANY, "NonRush"): Moment(70.0, 1.0, 10)}
    for b in ("AMRush", "PMRush", "NonRush"):
        entries[(ANY, ANY, b)] = Moment(1.0, 1.0, 1)
    table = EdgeMomentTable(entries)
    t0 = WED_0700 + 89 * 60  # 08:29
    # hand recursion: x entered in AM rush (100 s), y entered at 08:30:40 in non-rush (70 s)
    t_star = deterministic_times(["x", "y"], t0, table)
    assert t_star.tolist() == [t0, t0 + 100.0]
    assert trip_mean(["x", "y"], t_star, table) == 170.0


def test_deterministic_times_locality():
    base = {"a": (10.0, 1.0), "b": (12.0, 2.0)}
    t1 = deterministic_times(["a", "b", "a"], 0.0, _flat_table(base))
    t2 = deterministic_times(["a", "b", "a"], 0.0, _flat_table({"q": (99.0, 9.0), **base, "r": (1.0, 1.0)}))
    assert np.array_equal(t1, t2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2e9), st.integers(1, 60), st.integers(0, 1000))
def test_trip_mean_identity(fitted_canonical, canonical, t0, n, seed):
    table = fitted_canonical.table_
    route = random_walk(canonical.network, "e1", n, seed)
    t_star = deterministic_times(route, t0, table)
    last = table.lookup(route[-1], None, table.bin_name(t_star[-1]))[0].mean
    # each clock step rounds at the magnitude of the epoch time
    tol = 2 * n * np.spacing(t_star[-1] + last)
    assert trip_mean(route, t_star, table) == pytest.approx(t_star[-1] + last - t0, rel=1e-12, abs=tol)
    assert np.all(np.diff(t_star) > 0)


@pytest.fixture(scope="module")
def fitted_canonical():
    sc = canonical_scenario()
    trips = simulate_trips(sc.network, sc.spec, sc.mixing, 1000, seed=42)
    return TripSpecificPredictor().fit(trips)


# variance and intervals -------------------------------------------------------------

def test_trip_variance_examples():
    table = _flat_table({"a": (10.0, 4.0), "b": (10.0, 4.0)})
    assert trip_variance(["a", "b"], [0.0, 10.0], table, 0.5) == 12.0
    assert trip_variance(["a", "b"], [0.0, 10.0], table, 0.0) == 8.0
    assert trip_variance(["a"], [0.0], table, 0.9) == 4.0
    p2 = TripSpecificParams(0.5, 1.0, 10, 2, 0.25)
    # 3 edges: 12 + 2*0.5*(4+4) + 2*0.25*4
    assert trip_variance(["a", "b", "a"], [0, 10, 20], table, p2, order=2) == 12.0 + 8.0 + 2.0


def test_prediction_interval_example():
    table = _flat_table({"a": (10.0, 4.0), "b": (10.0, 4.0)})
    seq = trip_prediction_sequence(["a", "b"], 0.0, table, TripSpecificParams(0.5, 1.0, 10), 0.05)
    assert seq.final.point == 20.0
    assert (round(seq.final.lower, 2), round(seq.final.upper, 2)) == (13.21, 26.79)
    assert seq.sds.tolist() == pytest.approx([2.0, math.sqrt(12.0)])
    assert seq.points.tolist() == [10.0, 20.0]


def test_zero_variance_collapses():
    table = _flat_table({"a": (10.0, 0.0), "b": (5.0, 0.0)})
    seq = trip_prediction_sequence(["a", "b", "a"], 0.0, table, TripSpecificParams(0.3, 1.4, 10), 0.05)
    assert np.array_equal(seq.lowers, seq.points) and np.array_equal(seq.uppers, seq.points)
    assert seq.points.tolist() == [10.0, 15.0, 25.0]


def test_non_positive_variance():
    table = _flat_table({"a": (10.0, 4.0)})
    with pytest.raises(NonPositiveVariance):
        trip_variance(["a", "a", "a"], [0, 10, 20], table, -0.9)
    with pytest.raises(ValueError):
        trip_variance(["a"], [0], table, 0.1, order=3)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=30), st.floats(0.0, 1.0),
       st.floats(0.0, 1.0), st.sampled_from([1, 2]))
def test_width_monotone_in_prefix(variances, xi1, xi2, order):
    table = _flat_table({f"e{k}": (5.0, v) for k, v in enumerate(variances)})
    route = [f"e{k}" for k in range(len(variances))]
    params = TripSpecificParams(xi1, 1.3, 10, order, xi2 if order == 2 else None)
    seq = trip_prediction_sequence(route, 0.0, table, params, 0.1)
    assert np.all(np.diff(seq.sds) >= -1e-12 * seq.sds[1:])
    assert np.all(seq.lowers <= seq.points) and np.all(seq.points <= seq.uppers)


@given(st.floats(0.01, 10.0))
def test_nu_scaling(nu_sq):
    table = _flat_table({"a": (10.0, 4.0), "b": (8.0, 2.5)})
    one = trip_prediction_sequence(["a", "b", "a"], 0.0, table, TripSpecificParams(0.2, nu_sq, 5))
    two = trip_prediction_sequence(["a", "b", "a"], 0.0, table, TripSpecificParams(0.2, 2 * nu_sq, 5))
    assert (two.uppers - two.points) == pytest.approx(math.sqrt(2) * (one.uppers - one.points), rel=1e-14)


# xi and nu --------------------------------------------------------------------------

def test_xi_near_zero_for_independent_residuals():
    sc = canonical_scenario(amplitude=0.0)
    trips = simulate_trips(sc.network, sc.spec, MixingSpec(0.0), 4000, seed=9)
    table = fit_edge_moments(trips)
    assert abs(estimate_xi(trips, table)) < 0.02
    assert abs(estimate_xi(trips, table, order=2)) < 0.02


def test_nu_near_one_when_calibrated():
    sc = canonical_scenario(amplitude=0.0)
    trips = simulate_trips(sc.network, sc.spec, MixingSpec(0.0), 4000, seed=10)
    # the true edge moments, so standardized trip errors are standard normal
    d, a, s = sc.network.lengths, sc.spec.a, sc.spec.s
    table = _flat_table({e: (d[k] * a[k], (d[k] * s[k]) ** 2) for k, e in enumerate(sc.network.edge_ids)})
    assert estimate_nu(trips, table, 0.0) == pytest.approx(1.0, abs=0.05)


def test_nu_matches_streaming_oracle(fitted_canonical):
    sc = canonical_scenario()
    trips = simulate_trips(sc.network, sc.spec, sc.mixing, 100, seed=3)
    table, params = fitted_canonical.table_, fitted_canonical.params_
    rm = RunningMoments()
    for t in trips:
        t_star = deterministic_times(t.edge_ids, t.start_time, table)
        mu = trip_mean(t.edge_ids, t_star, table)
        rm.push((t.total_time - mu) / math.sqrt(trip_variance(t.edge_ids, t_star, table, params)))
    assert estimate_nu(trips, table, params) == pytest.approx(rm.variance, abs=1e-10)


def test_xi_and_nu_errors():
    table = _flat_table({"a": (10.0, 4.0), "b": (10.0, 0.0)})
    one_edge = [trip_from_route(f"s{i}", ["a"], 0.0, [10.0 + i], [1.0]) for i in range(3)]
    with pytest.raises(NoEligibleTrips):
        estimate_xi(one_edge, table)
    with pytest.raises(NoEligibleTrips):
        estimate_xi([trip_from_route("s", ["a", "b"], 0.0, [1.0, 1.0], [1.0, 1.0])], table, order=2)
    with pytest.raises(TooFewTrips):
        estimate_nu(one_edge[:1], table, 0.0)
    with pytest.raises(DegenerateVariance):
        standardized_errors([trip_from_route("z", ["b"], 0.0, [3.0], [1.0])], table, 0.0)


def test_xi_excluding_imputed_pairs():
    trips = [trip_from_route(f"t{i}", ["a", "b"], 0.0, [10.0 + i % 3, 9.0 + i % 3], [1.0, 1.0])
             for i in range(6)]
    table = _flat_table({"a": (11.0, 1.0)})  # b resolves to the global entry
    assert estimate_xi(trips, table, include_imputed=False) == 0.0
    assert estimate_xi(trips, table, include_imputed=True) > 0.0


# estimator --------------------------------------------------------------------------

def test_predictor_api(fitted_canonical, tmp_path):
    est = fitted_canonical
    sc = canonical_scenario()
    test = simulate_trips(sc.network, sc.spec, sc.mixing, 20, seed=5, prefix="x")
    point, lo, hi = est.predict_interval(test)
    assert np.all(lo < point) and np.all(point < hi)
    q = RouteQuery(test[0].edge_ids, test[0].start_time)
    assert est.predict([q])[0] == point[0]
    seq = est.predict_sequence(test[0].edge_ids, test[0].start_time)
    assert len(seq) == test[0].n and seq.final.point == point[0]
    assert 0 <= est.params_.xi1 <= 1 and est.params_.nu_sq > 0
    est.params_.to_json(tmp_path / "p.json")
    back = TripSpecificPredictor.from_parts(est.table_, TripSpecificParams.from_json(tmp_path / "p.json"))
    assert np.array_equal(back.predict_interval(test)[2], hi)
    z = est.standardized_residuals(test)
    assert z.shape == (20,) and np.all(np.isfinite(z))


def test_fixed_nu_switches_off_calibration(canonical):
    trips = simulate_trips(canonical.network, canonical.spec, canonical.mixing, 300, seed=6)
    assert TripSpecificPredictor(fixed_nu_sq=1.0).fit(trips).params_.nu_sq == 1.0
    est = TripSpecificPredictor(order=2).fit(trips)
    assert est.params_.order == 2 and est.params_.xi2 is not None
