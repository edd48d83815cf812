"""Travel-time distributions on road networks from GPS trips.

Population intervals use only the route length; trip-specific intervals
follow a route edge by edge with traffic-bin-aware moments and a pooled
within-trip correlation.  A simulator with cyclostationary, mixing speeds
provides ground truth for calibration checks.
"""

from .baselines import LogLinearTravelTime, NoDependenceLogNormal
from .evaluation import MetricsReport, coverage_by_length, ergodicity_check, score
from .ingest import MatchedPoint, TrafficBin, assign_traffic_bin, bin_of_trip, ingest
from .network import TransportNetwork, build_network, random_walk, stationary_distribution
from .population import (
    Interval,
    PopulationIntervalEstimator,
    PopulationParams,
    estimate_population,
    mean_confidence_interval,
    population_prediction_interval,
)
from .simulator import (
    MixingSpec,
    Scenario,
    SpeedProcessSpec,
    analytic_mu,
    canonical_scenario,
    simulate_trip,
    simulate_trips,
)
from .trips import RouteQuery, Trip, read_trips_csv, write_trips_csv
from .tripspec import (
    EdgeMomentTable,
    IntervalSequence,
    TripSpecificParams,
    TripSpecificPredictor,
    fit_edge_moments,
    trip_prediction_sequence,
)

__version__ = "0.1.0"
