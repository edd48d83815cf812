"""``traveltime`` command-line interface.

Exit status is 0 on success, 2 on a usage error and 1 on a data error.
Diagnostics go to standard error; data goes to the named output files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import (
    LogLinearTravelTime,
    NoDependenceLogNormal,
    load_baseline,
    read_intervals_csv,
    write_intervals_csv,
)
from .evaluation import (
    coverage_by_length,
    ergodicity_check,
    length_stratified_report,
    predictions_from_arrays,
)
from .exceptions import TravelTimeError
from .ingest import CleaningReport, ingest, read_points_csv
from .network import read_edge_csv, write_edge_csv
from .population import PopulationIntervalEstimator, PopulationParams
from .simulator import Scenario, analytic_mu, canonical_scenario, load_scenario, simulate_trips
from .trips import RouteQuery, read_trips_csv, write_trips_csv
from .tripspec import EdgeMomentTable, TripSpecificParams, TripSpecificPredictor

logger = logging.getLogger("traveltime")


class UsageError(Exception):
    pass


# argument types ------------------------------------------------------------------

def level_type(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"level must be a number in (0, 1), got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {text!r}")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _existing(args, *flags):
    for flag in flags:
        value = getattr(args, flag.lstrip("-").replace("-", "_"), None)
        if value is not None and not Path(value).is_file():
            raise UsageError(f"{flag}: no such file: {value}")


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# subcommands ----------------------------------------------------------------------

def _scenario(args) -> Scenario:
    if args.scenario:
        return load_scenario(args.scenario)
    return canonical_scenario(seed=args.seed if args.seed is not None else 7)


def cmd_simulate(args):
    _existing(args, "--scenario")
    sc = _scenario(args)
    seed = sc.seed if args.seed is None else args.seed
    trips = simulate_trips(sc.network, sc.spec, sc.mixing, args.trips, seed=seed,
                           lengths=(sc.min_length, sc.max_length), start_window=sc.start_window,
                           first_index=args.first_index, threads=args.threads)
    write_trips_csv(trips, args.out)
    if args.network_out:
        write_edge_csv(sc.network, args.network_out)
    logger.info("wrote %d trips to %s (analytic mu %.6f s/edge)", len(trips), args.out,
                analytic_mu(sc.network, sc.spec))


def cmd_ingest(args):
    _existing(args, "--points", "--network")
    network = read_edge_csv(args.network)
    report = CleaningReport()
    trips = ingest(read_points_csv(args.points), network, report, args.across_rule)
    write_trips_csv(trips, args.out)
    if args.report:
        _json_dump(report.as_dict(), args.report)
    logger.info("ingest: %s", report.as_dict())


def cmd_fit_population(args):
    _existing(args, "--trips")
    est = PopulationIntervalEstimator(unit=args.unit, min_edges=args.min_edges).fit(
        read_trips_csv(args.trips))
    est.params_.to_json(args.out)
    ci = est.confidence_interval(1.0 - args.level)
    logger.info("mu_hat %.4f, %.0f%% CI (%.4f, %.4f)", est.params_.mu_hat, 100 * args.level,
                ci.lower, ci.upper)


def cmd_fit_tripspec(args):
    _existing(args, "--trips")
    est = TripSpecificPredictor(order=args.order, min_count=args.min_count,
                                tz_offset_s=args.tz_offset, stratify=not args.no_stratify,
                                include_imputed=not args.exclude_imputed,
                                fixed_nu_sq=args.fixed_nu_sq)
    est.fit(read_trips_csv(args.trips))
    est.table_.to_csv(args.table_out)
    est.params_.to_json(args.out)
    logger.info("fitted %s", est.params_)


def cmd_fit_baseline(args):
    _existing(args, "--trips")
    trips = read_trips_csv(args.trips)
    if args.kind == "lognormal":
        est = NoDependenceLogNormal(samples=args.samples, min_count=args.min_count,
                                    tz_offset_s=args.tz_offset, random_state=args.seed or 0)
    else:
        est = LogLinearTravelTime(tz_offset_s=args.tz_offset)
    est.fit(trips).to_json(args.out)


def _load_model(args):
    chosen = [f for f in ("population", "tripspec", "baseline") if getattr(args, f)]
    if len(chosen) != 1:
        raise UsageError("give exactly one of --population, --tripspec, --baseline")
    _existing(args, "--population", "--tripspec", "--baseline", "--table", "--network")
    if args.population:
        return PopulationIntervalEstimator.from_params(PopulationParams.from_json(args.population), args.level)
    if args.tripspec:
        if not args.table:
            raise UsageError("--tripspec needs --table")
        table = EdgeMomentTable.from_csv(args.table, args.tz_offset)
        return TripSpecificPredictor.from_parts(table, TripSpecificParams.from_json(args.tripspec), args.level)
    model = load_baseline(args.baseline)
    model.set_params(level=args.level)
    return model


def read_route_csv(path) -> tuple[str, ...]:
    """A route file has an ``edge_id`` column listing the edges in order."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "edge_id" not in (reader.fieldnames or ()):
            raise TravelTimeError(f"{path}: missing column 'edge_id'")
        edges = tuple(row["edge_id"] for row in reader)
    if not edges:
        raise TravelTimeError(f"{path}: empty route")
    return edges


def _predict_batch(model, routes, network=None, threads=1):
    """``(point, lower, upper)`` for many routes; parallel over contiguous blocks."""
    def run(block):
        if isinstance(model, NoDependenceLogNormal):
            return model.predict_interval(block[1], offset=block[0])
        if network is not None and isinstance(model, (PopulationIntervalEstimator, LogLinearTravelTime)):
            return model.predict_interval(block[1], network=network)
        return model.predict_interval(block[1])

    size = max(1, -(-len(routes) // max(threads, 1)))
    blocks = [(i, routes[i:i + size]) for i in range(0, len(routes), size)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return tuple(np.concatenate([p[j] for p in parts]) for j in range(3))


def cmd_predict(args):
    if (args.route is None) == (args.trips is None):
        raise UsageError("give exactly one of --route or --trips")
    if args.route is not None and args.start_time is None:
        raise UsageError("--route needs --start-time")
    _existing(args, "--route", "--trips")
    model = _load_model(args)
    network = read_edge_csv(args.network) if args.network else None
    if args.route is not None:
        route = read_route_csv(args.route)
        if network is not None:
            network.validate_route(route)
        query = RouteQuery(route, float(args.start_time))
        if isinstance(model, TripSpecificPredictor):
            seq = model.predict_sequence(query)
            with _out(args.out) as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("k", "edge_id", "point_s", "lower_s", "upper_s", "sd_s"))
                for k in range(len(seq)):
                    w.writerow((k + 1, seq.edge_ids[k], repr(float(seq.points[k])),
                                repr(float(seq.lowers[k])), repr(float(seq.uppers[k])),
                                repr(float(seq.sds[k]))))
            return
        p, lo, hi = _predict_batch(model, [query], network)
        ids = ["route"]
    else:
        trips = read_trips_csv(args.trips)
        p, lo, hi = _predict_batch(model, trips, network, args.threads)
        ids = [t.trip_id for t in trips]
    if args.out:
        write_intervals_csv(ids, p, lo, hi, args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(("trip_id", "point_s", "lower_s", "upper_s"))
        for row in zip(ids, p, lo, hi):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


class _out:
    """Context manager writing to a path, or to stdout when the path is None."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", newline="", encoding="utf-8") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()


def cmd_evaluate(args):
    _existing(args, "--trips", "--intervals")
    trips = read_trips_csv(args.trips)
    report = length_stratified_report(read_intervals_csv(args.intervals), trips, args.cutpoints)
    report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)


def reproduce_synthetic(out_dir, seed: int = 7, threads: int = 1, n_train: int = 5000,
                        n_test: int = 2000, level: float = 0.95) -> dict:
    """End-to-end synthetic study: simulate, fit every model, score, write all outputs.

    Outputs depend only on ``seed`` and the sizes, never on ``threads``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = canonical_scenario(seed=seed)
    kw = dict(seed=seed, lengths=(sc.min_length, sc.max_length), start_window=sc.start_window,
              threads=threads)
    train = simulate_trips(sc.network, sc.spec, sc.mixing, n_train, prefix="train-", **kw)
    test = simulate_trips(sc.network, sc.spec, sc.mixing, n_test, prefix="test-",
                          first_index=n_train, **kw)
    write_edge_csv(sc.network, out / "network.csv")
    write_trips_csv(train, out / "train_trips.csv")
    write_trips_csv(test, out / "test_trips.csv")

    models = {
        "population": PopulationIntervalEstimator(level=level),
        "tripspec": TripSpecificPredictor(level=level),
        "tripspec_order2": TripSpecificPredictor(level=level, order=2),
        "tripspec_nu1": TripSpecificPredictor(level=level, fixed_nu_sq=1.0),
        "lognormal": NoDependenceLogNormal(level=level, random_state=seed),
        "loglinear": LogLinearTravelTime(level=level),
    }
    summary = {"seed": seed, "n_train": n_train, "n_test": n_test, "level": level,
               "analytic_mu": analytic_mu(sc.network, sc.spec), "models": {}}
    ids = [t.trip_id for t in test]
    for name, est in models.items():
        est.fit(train)
        p, lo, hi = _predict_batch(est, test, threads=threads)
        write_intervals_csv(ids, p, lo, hi, out / f"intervals_{name}.csv")
        report = length_stratified_report(predictions_from_arrays(ids, p, lo, hi), test)
        report.to_json(out / f"metrics_{name}.json")
        report.to_csv(out / f"metrics_{name}.csv")
        summary["models"][name] = {m: getattr(report, m) for m in
                                   ("rmse", "mae", "mean_error", "mape_pct", "coverage_pct",
                                    "mean_interval_length_s", "relative_length_pct")}
        if isinstance(est, TripSpecificPredictor):
            est.params_.to_json(out / f"params_{name}.json")
            summary["models"][name]["params"] = json.loads(est.params_.to_json())
            coverage_by_length(est.predict_sequences(test), test).to_csv(out / f"curve_{name}.csv")
        elif isinstance(est, PopulationIntervalEstimator):
            est.params_.to_json(out / "params_population.json")
            summary["models"][name]["params"] = json.loads(est.params_.to_json())
    models["tripspec"].table_.to_csv(out / "edge_table.csv")
    erg = ergodicity_check(train)
    erg.to_csv(out / "ergodicity.csv")
    summary["ergodicity_mu_hat"] = erg.mu_hat
    _json_dump(summary, out / "summary.json")
    return summary


def cmd_reproduce(args):
    reproduce_synthetic(args.out_dir, args.seed, args.threads, args.train, args.test, args.level)
    logger.info("wrote synthetic study to %s", args.out_dir)


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="traveltime",
                                     description="Travel-time prediction intervals on road networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    parser.subcommands = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        parser.subcommands[name] = p
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value file supplying defaults for any flag")
        return p

    default_threads = os.cpu_count() or 1

    p = add("simulate", cmd_simulate, "simulate trips from a scenario file (canonical scenario if omitted)")
    p.add_argument("--scenario")
    p.add_argument("--trips", type=positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--network-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--first-index", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=default_threads)

    p = add("ingest", cmd_ingest, "clean map-matched GPS points into trips")
    p.add_argument("--points", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--across-rule", choices=("distance", "half-fraction"), default="distance")

    p = add("fit-population", cmd_fit_population, "fit the population interval model")
    p.add_argument("--trips", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unit", choices=("edge", "per-100m"), default="edge")
    p.add_argument("--min-edges", type=positive_int, default=1)
    p.add_argument("--level", type=level_type, default=0.95)

    p = add("fit-tripspec", cmd_fit_tripspec, "fit the trip-specific model")
    p.add_argument("--trips", required=True)
    p.add_argument("--out", required=True, help="params JSON")
    p.add_argument("--table-out", required=True, help="edge moment table CSV")
    p.add_argument("--order", type=int, choices=(1, 2), default=1)
    p.add_argument("--min-count", type=positive_int, default=10)
    p.add_argument("--tz-offset", type=float, default=0.0)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--exclude-imputed", action="store_true")
    p.add_argument("--fixed-nu-sq", type=float)

    p = add("fit-baseline", cmd_fit_baseline, "fit a comparison model")
    p.add_argument("--kind", choices=("lognormal", "loglinear"), required=True)
    p.add_argument("--trips", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=positive_int, default=1000)
    p.add_argument("--min-count", type=positive_int, default=10)
    p.add_argument("--tz-offset", type=float, default=0.0)
    p.add_argument("--seed", type=int)

    p = add("predict", cmd_predict, "predict intervals for a route or a trip file")
    p.add_argument("--population")
    p.add_argument("--tripspec", help="params JSON (with --table)")
    p.add_argument("--table")
    p.add_argument("--baseline")
    p.add_argument("--route")
    p.add_argument("--start-time", type=float)
    p.add_argument("--trips")
    p.add_argument("--network")
    p.add_argument("--out")
    p.add_argument("--level", type=level_type, default=0.95)
    p.add_argument("--tz-offset", type=float, default=0.0)
    p.add_argument("--threads", type=positive_int, default=default_threads)

    p = add("evaluate", cmd_evaluate, "score an interval file against actual trips")
    p.add_argument("--trips", required=True)
    p.add_argument("--intervals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--cutpoints", type=positive_int, nargs="+", default=[40, 80, 120])

    p = add("reproduce-synthetic", cmd_reproduce, "run the full synthetic study")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", default="synthetic_out")
    p.add_argument("--train", type=positive_int, default=5000)
    p.add_argument("--test", type=positive_int, default=2000)
    p.add_argument("--level", type=level_type, default=0.95)
    p.add_argument("--threads", type=positive_int, default=default_threads)
    return parser


def _config_defaults(path) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[run]\n" + Path(path).read_text(encoding="utf-8"), source=str(path))
    out = {}
    for k, v in cp["run"].items():
        k = k.replace("-", "_")
        if v.lower() in ("true", "false"):
            out[k] = v.lower() == "true"
        elif k == "cutpoints":
            out[k] = [int(x) for x in v.split()]
        else:
            out[k] = v
    return out


def _apply_config(parser, argv) -> None:
    """Install ``--config`` values as subcommand defaults ahead of the real parse.

    Options the file supplies stop being required; explicit flags still win.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("-v", "--verbose", action="store_true")
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = parser.subcommands.get(known.command)
    if known.config is None or sub is None:
        return
    if not Path(known.config).is_file():
        raise UsageError(f"--config: no such file: {known.config}")
    values = _config_defaults(known.config)
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"--config: unknown keys for {known.command}: {', '.join(unknown)}")
    for key in values:
        actions[key].required = False
    sub.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"traveltime: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"traveltime {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TravelTimeError, ValueError, KeyError, OSError) as exc:
        print(f"traveltime {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
