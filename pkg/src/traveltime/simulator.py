"""Synthetic trips from a cyclostationary speed process.

Reciprocal speed on edge ``e`` entered at time ``t`` is::

    S_e(t) = clip(a_e + b_e * sin(2*pi*t/P + phase_e) + s_e * X, lower_e, upper_e)

where ``X`` is the standard-normal score of a Gaussian-copula AR(1) sequence
(``U = Phi(X)`` is marginally uniform and geometrically alpha-mixing).  Edge
entry times follow the rotation map ``tau_next = tau + d_e * S_e(tau)``.

Every trip owns its own random stream, seeded by ``(master_seed, trip_index)``,
so batches can be generated in any chunking or thread layout and still give
bit-identical output.
"""

from __future__ import annotations

import configparser
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import InvalidSpec
from .network import TransportNetwork, build_network, read_edge_csv, stationary_distribution
from .stats import jackknife_sd, normal_cdf, normal_quantile
from .trips import Trip

WEEK_S = 604_800.0
CHUNK = 2048


@dataclass(frozen=True, eq=False)
class SpeedProcessSpec:
    """Per-edge parameters of the speed process, in seconds per meter.

    Arrays are aligned with ``network.edge_ids``.  Use :meth:`from_params` to
    build one from global values with per-edge overrides.
    """

    a: np.ndarray
    b: np.ndarray
    phase: np.ndarray
    s: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    period: float = WEEK_S

    def __post_init__(self):
        arrays = {}
        for name in ("a", "b", "phase", "s", "lower", "upper"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        sizes = {v.shape for v in arrays.values()}
        if len(sizes) != 1 or arrays["a"].ndim != 1:
            raise InvalidSpec("all per-edge arrays must be one-dimensional and equally long")
        a, b, s, lo, hi = (arrays[k] for k in ("a", "b", "s", "lower", "upper"))
        if not self.period > 0:
            raise InvalidSpec("period must be positive")
        if np.any(lo <= 0):
            raise InvalidSpec("lower bounds must be strictly positive")
        if np.any(lo > a - np.abs(b)) or np.any(a + np.abs(b) > hi):
            raise InvalidSpec("mean path a +/- |b| must stay inside [lower, upper]")
        if np.any(s < 0):
            raise InvalidSpec("noise sd must be non-negative")
        # four noise sds of headroom keeps the clipping bias negligible
        room = np.minimum(a - np.abs(b) - lo, hi - a - np.abs(b))
        if np.any(s > room / 4.0 + 1e-15):
            raise InvalidSpec("noise sd exceeds a quarter of the headroom to the bounds")

    @classmethod
    def from_params(cls, network: TransportNetwork, *, a, b=0.0, phase=0.0, s=0.0,
                    lower=None, upper=None, period=WEEK_S, per_edge: Mapping | None = None):
        """Broadcast global values to every edge, then apply ``per_edge`` overrides.

        ``per_edge`` maps parameter name to ``{edge_id: value}``.  Default
        bounds are ``a/5`` and ``2a`` (per edge, after overrides of ``a``).
        """
        E = len(network)
        vals = {k: np.full(E, float(v)) for k, v in dict(a=a, b=b, phase=phase, s=s).items()}
        for name, overrides in (per_edge or {}).items():
            if name in ("lower", "upper"):
                continue
            for eid, v in overrides.items():
                vals[name][network.index(eid)] = float(v)
        for name, default in (("lower", 0.2), ("upper", 2.0)):
            glob = lower if name == "lower" else upper
            arr = vals["a"] * default if glob is None else np.full(E, float(glob))
            for eid, v in (per_edge or {}).get(name, {}).items():
                arr[network.index(eid)] = float(v)
            vals[name] = arr
        return cls(period=float(period), **vals)

    def mean(self, e: int, t):
        return self.a[e] + self.b[e] * np.sin(2.0 * np.pi * np.asarray(t) / self.period + self.phase[e])


@dataclass(frozen=True)
class MixingSpec:
    """Lag-one autocorrelation of the latent Gaussian AR(1) driver."""

    phi: float = 0.0
    order: int = 1

    def __post_init__(self):
        if not -1.0 < self.phi < 1.0:
            raise InvalidSpec(f"|phi| must be < 1, got {self.phi}")
        if self.order != 1:
            raise InvalidSpec("only order-1 generation is supported")


def _ar1(z: np.ndarray, phi: float) -> np.ndarray:
    """Stationary AR(1) along axis 0 from standard normal innovations."""
    x = np.empty_like(z)
    x[0] = z[0]
    c = math.sqrt(1.0 - phi * phi)
    for k in range(1, z.shape[0]):
        x[k] = phi * x[k - 1] + c * z[k]
    return x


def mixing_uniform_sequence(n: int, spec: MixingSpec, rng_seed) -> np.ndarray:
    """``n`` marginally Uniform[0, 1] values from a Gaussian-copula AR(1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.random.default_rng(rng_seed).standard_normal(n)
    return normal_cdf(_ar1(z, spec.phi))


def sample_speed(spec: SpeedProcessSpec, e: int, t: float, u: float) -> float:
    """Reciprocal speed (s/m) on edge index ``e`` at time ``t`` for uniform score ``u``."""
    x = normal_quantile(u)
    raw = spec.mean(e, t) + spec.s[e] * x if spec.s[e] > 0 else spec.mean(e, t)
    return float(np.clip(raw, spec.lower[e], spec.upper[e]))


def _rotate(network, spec, mixing, routes, lengths, t0s, z):
    """Run the rotation map for a padded batch.

    ``routes`` and ``z`` are ``(nmax, m)``; columns past a trip's length are
    ignored.  Returns padded travel times, entry times and latent scores.
    """
    nmax, m = routes.shape
    d = network.lengths
    x = _ar1(z, mixing.phi)
    t0s = np.asarray(t0s, dtype=float)
    # the phase clock is reduced mod P so t0 and t0 + P give identical speeds
    clock = np.fmod(t0s, spec.period)
    entry = t0s.copy()
    tt = np.zeros((nmax, m))
    entries = np.zeros((nmax, m))
    w = 2.0 * np.pi / spec.period
    for k in range(nmax):
        e = routes[k]
        live = k < lengths
        mean = spec.a[e] + spec.b[e] * np.sin(w * clock + spec.phase[e])
        speed = np.clip(mean + spec.s[e] * x[k], spec.lower[e], spec.upper[e])
        step = np.where(live, d[e] * speed, 0.0)
        entries[k] = entry
        tt[k] = step
        clock = clock + step
        entry = entry + step
    return tt, entries, x


def _pack(network, trip_ids, routes, lengths, tt, entries):
    out = []
    d = network.lengths
    for j, tid in enumerate(trip_ids):
        n = int(lengths[j])
        idx = routes[:n, j]
        out.append(Trip(tid, tuple(network.edge_ids[i] for i in idx), entries[:n, j],
                        tt[:n, j], d[idx]))
    return out


def simulate_trip(network: TransportNetwork, route: Sequence[str], t0: float,
                  spec: SpeedProcessSpec, mixing: MixingSpec, rng_seed,
                  trip_id: str = "0") -> Trip:
    """Simulate one traversal of a fixed route entered at ``t0``."""
    network.validate_route(route)
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    idx = np.array([network.index(e) for e in route], dtype=np.int64)[:, None]
    z = np.random.default_rng(rng_seed).standard_normal(idx.shape)
    tt, entries, _ = _rotate(network, spec, mixing, idx, np.array([len(route)]), [t0], z)
    return _pack(network, [trip_id], idx, np.array([len(route)]), tt, entries)[0]


def analytic_mu(network: TransportNetwork, spec: SpeedProcessSpec) -> float:
    """Invariant mean edge travel time ``sum_e pi_e d_e a_e`` (seconds per edge)."""
    pi = stationary_distribution(network).pi
    return float(np.sum(pi * network.lengths * spec.a))


@dataclass(frozen=True, eq=False)
class Scenario:
    """Everything needed to generate a synthetic trip corpus."""

    network: TransportNetwork
    spec: SpeedProcessSpec
    mixing: MixingSpec = field(default_factory=MixingSpec)
    seed: int = 0
    min_length: int = 20
    max_length: int = 200
    start_window: float = WEEK_S
    tz_offset_s: float = 0.0

    def mu(self) -> float:
        return analytic_mu(self.network, self.spec)


def _chunk(network, spec, mixing, seed, indices, lengths_rule, start_rule, cdf, table, deg,
           prefix, return_latent):
    m = len(indices)
    lengths = np.empty(m, dtype=np.int64)
    t0s = np.empty(m)
    starts = np.empty(m, dtype=np.int64)
    streams = []
    for j, i in enumerate(indices):
        rng = np.random.default_rng([seed, int(i)])
        lo, hi = lengths_rule
        lengths[j] = lo if lo == hi else rng.integers(lo, hi + 1)
        t0s[j] = start_rule(rng, j)
        starts[j] = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)
        streams.append((rng.random(lengths[j] - 1), rng.standard_normal(lengths[j])))
    nmax = int(lengths.max())
    walk_u = np.zeros((max(nmax - 1, 1), m))
    z = np.zeros((nmax, m))
    for j, (u, zz) in enumerate(streams):
        walk_u[: u.size, j] = u
        z[: zz.size, j] = zz
    routes = np.empty((nmax, m), dtype=np.int64)
    routes[0] = starts
    for k in range(1, nmax):
        cur = routes[k - 1]
        pick = (walk_u[k - 1] * deg[cur]).astype(np.int64)
        routes[k] = table[cur, pick]
    tt, entries, x = _rotate(network, spec, mixing, routes, lengths, t0s, z)
    trips = _pack(network, [f"{prefix}{i}" for i in indices], routes, lengths, tt, entries)
    latent = [x[: lengths[j], j].copy() for j in range(m)] if return_latent else None
    return trips, latent


def simulate_trips(network: TransportNetwork, spec: SpeedProcessSpec, mixing: MixingSpec,
                   n_trips: int, *, seed: int = 0, lengths=(20, 200), start_window: float = WEEK_S,
                   start_time: float | None = None, first_index: int = 0, prefix: str = "",
                   threads: int = 1, return_latent: bool = False):
    """Random-walk trips with stationary start edges.

    Trip ``i`` draws, from its own stream seeded with ``[seed, i]``: its
    length (uniform on ``lengths`` inclusive, or fixed if an int), its start
    time (uniform on ``[0, start_window)`` unless ``start_time`` is fixed),
    the start edge (from the stationary law), walk uniforms and innovations.

    Returns a list of :class:`Trip`, plus the latent normal scores per trip
    when ``return_latent`` is set.
    """
    if isinstance(lengths, (int, np.integer)):
        lengths = (int(lengths), int(lengths))
    lo, hi = int(lengths[0]), int(lengths[1])
    if lo < 1 or hi < lo:
        raise ValueError("bad length range")
    cdf = np.cumsum(stationary_distribution(network).pi)
    table = network.successor_table()
    deg = network.out_degree

    if start_time is None:
        def start_rule(rng, _):
            return start_window * rng.random()
    else:
        def start_rule(rng, _):
            rng.random()  # keep the stream layout independent of the start rule
            return float(start_time)

    indices = np.arange(first_index, first_index + n_trips)
    chunks = [indices[i:i + CHUNK] for i in range(0, n_trips, CHUNK)]

    def run(ix):
        return _chunk(network, spec, mixing, seed, ix, (lo, hi), start_rule, cdf, table, deg,
                      prefix, return_latent)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    trips = [t for r in results for t in r[0]]
    if return_latent:
        return trips, [x for r in results for x in r[1]]
    return trips


def estimate_sigma_oracle(network: TransportNetwork, spec: SpeedProcessSpec, mixing: MixingSpec,
                          n: int, replicates: int, rng_seed: int = 0) -> tuple[float, float]:
    """Brute-force sigma: sd of ``(T - n*mu)/sqrt(n)`` over random-walk replicates.

    Start times are uniform over one period.  Returns ``(sigma, jackknife_se)``.
    """
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    mu = analytic_mu(network, spec)
    trips = simulate_trips(network, spec, mixing, replicates, seed=rng_seed, lengths=n,
                           start_window=spec.period)
    x = np.array([(t.total_time - n * mu) / math.sqrt(n) for t in trips])
    return jackknife_sd(x)


# scenario config -------------------------------------------------------------

_SPEC_KEYS = ("a", "b", "phase", "s", "lower", "upper")


def load_scenario(path) -> Scenario:
    """Read a ``key = value`` scenario file.

    Recognised keys: ``network`` (edge CSV, relative to the config file),
    ``period``, ``a``, ``b``, ``phase``, ``s``, ``lower``, ``upper`` (global
    values; ``a.<edge_id> = ...`` overrides one edge), ``mixing_phi``,
    ``seed``, ``min_length``, ``max_length``, ``start_window``, ``tz_offset``.
    Lines starting with ``#`` are comments.
    """
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    parser.read_string("[scenario]\n" + path.read_text(encoding="utf-8"), source=str(path))
    cfg = dict(parser["scenario"])
    if "network" not in cfg:
        raise InvalidSpec(f"{path}: 'network' key is required")
    network = read_edge_csv(path.parent / cfg["network"])
    glob = {}
    per_edge: dict[str, dict[str, float]] = {}
    for key, value in cfg.items():
        name, _, edge = key.partition(".")
        if name in _SPEC_KEYS:
            if edge:
                if edge not in network:
                    raise InvalidSpec(f"{path}: override for unknown edge {edge!r}")
                per_edge.setdefault(name, {})[edge] = float(value)
            else:
                glob[name] = float(value)
    if "a" not in glob and len(per_edge.get("a", {})) != len(network):
        raise InvalidSpec(f"{path}: 'a' must be given globally or for every edge")
    spec = SpeedProcessSpec.from_params(
        network, a=glob.get("a", 1.0), b=glob.get("b", 0.0), phase=glob.get("phase", 0.0),
        s=glob.get("s", 0.0), lower=glob.get("lower"), upper=glob.get("upper"),
        period=float(cfg.get("period", WEEK_S)), per_edge=per_edge)
    return Scenario(
        network=network, spec=spec, mixing=MixingSpec(float(cfg.get("mixing_phi", 0.0))),
        seed=int(cfg.get("seed", 0)), min_length=int(cfg.get("min_length", 20)),
        max_length=int(cfg.get("max_length", 200)),
        start_window=float(cfg.get("start_window", WEEK_S)),
        tz_offset_s=float(cfg.get("tz_offset", 0.0)))


# the canonical six-edge world used by the acceptance suite and `reproduce-synthetic`
CANONICAL_EDGES = (
    # edge_id, length_m, base reciprocal speed a (s/m), successors
    ("e1", 120.0, 0.09, ("e2", "e3")),
    ("e2", 300.0, 0.05, ("e4",)),
    ("e3", 80.0, 0.20, ("e4", "e5")),
    ("e4", 200.0, 0.12, ("e6", "e1")),
    ("e5", 150.0, 0.06, ("e6",)),
    ("e6", 250.0, 0.15, ("e1", "e3")),
)
CANONICAL_PHASES = (0.0, 1.3, 2.9, 4.1, 0.7, 5.2)


def canonical_scenario(seed: int = 7, phi: float = 0.3, period: float = 600.0,
                       amplitude: float = 0.08, noise: float = 0.15) -> Scenario:
    """Six-edge network with heterogeneous speeds and a short speed cycle.

    ``amplitude`` and ``noise`` are fractions of each edge's base level ``a``.
    The short default period lets a single trip sweep many cycles, which is
    the regime where trip averages forget their start time.
    """
    network = build_network(
        {"edge_id": e, "length_m": d, "successor_ids": succ} for e, d, _, succ in CANONICAL_EDGES)
    a = np.array([row[2] for row in CANONICAL_EDGES])
    spec = SpeedProcessSpec(a=a, b=amplitude * a, phase=np.array(CANONICAL_PHASES),
                            s=noise * a, lower=0.2 * a, upper=2.0 * a, period=period)
    return Scenario(network=network, spec=spec, mixing=MixingSpec(phi), seed=seed)
