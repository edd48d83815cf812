"""Directed road networks represented on the edge graph.

Nodes of the edge graph are road segments; an arc ``e -> e'`` means a vehicle
leaving ``e`` may enter ``e'`` next.  Every statistic downstream is indexed by
edge, so there is no node-level geometry here at all.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    DanglingSuccessor,
    Disconnected,
    DuplicateEdge,
    InvalidRoute,
    NoSuccessor,
    NonConvergent,
    NonPositiveLength,
)

POWER_ITER_CAP = 100_000
POWER_ITER_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TransportNetwork:
    """Immutable edge graph.

    Attributes
    ----------
    edge_ids : tuple of str
        Edge identifiers in construction order; position is the internal index.
    lengths : ndarray
        Edge lengths in meters, indexed like ``edge_ids`` (read-only).
    successors : tuple of tuple of int
        Successor indices per edge, in the order given at construction.
    """

    edge_ids: tuple[str, ...]
    lengths: np.ndarray
    successors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        self.lengths.setflags(write=False)
        object.__setattr__(self, "_index", {e: i for i, e in enumerate(self.edge_ids)})

    def __len__(self) -> int:
        return len(self.edge_ids)

    def __contains__(self, edge_id) -> bool:
        return edge_id in self._index

    def index(self, edge_id: str) -> int:
        try:
            return self._index[edge_id]
        except KeyError:
            raise KeyError(f"unknown edge {edge_id!r}") from None

    def length(self, edge_id: str) -> float:
        return float(self.lengths[self.index(edge_id)])

    def successor_ids(self, edge_id: str) -> tuple[str, ...]:
        return tuple(self.edge_ids[j] for j in self.successors[self.index(edge_id)])

    def is_adjacent(self, a: str, b: str) -> bool:
        return self.index(b) in self.successors[self.index(a)]

    @property
    def out_degree(self) -> np.ndarray:
        return np.array([len(s) for s in self.successors], dtype=np.int64)

    def successor_table(self) -> np.ndarray:
        """Dense ``(E, max_degree)`` successor matrix padded with -1."""
        width = max(1, int(self.out_degree.max()))
        table = np.full((len(self), width), -1, dtype=np.int64)
        for i, succ in enumerate(self.successors):
            table[i, : len(succ)] = succ
        return table

    def transition_matrix(self) -> np.ndarray:
        """Row-stochastic matrix of the uniform-successor walk."""
        n = len(self)
        P = np.zeros((n, n))
        for i, succ in enumerate(self.successors):
            for j in succ:
                P[i, j] += 1.0 / len(succ)
        return P

    def validate_route(self, route: Sequence[str]) -> None:
        if len(route) == 0:
            raise InvalidRoute("route must contain at least one edge")
        for e in route:
            if e not in self:
                raise InvalidRoute(f"edge {e!r} is not in the network")
        for a, b in zip(route[:-1], route[1:]):
            if not self.is_adjacent(a, b):
                raise InvalidRoute(f"{b!r} does not follow {a!r} in the network")

    def route_length_m(self, route: Sequence[str]) -> float:
        return float(sum(self.lengths[self.index(e)] for e in route))


def _reachable(successors, start: int) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in successors[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


def build_network(edge_records: Iterable[Mapping]) -> TransportNetwork:
    """Validate edge records and build a :class:`TransportNetwork`.

    Each record needs ``edge_id``, ``length_m`` and ``successor_ids``.  The
    edge graph must be strongly connected.
    """
    records = list(edge_records)
    ids: list[str] = []
    lengths: list[float] = []
    seen: set[str] = set()
    for rec in records:
        eid = str(rec["edge_id"])
        if eid in seen:
            raise DuplicateEdge(f"edge {eid!r} appears more than once")
        seen.add(eid)
        length = float(rec["length_m"])
        if not length > 0 or not np.isfinite(length):
            raise NonPositiveLength(f"edge {eid!r} has non-positive length {length!r}")
        ids.append(eid)
        lengths.append(length)
    index = {e: i for i, e in enumerate(ids)}
    successors = []
    for rec in records:
        succ = []
        for s in rec["successor_ids"]:
            s = str(s)
            if s not in index:
                raise DanglingSuccessor(f"edge {rec['edge_id']!r} lists unknown successor {s!r}")
            succ.append(index[s])
        successors.append(tuple(succ))
    if not ids:
        raise Disconnected("network has no edges")

    # strongly connected <=> everything reachable from 0 in G and in reversed G
    reverse: list[list[int]] = [[] for _ in ids]
    for i, succ in enumerate(successors):
        for j in succ:
            reverse[j].append(i)
    if len(_reachable(successors, 0)) != len(ids) or len(_reachable(reverse, 0)) != len(ids):
        raise Disconnected("edge graph is not strongly connected")

    return TransportNetwork(tuple(ids), np.asarray(lengths, dtype=float), tuple(successors))


def random_walk(network: TransportNetwork, start: str, n: int, rng_seed) -> list[str]:
    """Route of ``n`` edges starting at ``start``, each step uniform over successors.

    The step rule is ``successors[floor(u * degree)]`` with ``u`` drawn from
    ``numpy.random.default_rng(rng_seed).random(n - 1)``; the batch simulator
    uses the same rule so that both paths agree on a shared stream.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    i = network.index(start)
    u = np.random.default_rng(rng_seed).random(n - 1)
    return [network.edge_ids[j] for j in walk_indices(network, i, u)]


def walk_indices(network: TransportNetwork, start: int, uniforms: np.ndarray) -> np.ndarray:
    out = np.empty(len(uniforms) + 1, dtype=np.int64)
    out[0] = start
    succ = network.successors
    cur = start
    for k, u in enumerate(uniforms, start=1):
        choices = succ[cur]
        if not choices:
            raise NoSuccessor(f"edge {network.edge_ids[cur]!r} has no successor")
        cur = choices[int(u * len(choices))]
        out[k] = cur
    return out


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    edge_ids: tuple[str, ...]
    pi: np.ndarray

    def __getitem__(self, edge_id: str) -> float:
        return float(self.pi[self.edge_ids.index(edge_id)])


def stationary_distribution(network: TransportNetwork) -> StationaryDistribution:
    """Stationary law of the uniform-successor walk by lazy power iteration.

    Iterating ``(P + I) / 2`` keeps the fixed point of ``P`` while removing
    periodicity, so a plain directed cycle converges too.
    """
    P = network.transition_matrix()
    lazy = 0.5 * (P + np.eye(len(network)))
    pi = np.full(len(network), 1.0 / len(network))
    for _ in range(POWER_ITER_CAP):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < POWER_ITER_TOL:
            pi = nxt
            break
        pi = nxt
    else:
        raise NonConvergent(f"power iteration did not converge in {POWER_ITER_CAP} steps")
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    pi.setflags(write=False)
    return StationaryDistribution(network.edge_ids, pi)


def read_edge_csv(path) -> TransportNetwork:
    """Read ``edge_id,length_m,successors`` (``|``-separated successor ids)."""
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"edge_id", "length_m", "successors"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            succ = [s for s in (row["successors"] or "").split("|") if s]
            try:
                length = float(row["length_m"])
            except ValueError:
                raise ValueError(f"{path}:{reader.line_num}: bad length_m {row['length_m']!r}") from None
            records.append({"edge_id": row["edge_id"], "length_m": length, "successor_ids": succ})
    return build_network(records)


def write_edge_csv(network: TransportNetwork, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["edge_id", "length_m", "successors"])
        for i, eid in enumerate(network.edge_ids):
            w.writerow([eid, repr(float(network.lengths[i])), "|".join(network.successor_ids(eid))])
