"""Transfer (multi-driver) ride matching over an encrypted trip graph.

Every driver submits, per route cell, two encrypted indexes of the same
plaintext cell vector: a column-form index (matched against riders and
against other drivers' row-form indexes) and a row-form index. A cell
vector is [id bits | complemented id bits | one-hot time interval], so two
vectors agree on id_bits+1 positions exactly when they are the same cell in
the same interval, and on at most id_bits positions otherwise; the
threshold id_bits+1 therefore has no false positives.

The server keeps a graph whose nodes are the drivers' (offer, position)
cells, with directed route edges along each route and undirected transfer
edges between co-located, co-temporal cells of different offers. A rider's
request pins source nodes (cells matching the pick-up index) and
destination nodes (matching the drop-off index); path search honors the
rider's preference over traversed cells and transfers.

Preference passes run a multi-source Dijkstra that records every
equal-cost predecessor, then enumerate all minimal simple paths. The
primary metric is weighted 1 and the other 0 in the set-defining pass, so
the candidate set contains every path minimizing the primary count; the
secondary metric is applied as a tie-break at selection time. The
documented epsilon weighting (assign_weights) is equivalent for selection
and is kept for analysis: its minimal-weight set is exactly the
lexicographic (primary, secondary) minimum.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field

import numpy as np

from . import crypto
from .crypto import EncryptedIndex, TosSecrets, UserKeySet

INTEGER_TOL = 0.5
DEFAULT_PATH_LIMIT = 10_000

NodeId = tuple[str, int]


def encode_cell(identifier: int, interval: int, id_bits: int, time_bits: int) -> np.ndarray:
    """Plaintext cell vector: id bits (MSB first), complement, interval one-hot."""
    if not (0 <= identifier < (1 << id_bits)):
        raise ValueError(f"identifier {identifier} out of range for {id_bits} bits")
    if not (0 <= interval < time_bits):
        raise ValueError(f"interval {interval} out of range for {time_bits} bits")
    vec = np.zeros(2 * id_bits + time_bits, dtype=np.float64)
    for i in range(id_bits):
        bit = (identifier >> (id_bits - 1 - i)) & 1
        vec[i] = bit
        vec[id_bits + i] = 1 - bit
    vec[2 * id_bits + interval] = 1.0
    return vec


class PreferenceKind(enum.Enum):
    MIN_CELLS = "min-cells"
    MIN_TRANSFERS = "min-transfers"
    MAX_CELLS = "max-cells"
    MAX_TRANSFERS = "max-transfers"
    MIN_CELLS_TRANSFERS = "min-cells-transfers"
    MIN_TRANSFERS_MAX_CELLS = "min-transfers-max-cells"
    MIN_CELLS_MAX_TRANSFERS = "min-cells-max-transfers"
    MAX_CELLS_TRANSFERS = "max-cells-transfers"


_NEEDS_CELL_LIMIT = {
    PreferenceKind.MAX_CELLS,
    PreferenceKind.MIN_TRANSFERS_MAX_CELLS,
    PreferenceKind.MAX_CELLS_TRANSFERS,
}
_NEEDS_TRANSFER_LIMIT = {
    PreferenceKind.MAX_TRANSFERS,
    PreferenceKind.MIN_CELLS_MAX_TRANSFERS,
    PreferenceKind.MAX_CELLS_TRANSFERS,
}


@dataclass(frozen=True)
class Preference:
    kind: PreferenceKind
    cells_limit: int | None = None
    transfers_limit: int | None = None

    def __post_init__(self) -> None:
        if (self.kind in _NEEDS_CELL_LIMIT) != (self.cells_limit is not None):
            raise ValueError(f"{self.kind.value}: cells_limit mismatch")
        if (self.kind in _NEEDS_TRANSFER_LIMIT) != (self.transfers_limit is not None):
            raise ValueError(f"{self.kind.value}: transfers_limit mismatch")
        for limit in (self.cells_limit, self.transfers_limit):
            if limit is not None and limit < 0:
                raise ValueError(f"limits must be >= 0, got {limit}")

    @classmethod
    def parse(cls, text: str) -> "Preference":
        """Parse e.g. 'min-cells', 'max-transfers:1', 'max-cells-transfers:12,2'."""
        name, _, arg = text.strip().partition(":")
        kind = PreferenceKind(name)
        cells = transfers = None
        if kind is PreferenceKind.MAX_CELLS_TRANSFERS:
            first, second = arg.split(",")
            cells, transfers = int(first), int(second)
        elif kind in _NEEDS_CELL_LIMIT:
            cells = int(arg)
        elif kind in _NEEDS_TRANSFER_LIMIT:
            transfers = int(arg)
        elif arg:
            raise ValueError(f"{name} takes no limit, got {arg!r}")
        return cls(kind, cells, transfers)

    def render(self) -> str:
        if self.kind is PreferenceKind.MAX_CELLS_TRANSFERS:
            return f"{self.kind.value}:{self.cells_limit},{self.transfers_limit}"
        if self.kind in _NEEDS_CELL_LIMIT:
            return f"{self.kind.value}:{self.cells_limit}"
        if self.kind in _NEEDS_TRANSFER_LIMIT:
            return f"{self.kind.value}:{self.transfers_limit}"
        return self.kind.value


DEFAULT_PREFERENCE = Preference(PreferenceKind.MIN_CELLS)


@dataclass
class TransferCellCipher:
    """One route cell as submitted by a driver: both index forms."""

    plus: EncryptedIndex   # column form, matched against queries
    minus: EncryptedIndex  # row form, matched against other offers' plus


@dataclass
class TransferOffer:
    offer_id: str
    capacity: int
    cells: list[TransferCellCipher]
    contact: bytes = b""


@dataclass
class TransferRequest:
    request_id: str
    pickup: EncryptedIndex
    dropoff: EncryptedIndex
    preference: Preference = DEFAULT_PREFERENCE
    contact: bytes = b""


def build_transfer_offer(
    offer_id: str,
    cells: list[tuple[int, int]],
    plus_keys: UserKeySet,
    minus_keys: UserKeySet,
    id_bits: int,
    time_bits: int,
    capacity: int,
    rng: np.random.Generator,
    contact: bytes = b"",
) -> TransferOffer:
    """Encrypt a driver's route: one (identifier, interval) pair per cell."""
    if len(cells) < 2:
        raise ValueError(f"a transfer offer needs >= 2 route cells, got {len(cells)}")
    if capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    if plus_keys.role != "driver" or minus_keys.role != "rider":
        raise ValueError("offer needs driver-role plus keys and rider-role minus keys")
    vectors = np.stack([encode_cell(c, t, id_bits, time_bits) for c, t in cells])
    plus = crypto.encrypt_indices(vectors, plus_keys, rng)
    minus = crypto.encrypt_indices(vectors, minus_keys, rng)
    pairs = [TransferCellCipher(p, m) for p, m in zip(plus, minus)]
    return TransferOffer(offer_id, capacity, pairs, contact)


def build_transfer_request(
    request_id: str,
    pickup: tuple[int, int],
    dropoff: tuple[int, int],
    keys: UserKeySet,
    id_bits: int,
    time_bits: int,
    preference: Preference = DEFAULT_PREFERENCE,
    rng: np.random.Generator | None = None,
    contact: bytes = b"",
) -> TransferRequest:
    if keys.role != "rider":
        raise ValueError("requests must be encrypted with rider keys")
    rng = rng if rng is not None else np.random.default_rng()
    vectors = np.stack(
        [
            encode_cell(pickup[0], pickup[1], id_bits, time_bits),
            encode_cell(dropoff[0], dropoff[1], id_bits, time_bits),
        ]
    )
    enc = crypto.encrypt_indices(vectors, keys, rng)
    return TransferRequest(request_id, enc[0], enc[1], preference, contact)


@dataclass
class TransferNode:
    offer_id: str
    position: int
    plus: EncryptedIndex
    minus: EncryptedIndex
    plus_blob: bytes = b""  # submitted ciphertext, relayed verbatim in notifications

    @property
    def node_id(self) -> NodeId:
        return (self.offer_id, self.position)


@dataclass
class PathResult:
    nodes: tuple[NodeId, ...]
    cell_count: int      # route edges + 1: physical cells traversed
    transfer_count: int


@dataclass
class SearchOutcome:
    selected: PathResult | None
    candidates: list[PathResult]
    sources: list[NodeId]
    destinations: list[NodeId]
    truncated: bool = False


class TransferGraph:
    """Server-side graph of unmasked offer cells."""

    def __init__(self, id_bits: int):
        self.id_bits = id_bits
        self.nodes: dict[NodeId, TransferNode] = {}
        self.route_succ: dict[NodeId, NodeId] = {}
        self.transfer_adj: dict[NodeId, set[NodeId]] = {}
        self.capacity: dict[str, int] = {}
        self.exhausted: set[str] = set()

    @property
    def match_target(self) -> int:
        return self.id_bits + 1

    def active_nodes(self) -> list[TransferNode]:
        return [n for n in self.nodes.values() if n.offer_id not in self.exhausted]

    def edge_count(self) -> int:
        transfers = sum(len(v) for v in self.transfer_adj.values()) // 2
        return len(self.route_succ) + transfers

    def neighbors(self, node: NodeId):
        succ = self.route_succ.get(node)
        if succ is not None:
            yield succ, "route"
        for other in self.transfer_adj.get(node, ()):
            yield other, "transfer"

    def edge_kind(self, u: NodeId, v: NodeId) -> str:
        if self.route_succ.get(u) == v:
            return "route"
        if v in self.transfer_adj.get(u, ()):
            return "transfer"
        raise KeyError(f"no edge {u} -> {v}")

    def add_offer(self, offer: TransferOffer, secrets: TosSecrets) -> int:
        """Unmask and insert one offer; returns the number of transfer edges added.

        Incremental by construction: only the new cells are compared
        against the existing active nodes.
        """
        if offer.offer_id in self.capacity:
            raise ValueError(f"offer id {offer.offer_id!r} already in graph")
        plus_blobs = [c.plus.to_bytes() for c in offer.cells]
        plus = crypto.unmask_indices([c.plus for c in offer.cells], secrets)
        minus = crypto.unmask_indices([c.minus for c in offer.cells], secrets)
        new_nodes = [
            TransferNode(offer.offer_id, pos, plus[pos], minus[pos], plus_blobs[pos])
            for pos in range(len(offer.cells))
        ]
        existing = self.active_nodes()
        added = 0
        if existing:
            # One batched kernel call: new row-form against existing column-form.
            sims = crypto.similarity_matrix(
                [n.minus for n in new_nodes], [n.plus for n in existing]
            )
            hits = np.abs(sims - self.match_target) < INTEGER_TOL
            for i, j in zip(*np.nonzero(hits)):
                u = new_nodes[int(i)].node_id
                v = existing[int(j)].node_id
                self.transfer_adj.setdefault(u, set()).add(v)
                self.transfer_adj.setdefault(v, set()).add(u)
                added += 1
        for node in new_nodes:
            self.nodes[node.node_id] = node
        for pos in range(len(offer.cells) - 1):
            self.route_succ[(offer.offer_id, pos)] = (offer.offer_id, pos + 1)
        self.capacity[offer.offer_id] = offer.capacity
        return added

    def remove_offer_edges(self, offer_id: str) -> None:
        """Drop every edge incident to an exhausted offer; nodes remain."""
        self.exhausted.add(offer_id)
        for node_id in [nid for nid in self.nodes if nid[0] == offer_id]:
            self.route_succ.pop(node_id, None)
            for other in self.transfer_adj.pop(node_id, set()):
                self.transfer_adj[other].discard(node_id)


def build_graph(offers: list[TransferOffer], secrets: TosSecrets, id_bits: int) -> TransferGraph:
    graph = TransferGraph(id_bits)
    for offer in offers:
        graph.add_offer(offer, secrets)
    return graph


def epsilon_for(graph: TransferGraph) -> float:
    """Secondary-metric weight small enough never to reorder primary counts."""
    return 1.0 / (4.0 * (graph.edge_count() + 1))


_PRIMARY_OF = {
    PreferenceKind.MIN_CELLS: ("cells",),
    PreferenceKind.MAX_CELLS: ("cells",),
    PreferenceKind.MIN_CELLS_MAX_TRANSFERS: ("cells",),
    PreferenceKind.MAX_CELLS_TRANSFERS: ("cells",),
    PreferenceKind.MIN_TRANSFERS: ("transfers",),
    PreferenceKind.MAX_TRANSFERS: ("transfers",),
    PreferenceKind.MIN_TRANSFERS_MAX_CELLS: ("transfers",),
    PreferenceKind.MIN_CELLS_TRANSFERS: ("cells", "transfers"),
}


def assign_weights(graph: TransferGraph, preference: Preference) -> list[dict[str, float]]:
    """Edge weightings for each pass of a preference, epsilon on the secondary.

    Returns one {'route': w, 'transfer': w} map per pass. With
    eps < 1/(2 * edge_count) the minimal-weight paths under such a map are
    exactly the paths minimizing the primary count with the secondary count
    as tie-break.
    """
    eps = epsilon_for(graph)
    maps = []
    for primary in _PRIMARY_OF[preference.kind]:
        if primary == "cells":
            maps.append({"route": 1.0, "transfer": eps})
        else:
            maps.append({"route": eps, "transfer": 1.0})
    return maps


def _weighted_adjacency(
    graph: TransferGraph, weights: dict[str, float]
) -> dict[NodeId, list[tuple[NodeId, float]]]:
    adj: dict[NodeId, list[tuple[NodeId, float]]] = {}
    for node_id in graph.nodes:
        adj[node_id] = [(v, weights[kind]) for v, kind in graph.neighbors(node_id)]
    return adj


def modified_dijkstra(
    adj: dict[NodeId, list[tuple[NodeId, float]]],
    sources: list[NodeId],
) -> tuple[dict[NodeId, float], dict[NodeId, list[NodeId]]]:
    """Multi-source Dijkstra keeping every equal-cost predecessor.

    Relaxation that strictly improves a distance resets the predecessor
    list; relaxation that exactly ties appends. Weights must be
    non-negative; zero weights are fine because enumeration walks simple
    paths only.
    """
    dist: dict[NodeId, float] = {}
    preds: dict[NodeId, list[NodeId]] = {}
    heap: list[tuple[float, NodeId]] = []
    for s in sources:
        if s in adj:
            dist[s] = 0.0
            preds[s] = []
            heapq.heappush(heap, (0.0, s))
    done: set[NodeId] = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, w in adj.get(u, ()):
            cand = d + w
            old = dist.get(v)
            if old is None or cand < old:
                dist[v] = cand
                preds[v] = [u]
                heapq.heappush(heap, (cand, v))
            elif cand == old and u not in preds[v]:
                preds[v].append(u)
    return dist, preds


def enumerate_paths(
    preds: dict[NodeId, list[NodeId]],
    dist: dict[NodeId, float],
    sources: list[NodeId],
    destinations: list[NodeId],
    limit: int = DEFAULT_PATH_LIMIT,
) -> tuple[list[tuple[NodeId, ...]], bool]:
    """All distinct minimal simple paths from any source to a nearest destination.

    Backtracks the predecessor DAG; an on-path visited set guards against
    the cycles that zero-weight ties can introduce. Stops with a truncation
    flag after `limit` paths.
    """
    reachable = [d for d in destinations if d in dist]
    if not reachable:
        return [], False
    best = min(dist[d] for d in reachable)
    targets = [d for d in reachable if dist[d] <= best + 1e-9]
    source_set = set(sources)
    paths: list[tuple[NodeId, ...]] = []
    truncated = False

    def backtrack(node: NodeId, tail: list[NodeId], on_path: set[NodeId]) -> bool:
        if len(paths) >= limit:
            return False
        if node in source_set:
            paths.append(tuple(reversed(tail)))
            if len(paths) >= limit:
                return False
        for p in preds.get(node, ()):
            if p in on_path:
                continue
            tail.append(p)
            on_path.add(p)
            keep_going = backtrack(p, tail, on_path)
            on_path.discard(p)
            tail.pop()
            if not keep_going:
                return False
        return True

    for dest in targets:
        if not backtrack(dest, [dest], {dest}):
            truncated = True
            break
    return paths, truncated


def annotate_path(graph: TransferGraph, nodes: tuple[NodeId, ...]) -> PathResult:
    route_edges = 0
    transfers = 0
    for u, v in zip(nodes, nodes[1:]):
        if graph.edge_kind(u, v) == "route":
            route_edges += 1
        else:
            transfers += 1
    return PathResult(nodes, route_edges + 1, transfers)


def _band_paths(
    graph: TransferGraph,
    sources: list[NodeId],
    destinations: list[NodeId],
    primary: str,
    limit: int,
) -> tuple[list[PathResult], bool]:
    """Every simple path minimizing the primary count (secondary unweighted)."""
    weights = {"route": 1.0, "transfer": 0.0} if primary == "cells" else {"route": 0.0, "transfer": 1.0}
    adj = _weighted_adjacency(graph, weights)
    dist, preds = modified_dijkstra(adj, sources)
    raw, truncated = enumerate_paths(preds, dist, sources, destinations, limit)
    return [annotate_path(graph, nodes) for nodes in raw], truncated


def find_paths(
    graph: TransferGraph,
    sources: list[NodeId],
    destinations: list[NodeId],
    preference: Preference,
    limit: int = DEFAULT_PATH_LIMIT,
) -> SearchOutcome:
    """Candidate set and deterministic selection for a preference.

    Candidates are the preference's minimal paths after bound filtering;
    selection minimizes (secondary count, node sequence) so equal outcomes
    are ordered lexicographically and results are reproducible.
    """
    sources = [s for s in sources if graph.nodes and s in graph.nodes]
    destinations = [d for d in destinations if d in graph.nodes]
    if not sources or not destinations:
        return SearchOutcome(None, [], sources, destinations)

    kind = preference.kind
    truncated = False
    if kind is PreferenceKind.MIN_CELLS_TRANSFERS:
        by_cells, t1 = _band_paths(graph, sources, destinations, "cells", limit)
        by_transfers, t2 = _band_paths(graph, sources, destinations, "transfers", limit)
        truncated = t1 or t2
        transfer_sets = {p.nodes for p in by_transfers}
        candidates = [p for p in by_cells if p.nodes in transfer_sets]
        tie_break = lambda p: p.nodes
    else:
        primary = _PRIMARY_OF[kind][0]
        candidates, truncated = _band_paths(graph, sources, destinations, primary, limit)
        if preference.cells_limit is not None:
            candidates = [p for p in candidates if p.cell_count <= preference.cells_limit]
        if preference.transfers_limit is not None:
            candidates = [p for p in candidates if p.transfer_count <= preference.transfers_limit]
        if primary == "cells":
            tie_break = lambda p: (p.transfer_count, p.nodes)
        else:
            tie_break = lambda p: (p.cell_count, p.nodes)

    selected = min(candidates, key=tie_break) if candidates else None
    return SearchOutcome(selected, candidates, sources, destinations, truncated)


def _matching_nodes(graph: TransferGraph, query: EncryptedIndex) -> list[NodeId]:
    active = graph.active_nodes()
    if not active:
        return []
    sims = crypto.similarity_matrix([query], [n.plus for n in active])[0]
    target = graph.match_target
    return [active[j].node_id for j in range(len(active)) if abs(sims[j] - target) < INTEGER_TOL]


def search(
    graph: TransferGraph,
    request: TransferRequest,
    limit: int = DEFAULT_PATH_LIMIT,
) -> SearchOutcome:
    """Match a rider: pin source/destination nodes, then run the preference."""
    if not (request.pickup.unmasked and request.dropoff.unmasked):
        raise ValueError("search requires an unmasked request")
    sources = _matching_nodes(graph, request.pickup)
    destinations = _matching_nodes(graph, request.dropoff)
    return find_paths(graph, sources, destinations, request.preference, limit)


def update_graph(graph: TransferGraph, path: PathResult) -> list[str]:
    """Consume one seat on every offer along a served path.

    Offers that reach zero capacity lose all their edges and take no
    further part in matching. Returns the offer ids that were exhausted.
    """
    exhausted = []
    for offer_id in dict.fromkeys(oid for oid, _ in path.nodes):
        graph.capacity[offer_id] -= 1
        if graph.capacity[offer_id] <= 0:
            graph.remove_offer_edges(offer_id)
            exhausted.append(offer_id)
    return exhausted
