"""Direct (single-driver, non-transfer) ride matching.

An offer carries four encrypted indexes built from the driver's trip:
pick-up area filter, drop-off area filter, route filter, and a day-slot
time vector. A request carries the rider's pick-up cell, drop-off cell,
intended route filter, and time vector. The server matches a pair by
checking, on unmasked indexes only:

  gate 1: time similarity == 1        (same day slot)
  gate 2: pick-up similarity == n_hashes  (rider pick-up in driver area)
  gate 3: one of the drop-off cases the driver accepts:
    area:     rider drop-off cell in the driver drop-off area
    route:    rider drop-off cell on the driver route
    extended: driver drop-off cell on the rider's route

Integer-valued gates are tested within +-0.5, which absorbs the numeric
noise of the encryption round trip.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import crypto
from .bloom import BloomFilter, slot_vector
from .crypto import EncryptedIndex, TosSecrets, UserKeySet

INTEGER_TOL = 0.5


class MatchCase(enum.Enum):
    """Drop-off arrangements a driver may accept."""

    AREA = "area"
    ROUTE = "route"
    EXTENDED = "extended"


DEFAULT_CASES = (MatchCase.AREA, MatchCase.ROUTE, MatchCase.EXTENDED)


@dataclass
class SummaryConfig:
    """Shared encoding parameters for one epoch of the direct service."""

    bits: int
    n_hashes: int
    time_slots: int = 48
    max_items: int = 60
    epoch: int = 0
    salt: int = 0

    def __post_init__(self) -> None:
        if self.bits < self.time_slots:
            raise ValueError(f"bits {self.bits} must be >= time_slots {self.time_slots}")
        if self.n_hashes < 1 or self.n_hashes > self.bits:
            raise ValueError(f"n_hashes {self.n_hashes} out of range for bits {self.bits}")
        if self.max_items < 1:
            raise ValueError(f"max_items must be >= 1, got {self.max_items}")

    def filter_of(self, cells) -> BloomFilter:
        cells = list(cells)
        if not cells:
            raise ValueError("cell set must be nonempty")
        if len(cells) > self.max_items:
            raise ValueError(f"cell set size {len(cells)} exceeds max_items {self.max_items}")
        return BloomFilter.of_cells(cells, self.bits, self.n_hashes, self.epoch, self.salt)


@dataclass
class OfferSpec:
    """Plaintext driver trip, as known only to the driver."""

    offer_id: str
    pickup_cells: tuple[int, ...]
    dropoff_cells: tuple[int, ...]
    route_cells: tuple[int, ...]
    depart_seconds: float
    capacity: int
    cases: tuple[MatchCase, ...] = DEFAULT_CASES
    contact: bytes = b""


@dataclass
class RequestSpec:
    """Plaintext rider trip, as known only to the rider."""

    request_id: str
    pickup_cell: int
    dropoff_cell: int
    route_cells: tuple[int, ...]
    pickup_seconds: float
    contact: bytes = b""


@dataclass
class DirectOffer:
    offer_id: str
    capacity: int
    cases: tuple[MatchCase, ...]
    pickup: EncryptedIndex
    dropoff: EncryptedIndex
    route: EncryptedIndex
    time: EncryptedIndex
    contact: bytes = b""

    @property
    def unmasked(self) -> bool:
        return self.pickup.unmasked

    def indexes(self) -> list[EncryptedIndex]:
        return [self.pickup, self.dropoff, self.route, self.time]


@dataclass
class DirectRequest:
    request_id: str
    pickup: EncryptedIndex
    dropoff: EncryptedIndex
    route: EncryptedIndex
    time: EncryptedIndex
    contact: bytes = b""

    @property
    def unmasked(self) -> bool:
        return self.pickup.unmasked

    def indexes(self) -> list[EncryptedIndex]:
        return [self.pickup, self.dropoff, self.route, self.time]


@dataclass(frozen=True)
class DirectMatch:
    request_id: str
    offer_id: str
    case: MatchCase


def _offer_vectors(spec: OfferSpec, cfg: SummaryConfig) -> np.ndarray:
    if not spec.cases:
        raise ValueError("offer must accept at least one drop-off case")
    if spec.capacity < 1:
        raise ValueError(f"capacity must be >= 1, got {spec.capacity}")
    return np.stack(
        [
            cfg.filter_of(spec.pickup_cells).vector(),
            cfg.filter_of(spec.dropoff_cells).vector(),
            cfg.filter_of(spec.route_cells).vector(),
            slot_vector(spec.depart_seconds, cfg.time_slots, cfg.bits),
        ]
    )


def _request_vectors(spec: RequestSpec, cfg: SummaryConfig) -> np.ndarray:
    return np.stack(
        [
            cfg.filter_of([spec.pickup_cell]).vector(),
            cfg.filter_of([spec.dropoff_cell]).vector(),
            cfg.filter_of(spec.route_cells).vector(),
            slot_vector(spec.pickup_seconds, cfg.time_slots, cfg.bits),
        ]
    )


def build_offers(
    specs: list[OfferSpec],
    keys: UserKeySet,
    cfg: SummaryConfig,
    rng: np.random.Generator,
) -> list[DirectOffer]:
    """Encrypt many offers in one batched pass (one GEMM set per key part)."""
    if keys.role != "driver":
        raise ValueError("offers must be encrypted with driver keys")
    if not specs:
        return []
    vectors = np.concatenate([_offer_vectors(s, cfg) for s in specs])
    enc = crypto.encrypt_indices(vectors, keys, rng)
    out = []
    for j, spec in enumerate(specs):
        pickup, dropoff, route, time = enc[4 * j : 4 * j + 4]
        out.append(
            DirectOffer(
                spec.offer_id, spec.capacity, tuple(spec.cases),
                pickup, dropoff, route, time, spec.contact,
            )
        )
    return out


def build_offer(
    spec: OfferSpec, keys: UserKeySet, cfg: SummaryConfig, rng: np.random.Generator
) -> DirectOffer:
    return build_offers([spec], keys, cfg, rng)[0]


def build_requests(
    specs: list[RequestSpec],
    keys: UserKeySet,
    cfg: SummaryConfig,
    rng: np.random.Generator,
) -> list[DirectRequest]:
    if keys.role != "rider":
        raise ValueError("requests must be encrypted with rider keys")
    if not specs:
        return []
    vectors = np.concatenate([_request_vectors(s, cfg) for s in specs])
    enc = crypto.encrypt_indices(vectors, keys, rng)
    out = []
    for j, spec in enumerate(specs):
        pickup, dropoff, route, time = enc[4 * j : 4 * j + 4]
        out.append(DirectRequest(spec.request_id, pickup, dropoff, route, time, spec.contact))
    return out


def build_request(
    spec: RequestSpec, keys: UserKeySet, cfg: SummaryConfig, rng: np.random.Generator
) -> DirectRequest:
    return build_requests([spec], keys, cfg, rng)[0]


def unmask_offers(offers: list[DirectOffer], secrets: TosSecrets) -> list[DirectOffer]:
    """Server-side: apply unmasking secrets to every index of every offer."""
    if not offers:
        return []
    cleared = crypto.unmask_indices([idx for o in offers for idx in o.indexes()], secrets)
    return [
        replace(o, pickup=cleared[4 * j], dropoff=cleared[4 * j + 1],
                route=cleared[4 * j + 2], time=cleared[4 * j + 3])
        for j, o in enumerate(offers)
    ]


def unmask_requests(requests: list[DirectRequest], secrets: TosSecrets) -> list[DirectRequest]:
    if not requests:
        return []
    cleared = crypto.unmask_indices([idx for r in requests for idx in r.indexes()], secrets)
    return [
        replace(r, pickup=cleared[4 * j], dropoff=cleared[4 * j + 1],
                route=cleared[4 * j + 2], time=cleared[4 * j + 3])
        for j, r in enumerate(requests)
    ]


def _hit(value: float, target: float) -> bool:
    return abs(value - target) < INTEGER_TOL


def match_pair(
    offer: DirectOffer, request: DirectRequest, n_hashes: int
) -> MatchCase | None:
    """First acceptable drop-off case for one offer/request pair, if any."""
    if not _hit(crypto.match_similarity(request.time, offer.time), 1.0):
        return None
    if not _hit(crypto.match_similarity(request.pickup, offer.pickup), n_hashes):
        return None
    for case in offer.cases:
        if case is MatchCase.AREA:
            value = crypto.match_similarity(request.dropoff, offer.dropoff)
        elif case is MatchCase.ROUTE:
            value = crypto.match_similarity(request.dropoff, offer.route)
        else:
            value = crypto.match_similarity(request.route, offer.dropoff)
        if _hit(value, n_hashes):
            return case
    return None


def match_all(
    offers: list[DirectOffer], requests: list[DirectRequest], n_hashes: int
) -> list[DirectMatch]:
    """Greedy assignment: requests in arrival order, first feasible offer.

    Each offer serves at most its capacity. All pair similarities are
    computed in batched kernel calls up front; the greedy loop then only
    reads them.
    """
    if not offers or not requests:
        return []
    time_s = crypto.similarity_matrix([r.time for r in requests], [o.time for o in offers])
    pick_s = crypto.similarity_matrix([r.pickup for r in requests], [o.pickup for o in offers])
    case_s = {
        MatchCase.AREA: crypto.similarity_matrix(
            [r.dropoff for r in requests], [o.dropoff for o in offers]
        ),
        MatchCase.ROUTE: crypto.similarity_matrix(
            [r.dropoff for r in requests], [o.route for o in offers]
        ),
        MatchCase.EXTENDED: crypto.similarity_matrix(
            [r.route for r in requests], [o.dropoff for o in offers]
        ),
    }
    remaining = {o.offer_id: o.capacity for o in offers}
    matches = []
    for i, request in enumerate(requests):
        for j, offer in enumerate(offers):
            if remaining[offer.offer_id] <= 0:
                continue
            if not (_hit(time_s[i, j], 1.0) and _hit(pick_s[i, j], n_hashes)):
                continue
            case = next(
                (c for c in offer.cases if _hit(case_s[c][i, j], n_hashes)), None
            )
            if case is None:
                continue
            remaining[offer.offer_id] -= 1
            matches.append(DirectMatch(request.request_id, offer.offer_id, case))
            break
    return matches
