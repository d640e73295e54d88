"""Trip-organizing server and the key authority it depends on.

Two parties, kept structurally separate:

* TrustedAuthority holds master keys and derives per-user key sets. It
  never sees trips.
* TosServer holds only its unmasking secrets, consumed-token bookkeeping,
  unmasked ciphertexts, and opaque contact blobs. It never holds user key
  sets, split patterns, plaintext cells, or Bloom filters; tests assert
  that no such type is reachable from its state.

RideService wires the two behind one frame dispatcher (registration frames
go to the authority, everything else to the server) and is what both the
in-process loopback transport and the socket server drive.
"""

from __future__ import annotations

import hashlib
import secrets as sysrandom
import socketserver
import threading
from dataclasses import dataclass, replace

import numpy as np

from . import crypto, direct, protocol, transfer
from .crypto import TosSecrets
from .protocol import ErrorCode, Frame, MsgType, ProtocolError


@dataclass
class ServiceConfig:
    """Deployment parameters, loadable from a key=value text file."""

    filter_bits: int = 2048
    n_hashes: int = 24
    id_bits: int = 11
    time_bits: int = 25
    time_slots: int = 48
    max_items: int = 60
    default_capacity: int = 5
    path_limit: int = 10_000
    match_threshold: int = 0  # pending requests that auto-trigger a round; 0 = manual
    tokens_per_bundle: int = 32
    port: int = 7370

    @property
    def cell_vector_bits(self) -> int:
        return 2 * self.id_bits + self.time_bits

    @classmethod
    def from_text(cls, text: str) -> "ServiceConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
            values[key.strip()] = int(value.strip())
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "ServiceConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = [f"{name} = {getattr(self, name)}" for name in self.__dataclass_fields__]
        return "\n".join(lines) + "\n"


def _token_digest(token: bytes) -> bytes:
    return hashlib.sha256(token).digest()


class TrustedAuthority:
    """Key service: master keys, per-user derivation, epoch rotation."""

    def __init__(self, config: ServiceConfig, rng: np.random.Generator):
        self.config = config
        self._rng = rng
        self.epoch = 1
        self.salt = int(rng.integers(0, 2**63))
        self.master_direct = crypto.generate_master_key(config.filter_bits, rng)
        self.master_transfer = crypto.generate_master_key(config.cell_vector_bits, rng)
        self.secrets_direct = crypto.generate_tos_secrets(config.filter_bits, rng)
        self.secrets_transfer = crypto.generate_tos_secrets(config.cell_vector_bits, rng)
        self._deriver_direct = crypto.KeyDeriver(self.master_direct, self.secrets_direct)
        self._deriver_transfer = crypto.KeyDeriver(self.master_transfer, self.secrets_transfer)

    def register(self, role: str) -> tuple[protocol.KeyBundle, list[bytes]]:
        """Fresh key sets and single-use tokens; returns (bundle, token digests)."""
        if role == "driver":
            keysets = {
                "direct-driver": self._deriver_direct.derive("driver", self._rng),
                "transfer-plus": self._deriver_transfer.derive("driver", self._rng),
                "transfer-minus": self._deriver_transfer.derive("rider", self._rng),
            }
        elif role == "rider":
            keysets = {
                "direct-rider": self._deriver_direct.derive("rider", self._rng),
                "transfer-rider": self._deriver_transfer.derive("rider", self._rng),
            }
        else:
            raise ValueError(f"role must be 'driver' or 'rider', got {role!r}")
        tokens = [sysrandom.token_bytes(protocol.TOKEN_SIZE) for _ in range(self.config.tokens_per_bundle)]
        cfg = self.config
        bundle = protocol.KeyBundle(
            epoch=self.epoch,
            salt=self.salt,
            filter_bits=cfg.filter_bits,
            n_hashes=cfg.n_hashes,
            id_bits=cfg.id_bits,
            time_bits=cfg.time_bits,
            time_slots=cfg.time_slots,
            max_items=cfg.max_items,
            keysets={name: crypto.key_material_to_bytes(ks) for name, ks in keysets.items()},
            tokens=tokens,
        )
        return bundle, [_token_digest(t) for t in tokens]

    def rotate(self) -> tuple[int, int]:
        """Advance the epoch with a fresh salt."""
        self.epoch += 1
        self.salt = int(self._rng.integers(0, 2**63))
        return self.epoch, self.salt


@dataclass
class DirectMatchRecord:
    request_id: str
    offer_id: str
    case: direct.MatchCase


@dataclass
class TransferMatchRecord:
    request_id: str
    path: transfer.PathResult
    truncated: bool


class TosServer:
    """Matching server state and frame handlers (registration excluded)."""

    def __init__(
        self,
        config: ServiceConfig,
        secrets_direct: TosSecrets,
        secrets_transfer: TosSecrets,
        epoch: int,
        salt: int,
    ):
        self.config = config
        self.secrets_direct = secrets_direct
        self.secrets_transfer = secrets_transfer
        self.epoch = epoch
        self.salt = salt
        self.unused_tokens: set[bytes] = set()
        self.direct_offers: dict[str, direct.DirectOffer] = {}
        self.direct_remaining: dict[str, int] = {}
        self.direct_requests: dict[str, direct.DirectRequest] = {}
        self.graph = transfer.TransferGraph(config.id_bits)
        self.transfer_offers: dict[str, transfer.TransferOffer] = {}
        self.transfer_requests: dict[str, transfer.TransferRequest] = {}
        self.notifications: dict[str, list] = {}
        self.match_log: list[DirectMatchRecord | TransferMatchRecord] = []
        self._counter = 0
        self._id_rng = sysrandom

    def add_token_digests(self, digests: list[bytes]) -> None:
        self.unused_tokens.update(digests)

    def _assign_id(self, prefix: str) -> str:
        self._counter += 1
        return f"{prefix}{self._counter}-{self._id_rng.token_hex(4)}"

    def _consume_token(self, token: bytes) -> None:
        digest = _token_digest(token)
        if digest not in self.unused_tokens:
            raise ProtocolError(ErrorCode.BAD_TOKEN, "unknown or already-used token")
        self.unused_tokens.discard(digest)

    def _check_epoch(self, frame: Frame) -> None:
        if frame.epoch != self.epoch:
            raise ProtocolError(
                ErrorCode.STALE_EPOCH, f"frame epoch {frame.epoch} != current {self.epoch}"
            )

    def _queue(self, note) -> None:
        self.notifications.setdefault(note.subject_id, []).append(note)

    # -- ingestion ------------------------------------------------------------

    def _decode_index(self, blob: bytes, orientation: str, dim: int) -> crypto.EncryptedIndex:
        idx = protocol.index_from_blob(blob)
        if idx.unmasked:
            raise ProtocolError(ErrorCode.BAD_STATE, "submissions must not be pre-unmasked")
        if idx.orientation != orientation:
            raise ProtocolError(
                ErrorCode.BAD_STATE, f"index must be {orientation}-form, got {idx.orientation}"
            )
        if idx.dim != dim:
            raise ProtocolError(ErrorCode.BAD_DIMENSION, f"index dim {idx.dim}, expected {dim}")
        return idx

    def handle_submit_offer(self, frame: Frame) -> bytes:
        self._check_epoch(frame)
        payload = protocol.decode_submit_offer(frame.payload)
        if isinstance(payload, protocol.DirectOfferPayload):
            if payload.capacity < 1:
                raise ProtocolError(ErrorCode.BAD_STATE, "capacity must be >= 1")
            if not payload.cases:
                raise ProtocolError(ErrorCode.BAD_STATE, "offer must accept at least one case")
            dims = self.config.filter_bits
            indexes = [self._decode_index(b, "column", dims) for b in payload.indexes]
            offer_id = self._assign_id("do")
            offer = direct.DirectOffer(
                offer_id, payload.capacity, payload.cases, *indexes, contact=payload.contact
            )
            unmasked = direct.unmask_offers([offer], self.secrets_direct)[0]
            self._consume_token(frame.token)
            self.direct_offers[offer_id] = unmasked
            self.direct_remaining[offer_id] = payload.capacity
        else:
            if payload.capacity < 1:
                raise ProtocolError(ErrorCode.BAD_STATE, "capacity must be >= 1")
            if len(payload.cells) < 2:
                raise ProtocolError(ErrorCode.BAD_STATE, "transfer offer needs >= 2 cells")
            dims = self.config.cell_vector_bits
            cells = [
                transfer.TransferCellCipher(
                    self._decode_index(plus, "column", dims),
                    self._decode_index(minus, "row", dims),
                )
                for plus, minus in payload.cells
            ]
            offer_id = self._assign_id("to")
            offer = transfer.TransferOffer(offer_id, payload.capacity, cells, payload.contact)
            self._consume_token(frame.token)
            self.graph.add_offer(offer, self.secrets_transfer)
            self.transfer_offers[offer_id] = offer
        return protocol.encode_frame(
            MsgType.SUBMIT_OFFER, self.epoch, protocol.ZERO_TOKEN, protocol.encode_ack(offer_id)
        )

    def handle_submit_request(self, frame: Frame) -> bytes:
        self._check_epoch(frame)
        payload = protocol.decode_submit_request(frame.payload)
        if isinstance(payload, protocol.DirectRequestPayload):
            dims = self.config.filter_bits
            indexes = [self._decode_index(b, "row", dims) for b in payload.indexes]
            request_id = self._assign_id("dr")
            request = direct.DirectRequest(request_id, *indexes, contact=payload.contact)
            unmasked = direct.unmask_requests([request], self.secrets_direct)[0]
            self._consume_token(frame.token)
            self.direct_requests[request_id] = unmasked
        else:
            dims = self.config.cell_vector_bits
            pickup = self._decode_index(payload.pickup, "row", dims)
            dropoff = self._decode_index(payload.dropoff, "row", dims)
            cleared = crypto.unmask_indices([pickup, dropoff], self.secrets_transfer)
            request_id = self._assign_id("tr")
            request = transfer.TransferRequest(
                request_id, cleared[0], cleared[1], payload.preference, payload.contact
            )
            self._consume_token(frame.token)
            self.transfer_requests[request_id] = request
        pending = len(self.direct_requests) + len(self.transfer_requests)
        if self.config.match_threshold and pending >= self.config.match_threshold:
            self.run_matching()
        return protocol.encode_frame(
            MsgType.SUBMIT_REQUEST, self.epoch, protocol.ZERO_TOKEN, protocol.encode_ack(request_id)
        )

    def handle_poll(self, frame: Frame) -> bytes:
        subject_ids = protocol.decode_notification_poll(frame.payload)
        notes = []
        for sid in subject_ids:
            notes.extend(self.notifications.pop(sid, []))
        return protocol.encode_frame(
            MsgType.MATCH_NOTIFICATION,
            self.epoch,
            protocol.ZERO_TOKEN,
            protocol.encode_notification_batch(notes),
        )

    def handle_epoch_query(self, frame: Frame) -> bytes:
        announce = protocol.EpochAnnounce(self.epoch, self.salt)
        return protocol.encode_frame(
            MsgType.EPOCH_ANNOUNCE,
            self.epoch,
            protocol.ZERO_TOKEN,
            protocol.encode_epoch_announce(announce),
        )

    # -- matching -------------------------------------------------------------

    def run_direct_matching(self) -> list[DirectMatchRecord]:
        offers = [
            replace(o, capacity=self.direct_remaining[o.offer_id])
            for o in self.direct_offers.values()
            if self.direct_remaining[o.offer_id] > 0
        ]
        requests = list(self.direct_requests.values())
        matches = direct.match_all(offers, requests, self.config.n_hashes)
        records = []
        for match in matches:
            offer = self.direct_offers[match.offer_id]
            request = self.direct_requests.pop(match.request_id)
            self.direct_remaining[match.offer_id] -= 1
            self._queue(
                protocol.DirectNotification(
                    match.request_id, match.offer_id, match.case, offer.contact
                )
            )
            self._queue(
                protocol.DirectNotification(
                    match.offer_id, match.request_id, match.case, request.contact
                )
            )
            records.append(DirectMatchRecord(match.request_id, match.offer_id, match.case))
        self.match_log.extend(records)
        return records

    def run_transfer_matching(self) -> list[TransferMatchRecord]:
        records = []
        for request_id in list(self.transfer_requests):
            request = self.transfer_requests[request_id]
            outcome = transfer.search(self.graph, request, self.config.path_limit)
            if outcome.selected is None:
                continue
            path = outcome.selected
            del self.transfer_requests[request_id]
            transfer.update_graph(self.graph, path)
            offer_order = list(dict.fromkeys(oid for oid, _ in path.nodes))
            contacts = [self.transfer_offers[oid].contact for oid in offer_order]
            ciphers = []
            for u, v in zip(path.nodes, path.nodes[1:]):
                if u[0] != v[0]:  # transfer hop: relay the boarding cell's ciphertext
                    ciphers.append(self.graph.nodes[v].plus_blob)
            self._queue(
                protocol.TransferNotification(request_id, offer_order, contacts, ciphers)
            )
            for oid in offer_order:
                self._queue(
                    protocol.TransferNotification(oid, [oid], [request.contact], [])
                )
            records.append(TransferMatchRecord(request_id, path, outcome.truncated))
        self.match_log.extend(records)
        return records

    def run_matching(self) -> list[DirectMatchRecord | TransferMatchRecord]:
        return [*self.run_direct_matching(), *self.run_transfer_matching()]

    def apply_rotation(self, epoch: int, salt: int) -> protocol.EpochAnnounce:
        """New epoch: drop all pending trip state; tokens stay valid."""
        purged_offers = len(self.direct_offers) + len(self.transfer_offers)
        purged_requests = len(self.direct_requests) + len(self.transfer_requests)
        self.epoch = epoch
        self.salt = salt
        self.direct_offers.clear()
        self.direct_remaining.clear()
        self.direct_requests.clear()
        self.transfer_offers.clear()
        self.transfer_requests.clear()
        self.graph = transfer.TransferGraph(self.config.id_bits)
        return protocol.EpochAnnounce(epoch, salt, purged_offers, purged_requests)


class RideService:
    """Authority + server behind one dispatcher; drive via frames."""

    def __init__(self, config: ServiceConfig, seed: int | None = None):
        rng = np.random.default_rng(seed)
        self.config = config
        self.authority = TrustedAuthority(config, rng)
        self.server = TosServer(
            config,
            self.authority.secrets_direct,
            self.authority.secrets_transfer,
            self.authority.epoch,
            self.authority.salt,
        )
        self._lock = threading.RLock()

    def dispatch(self, frame_bytes: bytes) -> bytes:
        """Handle one frame, always returning exactly one reply frame."""
        with self._lock:
            epoch = self.server.epoch
            try:
                frame, rest = protocol.decode_frame(frame_bytes)
                if rest:
                    raise ProtocolError(ErrorCode.MALFORMED, "trailing bytes after frame")
                return self._dispatch_frame(frame)
            except ProtocolError as exc:
                payload = protocol.encode_error(exc.code, str(exc))
            except (ValueError, UnicodeDecodeError) as exc:
                payload = protocol.encode_error(ErrorCode.MALFORMED, str(exc))
            return protocol.encode_frame(MsgType.ERROR, epoch, protocol.ZERO_TOKEN, payload)

    def _dispatch_frame(self, frame: Frame) -> bytes:
        if frame.msg_type == MsgType.REGISTER_USER:
            role = protocol.decode_register(frame.payload)
            try:
                bundle, digests = self.authority.register(role)
            except ValueError as exc:
                raise ProtocolError(ErrorCode.MALFORMED, str(exc)) from None
            self.server.add_token_digests(digests)
            return protocol.encode_frame(
                MsgType.KEY_BUNDLE,
                self.server.epoch,
                protocol.ZERO_TOKEN,
                protocol.encode_key_bundle(bundle),
            )
        if frame.msg_type == MsgType.SUBMIT_OFFER:
            return self.server.handle_submit_offer(frame)
        if frame.msg_type == MsgType.SUBMIT_REQUEST:
            return self.server.handle_submit_request(frame)
        if frame.msg_type == MsgType.MATCH_NOTIFICATION:
            return self.server.handle_poll(frame)
        if frame.msg_type == MsgType.EPOCH_ANNOUNCE:
            return self.server.handle_epoch_query(frame)
        raise ProtocolError(
            ErrorCode.BAD_STATE, f"clients do not send {frame.msg_type.name} frames"
        )

    def run_matching(self):
        with self._lock:
            return self.server.run_matching()

    def rotate_epoch(self) -> protocol.EpochAnnounce:
        with self._lock:
            epoch, salt = self.authority.rotate()
            return self.server.apply_rotation(epoch, salt)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                frame = protocol.read_frame(self.request)
            except (ProtocolError, ConnectionError, OSError):
                return
            if frame is None:
                return
            reply = self.server.ride_service.dispatch(
                protocol.encode_frame(frame.msg_type, frame.epoch, frame.token, frame.payload)
            )
            try:
                self.request.sendall(reply)
            except OSError:
                return


class SocketServer(socketserver.ThreadingTCPServer):
    """Blocking request/reply server over the frame protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, service: RideService, host: str = "127.0.0.1", port: int | None = None):
        self.ride_service = service
        port = service.config.port if port is None else port
        super().__init__((host, port), _FrameHandler)

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
