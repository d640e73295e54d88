"""Client-side API: transports, registration, and trip submission.

A client talks to the service purely through frames. The transport is
pluggable: LoopbackTransport calls a RideService in process (handy for
tests and simulation), SocketTransport speaks the same frames over TCP.
Both count wire bytes so experiments can report communication overhead.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass

import numpy as np

from . import crypto, direct, protocol, transfer
from .crypto import UserKeySet
from .direct import OfferSpec, RequestSpec, SummaryConfig
from .protocol import ErrorCode, Frame, MsgType, ProtocolError
from .transfer import Preference


class ServerError(Exception):
    """The service replied with an ERROR frame."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"{code.name}: {message}")
        self.code = code
        self.message = message


class TokenError(Exception):
    """The client ran out of single-use submission tokens."""


class LoopbackTransport:
    """In-process transport: hands frames straight to a RideService."""

    def __init__(self, service):
        self.service = service
        self.sent_bytes = 0
        self.received_bytes = 0

    def request(self, data: bytes) -> bytes:
        self.sent_bytes += len(data)
        reply = self.service.dispatch(data)
        self.received_bytes += len(reply)
        return reply

    def close(self) -> None:
        pass


class SocketTransport:
    """Blocking TCP transport; one reply frame per request frame."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sent_bytes = 0
        self.received_bytes = 0

    def request(self, data: bytes) -> bytes:
        self.sock.sendall(data)
        self.sent_bytes += len(data)
        frame = protocol.read_frame(self.sock)
        if frame is None:
            raise ConnectionError("server closed the connection")
        reply = protocol.encode_frame(frame.msg_type, frame.epoch, frame.token, frame.payload)
        self.received_bytes += len(reply)
        return reply

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "SocketTransport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class Registration:
    """Everything the client holds after registering."""

    role: str
    epoch: int
    salt: int
    keysets: dict[str, UserKeySet]
    tokens: list[bytes]
    bundle: protocol.KeyBundle


class ServiceClient:
    """One user's view of the service: keys, tokens, and submissions."""

    def __init__(self, transport, rng: np.random.Generator | int | None = None):
        self.transport = transport
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.rng = rng
        self.registration: Registration | None = None

    # -- plumbing -------------------------------------------------------------

    def _request(self, msg_type: MsgType, payload: bytes, token: bytes = protocol.ZERO_TOKEN) -> Frame:
        epoch = self.registration.epoch if self.registration else 0
        data = protocol.encode_frame(msg_type, epoch, token, payload)
        frame, rest = protocol.decode_frame(self.transport.request(data))
        if rest:
            raise ProtocolError(ErrorCode.MALFORMED, "trailing bytes in reply")
        if frame.msg_type == MsgType.ERROR:
            code, message = protocol.decode_error(frame.payload)
            raise ServerError(code, message)
        return frame

    def _take_token(self) -> bytes:
        reg = self._registered()
        if not reg.tokens:
            raise TokenError("no submission tokens left; register again for more")
        return reg.tokens.pop()

    def _registered(self) -> Registration:
        if self.registration is None:
            raise RuntimeError("client is not registered")
        return self.registration

    def _keys(self, name: str) -> UserKeySet:
        reg = self._registered()
        try:
            return reg.keysets[name]
        except KeyError:
            raise RuntimeError(f"role {reg.role!r} holds no {name!r} keys") from None

    # -- registration and epochs ----------------------------------------------

    def register(self, role: str) -> Registration:
        frame = self._request(MsgType.REGISTER_USER, protocol.encode_register(role))
        if frame.msg_type != MsgType.KEY_BUNDLE:
            raise ProtocolError(ErrorCode.BAD_STATE, f"expected KEY_BUNDLE, got {frame.msg_type.name}")
        bundle = protocol.decode_key_bundle(frame.payload)
        keysets = {}
        for name, blob in bundle.keysets.items():
            keys = crypto.key_material_from_bytes(blob)
            if not isinstance(keys, UserKeySet):
                raise ProtocolError(ErrorCode.BAD_STATE, f"bundle entry {name!r} is not a user key set")
            keysets[name] = keys
        bundle.keysets = {}  # parsed into matrices above; don't hold the blobs too
        self.registration = Registration(
            role, bundle.epoch, bundle.salt, keysets, list(bundle.tokens), bundle
        )
        return self.registration

    @property
    def summary_config(self) -> SummaryConfig:
        reg = self._registered()
        b = reg.bundle
        return SummaryConfig(
            bits=b.filter_bits,
            n_hashes=b.n_hashes,
            time_slots=b.time_slots,
            max_items=b.max_items,
            epoch=reg.epoch,
            salt=reg.salt,
        )

    def sync_epoch(self) -> protocol.EpochAnnounce:
        """Pick up the current epoch and salt; keys and tokens stay valid."""
        frame = self._request(MsgType.EPOCH_ANNOUNCE, b"")
        announce = protocol.decode_epoch_announce(frame.payload)
        reg = self._registered()
        reg.epoch = announce.epoch
        reg.salt = announce.salt
        return announce

    # -- direct (non-transferable) service --------------------------------------

    def submit_direct_offers(self, specs: list[OfferSpec]) -> list[str]:
        """Encrypt offers in one batch, submit one frame each; returns server ids."""
        offers = direct.build_offers(specs, self._keys("direct-driver"), self.summary_config, self.rng)
        ids = []
        for spec, offer in zip(specs, offers):
            payload = protocol.encode_submit_offer(
                protocol.DirectOfferPayload(
                    capacity=spec.capacity,
                    cases=tuple(spec.cases),
                    contact=spec.contact,
                    indexes=[protocol.index_blob(ix) for ix in offer.indexes()],
                )
            )
            frame = self._request(MsgType.SUBMIT_OFFER, payload, self._take_token())
            ids.append(protocol.decode_ack(frame.payload))
        return ids

    def submit_direct_offer(self, spec: OfferSpec) -> str:
        return self.submit_direct_offers([spec])[0]

    def submit_direct_requests(self, specs: list[RequestSpec]) -> list[str]:
        requests = direct.build_requests(specs, self._keys("direct-rider"), self.summary_config, self.rng)
        ids = []
        for spec, request in zip(specs, requests):
            payload = protocol.encode_submit_request(
                protocol.DirectRequestPayload(
                    contact=spec.contact,
                    indexes=[protocol.index_blob(ix) for ix in request.indexes()],
                )
            )
            frame = self._request(MsgType.SUBMIT_REQUEST, payload, self._take_token())
            ids.append(protocol.decode_ack(frame.payload))
        return ids

    def submit_direct_request(self, spec: RequestSpec) -> str:
        return self.submit_direct_requests([spec])[0]

    # -- transfer service -------------------------------------------------------

    def submit_transfer_offer(
        self, cells: list[tuple[int, int]], capacity: int, contact: bytes = b""
    ) -> str:
        reg = self._registered()
        offer = transfer.build_transfer_offer(
            "local",
            cells,
            self._keys("transfer-plus"),
            self._keys("transfer-minus"),
            reg.bundle.id_bits,
            reg.bundle.time_bits,
            capacity,
            self.rng,
            contact,
        )
        payload = protocol.encode_submit_offer(
            protocol.TransferOfferPayload(
                capacity=capacity,
                contact=contact,
                cells=[
                    (protocol.index_blob(c.plus), protocol.index_blob(c.minus))
                    for c in offer.cells
                ],
            )
        )
        frame = self._request(MsgType.SUBMIT_OFFER, payload, self._take_token())
        return protocol.decode_ack(frame.payload)

    def submit_transfer_request(
        self,
        pickup: tuple[int, int],
        dropoff: tuple[int, int],
        preference: Preference | str | None = None,
        contact: bytes = b"",
    ) -> str:
        reg = self._registered()
        if preference is None:
            preference = transfer.DEFAULT_PREFERENCE
        elif isinstance(preference, str):
            preference = Preference.parse(preference)
        request = transfer.build_transfer_request(
            "local",
            pickup,
            dropoff,
            self._keys("transfer-rider"),
            reg.bundle.id_bits,
            reg.bundle.time_bits,
            preference,
            self.rng,
            contact,
        )
        payload = protocol.encode_submit_request(
            protocol.TransferRequestPayload(
                contact=contact,
                preference=preference,
                pickup=protocol.index_blob(request.pickup),
                dropoff=protocol.index_blob(request.dropoff),
            )
        )
        frame = self._request(MsgType.SUBMIT_REQUEST, payload, self._take_token())
        return protocol.decode_ack(frame.payload)

    # -- notifications ----------------------------------------------------------

    def poll(self, subject_ids: list[str]):
        """Fetch and clear queued match notifications for one's own ids."""
        frame = self._request(MsgType.MATCH_NOTIFICATION, protocol.encode_notification_poll(subject_ids))
        return protocol.decode_notification_batch(frame.payload)
