"""Wire protocol: length-prefixed binary frames and payload codecs.

Frame layout (all integers little-endian):

    u32 length | u8 msg_type | u64 epoch | 32-byte token | payload

`length` counts everything after itself. The token authorizes one
submission and is all-zero where no authorization applies (registration,
epoch queries, server replies). Replies mirror the request's message type;
failures come back as ERROR frames and leave server state unchanged.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .crypto import EncryptedIndex
from .direct import MatchCase
from .transfer import Preference, PreferenceKind

HEADER_SIZE = 4 + 1 + 8 + 32
TOKEN_SIZE = 32
ZERO_TOKEN = b"\x00" * TOKEN_SIZE
MAX_FRAME_SIZE = 1024 * 1024 * 1024  # key bundles carry dense matrices and get big


class MsgType(enum.IntEnum):
    REGISTER_USER = 1
    KEY_BUNDLE = 2
    SUBMIT_OFFER = 3
    SUBMIT_REQUEST = 4
    MATCH_NOTIFICATION = 5
    EPOCH_ANNOUNCE = 6
    ERROR = 7


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    BAD_TOKEN = 2
    STALE_EPOCH = 3
    BAD_DIMENSION = 4
    BAD_STATE = 5


class ProtocolError(Exception):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    epoch: int
    token: bytes
    payload: bytes


def encode_frame(msg_type: MsgType, epoch: int, token: bytes, payload: bytes) -> bytes:
    if len(token) != TOKEN_SIZE:
        raise ValueError(f"token must be {TOKEN_SIZE} bytes, got {len(token)}")
    body = struct.pack("<BQ", int(msg_type), epoch) + token + payload
    if len(body) > MAX_FRAME_SIZE:
        raise ValueError(f"frame too large: {len(body)} bytes")
    return struct.pack("<I", len(body)) + body


def decode_frame(data: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from a buffer; returns (frame, remaining bytes)."""
    if len(data) < 4:
        raise ProtocolError(ErrorCode.MALFORMED, "short frame header")
    (length,) = struct.unpack_from("<I", data)
    if length < HEADER_SIZE - 4 or length > MAX_FRAME_SIZE:
        raise ProtocolError(ErrorCode.MALFORMED, f"bad frame length {length}")
    if len(data) < 4 + length:
        raise ProtocolError(ErrorCode.MALFORMED, "truncated frame")
    msg_b, epoch = struct.unpack_from("<BQ", data, 4)
    try:
        msg_type = MsgType(msg_b)
    except ValueError:
        raise ProtocolError(ErrorCode.MALFORMED, f"unknown message type {msg_b}") from None
    token = data[13 : 13 + TOKEN_SIZE]
    payload = data[13 + TOKEN_SIZE : 4 + length]
    return Frame(msg_type, epoch, token, payload), data[4 + length :]


def read_frame(sock) -> Frame | None:
    """Read one frame from a socket; None on clean EOF."""
    head = _read_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length < HEADER_SIZE - 4 or length > MAX_FRAME_SIZE:
        raise ProtocolError(ErrorCode.MALFORMED, f"bad frame length {length}")
    body = _read_exact(sock, length)
    if body is None:
        raise ProtocolError(ErrorCode.MALFORMED, "connection closed mid-frame")
    frame, rest = decode_frame(head + body)
    if rest:
        raise ProtocolError(ErrorCode.MALFORMED, "trailing bytes after frame")
    return frame


def _read_exact(sock, count: int) -> bytes | None:
    """Read exactly `count` bytes; None on EOF before the first byte."""
    chunks = []
    got = 0
    while got < count:
        chunk = sock.recv(count - got)
        if not chunk:
            if got == 0:
                return None
            raise ProtocolError(ErrorCode.MALFORMED, "connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class _Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def u8(self, v: int) -> "_Writer":
        self.buf += struct.pack("<B", v)
        return self

    def u16(self, v: int) -> "_Writer":
        self.buf += struct.pack("<H", v)
        return self

    def u32(self, v: int) -> "_Writer":
        self.buf += struct.pack("<I", v)
        return self

    def u64(self, v: int) -> "_Writer":
        self.buf += struct.pack("<Q", v)
        return self

    def f64(self, v: float) -> "_Writer":
        self.buf += struct.pack("<d", v)
        return self

    def blob(self, data: bytes) -> "_Writer":
        self.buf += struct.pack("<I", len(data)) + data
        return self

    def text(self, s: str) -> "_Writer":
        return self.blob(s.encode("utf-8"))

    def raw(self, data: bytes) -> "_Writer":
        self.buf += data
        return self

    def bytes(self) -> bytes:
        return bytes(self.buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ProtocolError(ErrorCode.MALFORMED, "payload underrun")
        (value,) = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return value

    def u8(self) -> int:
        return self._take("<B")

    def u16(self) -> int:
        return self._take("<H")

    def u32(self) -> int:
        return self._take("<I")

    def u64(self) -> int:
        return self._take("<Q")

    def f64(self) -> float:
        return self._take("<d")

    def blob(self) -> bytes:
        size = self.u32()
        if self.pos + size > len(self.data):
            raise ProtocolError(ErrorCode.MALFORMED, "blob underrun")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ProtocolError(ErrorCode.MALFORMED, "payload underrun")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(ErrorCode.MALFORMED, "trailing payload bytes")


# --- payload schemas ---------------------------------------------------------

_ROLE_CODE = {"driver": 0, "rider": 1}
_ROLE_NAME = {v: k for k, v in _ROLE_CODE.items()}
_SCHEME_CODE = {"direct": 0, "transfer": 1}
_SCHEME_NAME = {v: k for k, v in _SCHEME_CODE.items()}
_CASE_CODE = {MatchCase.AREA: 0, MatchCase.ROUTE: 1, MatchCase.EXTENDED: 2}
_CASE_NAME = {v: k for k, v in _CASE_CODE.items()}
_PREF_CODE = {kind: i for i, kind in enumerate(PreferenceKind)}
_PREF_NAME = {v: k for k, v in _PREF_CODE.items()}
_NO_LIMIT = 0xFFFFFFFF


def encode_register(role: str) -> bytes:
    return _Writer().u8(_ROLE_CODE[role]).bytes()


def decode_register(payload: bytes) -> str:
    r = _Reader(payload)
    role = r.u8()
    r.done()
    if role not in _ROLE_NAME:
        raise ProtocolError(ErrorCode.MALFORMED, f"unknown role code {role}")
    return _ROLE_NAME[role]


@dataclass
class KeyBundle:
    """Registration reply: everything a user needs to participate."""

    epoch: int
    salt: int
    filter_bits: int
    n_hashes: int
    id_bits: int
    time_bits: int
    time_slots: int
    max_items: int
    keysets: dict[str, bytes]  # name -> key material blob
    tokens: list[bytes]


def encode_key_bundle(b: KeyBundle) -> bytes:
    w = (
        _Writer()
        .u64(b.epoch)
        .u64(b.salt)
        .u32(b.filter_bits)
        .u32(b.n_hashes)
        .u32(b.id_bits)
        .u32(b.time_bits)
        .u32(b.time_slots)
        .u32(b.max_items)
    )
    w.u8(len(b.keysets))
    for name, blob in b.keysets.items():
        w.text(name).blob(blob)
    w.u16(len(b.tokens))
    for token in b.tokens:
        if len(token) != TOKEN_SIZE:
            raise ValueError("token size")
        w.raw(token)
    return w.bytes()


def decode_key_bundle(payload: bytes) -> KeyBundle:
    r = _Reader(payload)
    epoch, salt = r.u64(), r.u64()
    filter_bits, n_hashes, id_bits, time_bits, time_slots, max_items = (
        r.u32(), r.u32(), r.u32(), r.u32(), r.u32(), r.u32()
    )
    keysets = {}
    for _ in range(r.u8()):
        name = r.text()
        keysets[name] = r.blob()
    tokens = [r.raw(TOKEN_SIZE) for _ in range(r.u16())]
    r.done()
    return KeyBundle(
        epoch, salt, filter_bits, n_hashes, id_bits, time_bits,
        time_slots, max_items, keysets, tokens,
    )


@dataclass
class DirectOfferPayload:
    capacity: int
    cases: tuple[MatchCase, ...]
    contact: bytes
    indexes: list[bytes]  # pickup, dropoff, route, time


@dataclass
class TransferOfferPayload:
    capacity: int
    contact: bytes
    cells: list[tuple[bytes, bytes]]  # (plus, minus) index blobs


def encode_submit_offer(payload: DirectOfferPayload | TransferOfferPayload) -> bytes:
    w = _Writer()
    if isinstance(payload, DirectOfferPayload):
        w.u8(_SCHEME_CODE["direct"]).u16(payload.capacity)
        w.u8(len(payload.cases))
        for case in payload.cases:
            w.u8(_CASE_CODE[case])
        w.blob(payload.contact)
        if len(payload.indexes) != 4:
            raise ValueError("direct offer carries 4 indexes")
        for blob in payload.indexes:
            w.blob(blob)
    else:
        w.u8(_SCHEME_CODE["transfer"]).u16(payload.capacity)
        w.blob(payload.contact)
        w.u16(len(payload.cells))
        for plus, minus in payload.cells:
            w.blob(plus).blob(minus)
    return w.bytes()


def decode_submit_offer(payload: bytes) -> DirectOfferPayload | TransferOfferPayload:
    r = _Reader(payload)
    scheme = r.u8()
    if scheme == _SCHEME_CODE["direct"]:
        capacity = r.u16()
        ncases = r.u8()
        cases = []
        for _ in range(ncases):
            code = r.u8()
            if code not in _CASE_NAME:
                raise ProtocolError(ErrorCode.MALFORMED, f"unknown case code {code}")
            cases.append(_CASE_NAME[code])
        contact = r.blob()
        indexes = [r.blob() for _ in range(4)]
        r.done()
        return DirectOfferPayload(capacity, tuple(cases), contact, indexes)
    if scheme == _SCHEME_CODE["transfer"]:
        capacity = r.u16()
        contact = r.blob()
        cells = [(r.blob(), r.blob()) for _ in range(r.u16())]
        r.done()
        return TransferOfferPayload(capacity, contact, cells)
    raise ProtocolError(ErrorCode.MALFORMED, f"unknown scheme code {scheme}")


@dataclass
class DirectRequestPayload:
    contact: bytes
    indexes: list[bytes]  # pickup, dropoff, route, time


@dataclass
class TransferRequestPayload:
    contact: bytes
    preference: Preference
    pickup: bytes
    dropoff: bytes


def encode_submit_request(payload: DirectRequestPayload | TransferRequestPayload) -> bytes:
    w = _Writer()
    if isinstance(payload, DirectRequestPayload):
        w.u8(_SCHEME_CODE["direct"]).blob(payload.contact)
        if len(payload.indexes) != 4:
            raise ValueError("direct request carries 4 indexes")
        for blob in payload.indexes:
            w.blob(blob)
    else:
        pref = payload.preference
        w.u8(_SCHEME_CODE["transfer"]).blob(payload.contact)
        w.u8(_PREF_CODE[pref.kind])
        w.u32(_NO_LIMIT if pref.cells_limit is None else pref.cells_limit)
        w.u32(_NO_LIMIT if pref.transfers_limit is None else pref.transfers_limit)
        w.blob(payload.pickup).blob(payload.dropoff)
    return w.bytes()


def decode_submit_request(payload: bytes) -> DirectRequestPayload | TransferRequestPayload:
    r = _Reader(payload)
    scheme = r.u8()
    if scheme == _SCHEME_CODE["direct"]:
        contact = r.blob()
        indexes = [r.blob() for _ in range(4)]
        r.done()
        return DirectRequestPayload(contact, indexes)
    if scheme == _SCHEME_CODE["transfer"]:
        contact = r.blob()
        kind_code = r.u8()
        if kind_code not in _PREF_NAME:
            raise ProtocolError(ErrorCode.MALFORMED, f"unknown preference code {kind_code}")
        cells_limit = r.u32()
        transfers_limit = r.u32()
        pickup, dropoff = r.blob(), r.blob()
        r.done()
        try:
            pref = Preference(
                _PREF_NAME[kind_code],
                None if cells_limit == _NO_LIMIT else cells_limit,
                None if transfers_limit == _NO_LIMIT else transfers_limit,
            )
        except ValueError as exc:
            raise ProtocolError(ErrorCode.MALFORMED, str(exc)) from None
        return TransferRequestPayload(contact, pref, pickup, dropoff)
    raise ProtocolError(ErrorCode.MALFORMED, f"unknown scheme code {scheme}")


def encode_ack(assigned_id: str) -> bytes:
    return _Writer().text(assigned_id).bytes()


def decode_ack(payload: bytes) -> str:
    r = _Reader(payload)
    assigned = r.text()
    r.done()
    return assigned


@dataclass
class DirectNotification:
    subject_id: str  # the recipient's own offer/request id
    peer_id: str
    case: MatchCase
    peer_contact: bytes


@dataclass
class TransferNotification:
    subject_id: str
    segment_offers: list[str]           # offers in riding order
    peer_contacts: list[bytes]          # counterpart contacts, same order
    transfer_ciphers: list[bytes]       # transfer-point cell ciphertexts, verbatim


def encode_notification(note: DirectNotification | TransferNotification) -> bytes:
    w = _Writer()
    if isinstance(note, DirectNotification):
        w.u8(_SCHEME_CODE["direct"]).text(note.subject_id).text(note.peer_id)
        w.u8(_CASE_CODE[note.case]).blob(note.peer_contact)
    else:
        w.u8(_SCHEME_CODE["transfer"]).text(note.subject_id)
        w.u16(len(note.segment_offers))
        for offer_id in note.segment_offers:
            w.text(offer_id)
        w.u16(len(note.peer_contacts))
        for contact in note.peer_contacts:
            w.blob(contact)
        w.u16(len(note.transfer_ciphers))
        for blob in note.transfer_ciphers:
            w.blob(blob)
    return w.bytes()


def decode_notification(payload: bytes) -> DirectNotification | TransferNotification:
    r = _Reader(payload)
    scheme = r.u8()
    if scheme == _SCHEME_CODE["direct"]:
        subject, peer = r.text(), r.text()
        case = _CASE_NAME[r.u8()]
        contact = r.blob()
        r.done()
        return DirectNotification(subject, peer, case, contact)
    if scheme == _SCHEME_CODE["transfer"]:
        subject = r.text()
        segments = [r.text() for _ in range(r.u16())]
        contacts = [r.blob() for _ in range(r.u16())]
        ciphers = [r.blob() for _ in range(r.u16())]
        r.done()
        return TransferNotification(subject, segments, contacts, ciphers)
    raise ProtocolError(ErrorCode.MALFORMED, f"unknown scheme code {scheme}")


def encode_notification_poll(subject_ids: list[str]) -> bytes:
    """MATCH_NOTIFICATION request: ask for queued notes on one's own ids."""
    w = _Writer().u16(len(subject_ids))
    for sid in subject_ids:
        w.text(sid)
    return w.bytes()


def decode_notification_poll(payload: bytes) -> list[str]:
    r = _Reader(payload)
    ids = [r.text() for _ in range(r.u16())]
    r.done()
    return ids


def encode_notification_batch(
    notes: list[DirectNotification | TransferNotification],
) -> bytes:
    w = _Writer().u16(len(notes))
    for note in notes:
        w.blob(encode_notification(note))
    return w.bytes()


def decode_notification_batch(
    payload: bytes,
) -> list[DirectNotification | TransferNotification]:
    r = _Reader(payload)
    notes = [decode_notification(r.blob()) for _ in range(r.u16())]
    r.done()
    return notes


@dataclass
class EpochAnnounce:
    epoch: int
    salt: int
    purged_offers: int = 0
    purged_requests: int = 0


def encode_epoch_announce(a: EpochAnnounce) -> bytes:
    return _Writer().u64(a.epoch).u64(a.salt).u32(a.purged_offers).u32(a.purged_requests).bytes()


def decode_epoch_announce(payload: bytes) -> EpochAnnounce:
    r = _Reader(payload)
    out = EpochAnnounce(r.u64(), r.u64(), r.u32(), r.u32())
    r.done()
    return out


def encode_error(code: ErrorCode, message: str) -> bytes:
    return _Writer().u16(int(code)).text(message).bytes()


def decode_error(payload: bytes) -> tuple[ErrorCode, str]:
    r = _Reader(payload)
    code = ErrorCode(r.u16())
    message = r.text()
    r.done()
    return code, message


def index_blob(index: EncryptedIndex) -> bytes:
    return index.to_bytes()


def index_from_blob(blob: bytes) -> EncryptedIndex:
    try:
        return EncryptedIndex.from_bytes(blob)
    except ValueError as exc:
        raise ProtocolError(ErrorCode.MALFORMED, f"bad index blob: {exc}") from None
