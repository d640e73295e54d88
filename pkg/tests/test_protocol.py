import socket

import numpy as np
import pytest

from ridecloak import crypto, protocol
from ridecloak.direct import MatchCase
from ridecloak.protocol import (
    DirectNotification,
    DirectOfferPayload,
    DirectRequestPayload,
    EpochAnnounce,
    ErrorCode,
    KeyBundle,
    MsgType,
    Preference,
    PreferenceKind,
    ProtocolError,
    TransferNotification,
    TransferOfferPayload,
    TransferRequestPayload,
    ZERO_TOKEN,
)


def sample_index_blobs(count=4, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    master = crypto.generate_master_key(dim, rng)
    secrets = crypto.generate_tos_secrets(dim, rng)
    keys = crypto.KeyDeriver(master, secrets).derive("rider", rng)
    return [
        crypto.encrypt_index(np.zeros(dim), keys, rng).to_bytes() for _ in range(count)
    ]


def test_frame_round_trip():
    token = bytes(range(32))
    data = protocol.encode_frame(MsgType.SUBMIT_OFFER, 7, token, b"hello")
    frame, rest = protocol.decode_frame(data + b"extra")
    assert rest == b"extra"
    assert frame.msg_type is MsgType.SUBMIT_OFFER
    assert frame.epoch == 7
    assert frame.token == token
    assert frame.payload == b"hello"


def test_frame_header_size():
    data = protocol.encode_frame(MsgType.ERROR, 0, ZERO_TOKEN, b"")
    assert len(data) == protocol.HEADER_SIZE


def test_frame_errors():
    with pytest.raises(ValueError, match="token"):
        protocol.encode_frame(MsgType.ERROR, 0, b"short", b"")
    with pytest.raises(ProtocolError, match="short frame header"):
        protocol.decode_frame(b"\x00\x00")
    good = protocol.encode_frame(MsgType.ERROR, 0, ZERO_TOKEN, b"xy")
    with pytest.raises(ProtocolError, match="truncated"):
        protocol.decode_frame(good[:-1])
    bad_type = bytearray(good)
    bad_type[4] = 250
    with pytest.raises(ProtocolError, match="message type"):
        protocol.decode_frame(bytes(bad_type))
    bad_len = bytearray(good)
    bad_len[0:4] = (2).to_bytes(4, "little")
    with pytest.raises(ProtocolError, match="frame length"):
        protocol.decode_frame(bytes(bad_len))


def test_read_frame_over_socket():
    a, b = socket.socketpair()
    try:
        a.sendall(protocol.encode_frame(MsgType.REGISTER_USER, 3, ZERO_TOKEN, b"p"))
        frame = protocol.read_frame(b)
        assert frame.msg_type is MsgType.REGISTER_USER and frame.payload == b"p"
        a.close()
        assert protocol.read_frame(b) is None
    finally:
        b.close()


def test_read_frame_mid_stream_eof():
    a, b = socket.socketpair()
    try:
        data = protocol.encode_frame(MsgType.ERROR, 0, ZERO_TOKEN, b"payload")
        a.sendall(data[:10])
        a.close()
        with pytest.raises(ProtocolError, match="mid-frame"):
            protocol.read_frame(b)
    finally:
        b.close()


def test_register_round_trip():
    for role in ("driver", "rider"):
        assert protocol.decode_register(protocol.encode_register(role)) == role
    with pytest.raises(KeyError):
        protocol.encode_register("server")
    with pytest.raises(ProtocolError, match="role"):
        protocol.decode_register(b"\x09")


def test_ack_round_trip():
    for name in ("o1", "offre-noël", ""):
        assert protocol.decode_ack(protocol.encode_ack(name)) == name


def test_key_bundle_round_trip(knn64):
    bundle = KeyBundle(
        epoch=4, salt=99, filter_bits=320, n_hashes=4, id_bits=6, time_bits=4,
        time_slots=48, max_items=60,
        keysets={
            "direct": crypto.key_material_to_bytes(knn64.rider),
            "transfer-minus": crypto.key_material_to_bytes(knn64.rider),
        },
        tokens=[bytes([i]) * 32 for i in range(5)],
    )
    back = protocol.decode_key_bundle(protocol.encode_key_bundle(bundle))
    assert back == bundle
    keys = crypto.key_material_from_bytes(back.keysets["direct"])
    assert keys.role == "rider" and keys.dim == 64
    with pytest.raises(ValueError, match="token"):
        protocol.encode_key_bundle(
            KeyBundle(1, 1, 64, 4, 6, 4, 48, 60, {}, [b"short"])
        )


def test_direct_offer_payload_round_trip():
    payload = DirectOfferPayload(
        capacity=3,
        cases=(MatchCase.ROUTE, MatchCase.AREA),
        contact=b"call-me",
        indexes=sample_index_blobs(),
    )
    back = protocol.decode_submit_offer(protocol.encode_submit_offer(payload))
    assert back == payload
    with pytest.raises(ValueError, match="4 indexes"):
        protocol.encode_submit_offer(
            DirectOfferPayload(1, (MatchCase.AREA,), b"", sample_index_blobs(3))
        )


def test_transfer_offer_payload_round_trip():
    blobs = sample_index_blobs(6)
    payload = TransferOfferPayload(
        capacity=2,
        contact=b"",
        cells=[(blobs[0], blobs[1]), (blobs[2], blobs[3]), (blobs[4], blobs[5])],
    )
    back = protocol.decode_submit_offer(protocol.encode_submit_offer(payload))
    assert back == payload


def test_direct_request_payload_round_trip():
    payload = DirectRequestPayload(contact=b"r", indexes=sample_index_blobs(seed=1))
    back = protocol.decode_submit_request(protocol.encode_submit_request(payload))
    assert back == payload


@pytest.mark.parametrize("pref", [
    Preference(PreferenceKind.MIN_CELLS),
    Preference(PreferenceKind.MIN_CELLS_TRANSFERS),
    Preference(PreferenceKind.MAX_TRANSFERS, transfers_limit=0),
    Preference(PreferenceKind.MAX_CELLS_TRANSFERS, cells_limit=12, transfers_limit=2),
])
def test_transfer_request_payload_round_trip(pref):
    blobs = sample_index_blobs(2, seed=2)
    payload = TransferRequestPayload(b"c", pref, blobs[0], blobs[1])
    back = protocol.decode_submit_request(protocol.encode_submit_request(payload))
    assert back == payload


def test_unknown_scheme_rejected():
    with pytest.raises(ProtocolError, match="scheme"):
        protocol.decode_submit_offer(b"\x07")
    with pytest.raises(ProtocolError, match="scheme"):
        protocol.decode_submit_request(b"\x07")
    with pytest.raises(ProtocolError, match="scheme"):
        protocol.decode_notification(b"\x07")


def test_payload_underruns_rejected():
    payload = protocol.encode_submit_offer(
        DirectOfferPayload(1, (MatchCase.AREA,), b"contact", sample_index_blobs(seed=3))
    )
    with pytest.raises(ProtocolError, match="underrun"):
        protocol.decode_submit_offer(payload[:-3])
    ann = protocol.encode_epoch_announce(EpochAnnounce(1, 2, 3, 4))
    with pytest.raises(ProtocolError, match="underrun"):
        protocol.decode_epoch_announce(ann[:-1])
    with pytest.raises(ProtocolError, match="trailing"):
        protocol.decode_epoch_announce(ann + b"\x00")


def test_notification_round_trips():
    direct = DirectNotification("r4", "o2", MatchCase.EXTENDED, b"ping")
    assert protocol.decode_notification(protocol.encode_notification(direct)) == direct
    handoff = TransferNotification(
        "r9", ["o1", "o5"], [b"a", b"b"], [sample_index_blobs(1, seed=4)[0]]
    )
    assert protocol.decode_notification(protocol.encode_notification(handoff)) == handoff
    batch = [direct, handoff]
    assert protocol.decode_notification_batch(protocol.encode_notification_batch(batch)) == batch
    assert protocol.decode_notification_batch(protocol.encode_notification_batch([])) == []


def test_notification_poll_round_trip():
    ids = ["o1", "r2", "r10"]
    assert protocol.decode_notification_poll(protocol.encode_notification_poll(ids)) == ids


def test_epoch_announce_round_trip():
    ann = EpochAnnounce(epoch=9, salt=2**62, purged_offers=3, purged_requests=7)
    assert protocol.decode_epoch_announce(protocol.encode_epoch_announce(ann)) == ann


def test_error_round_trip():
    payload = protocol.encode_error(ErrorCode.STALE_EPOCH, "epoch 3 is over")
    assert protocol.decode_error(payload) == (ErrorCode.STALE_EPOCH, "epoch 3 is over")


def test_index_blob_round_trip(knn64):
    rng = np.random.default_rng(11)
    idx = crypto.encrypt_index(np.ones(knn64.dim), knn64.driver, rng)
    back = protocol.index_from_blob(protocol.index_blob(idx))
    assert back.orientation == idx.orientation
    np.testing.assert_array_equal(back.parts, idx.parts)
    with pytest.raises(ProtocolError, match="blob"):
        protocol.index_from_blob(b"\x01\x02\x03")
