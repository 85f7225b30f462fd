import os

import pytest
from hypothesis import given
from hypothesis import strategies as st

from coplay import wire

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "wire")


def golden(name: str) -> bytes:
    with open(os.path.join(GOLDEN_DIR, name), "rb") as f:
        return f.read()


def sample_event_frame():
    return {
        "type": "event",
        "src": "127.0.0.1:7101",
        "group_id": "00112233445566778899aabbccddeeff",
        "sender": "ada",
        "epoch": 2,
        "seq": 14,
        "rel": 9,
        "ack": 4,
        "sent_at": 120500,
        "payload": {
            "kind": "slide_change",
            "issuer": "ada",
            "issued_version": {"epoch": 2, "seq": 6},
            "target": 11,
        },
    }


def sample_hello_frame():
    return {
        "type": "hello",
        "src": "127.0.0.1:7103",
        "group_id": "00112233445566778899aabbccddeeff",
        "sender": "grace",
        "epoch": 0,
        "seq": 1,
        "rel": 1,
        "ack": 0,
        "sent_at": 2000,
        "payload": {"manifest_hash": "9c3e" * 16, "join_seq": 2},
    }


def sample_reply_frame():
    return {
        "type": "reply",
        "src": "127.0.0.1:7000",
        "seq": 3,
        "rel": 2,
        "ack": 2,
        "sent_at": 2100,
        "req_id": 2,
        "ok": True,
        "result": {"join_seq": 2, "leader": {"participant": "ada", "address": "127.0.0.1:7101", "join_seq": 0}},
    }


def test_frames_match_golden_bytes():
    for name, frame in [
        ("event_slide_change.frame", sample_event_frame()),
        ("hello.frame", sample_hello_frame()),
        ("registry_reply.frame", sample_reply_frame()),
    ]:
        assert wire.encode_frame(frame) == golden(name), name


def test_golden_frames_decode_back():
    blob = b"".join(
        golden(n)
        for n in ("event_slide_change.frame", "hello.frame", "registry_reply.frame")
    )
    frames = wire.decode_frames(blob)
    assert [f["type"] for f in frames] == ["event", "hello", "reply"]
    assert frames[0]["payload"]["target"] == 11


def test_decoder_handles_partial_feeds():
    data = wire.encode_frame(sample_event_frame()) * 3
    dec = wire.FrameDecoder()
    got = []
    for i in range(0, len(data), 7):
        got.extend(dec.feed(data[i : i + 7]))
    assert len(got) == 3


def test_unknown_fields_are_preserved_not_fatal():
    frame = sample_hello_frame()
    frame["extra_field_from_the_future"] = {"x": 1}
    out = wire.decode_frames(wire.encode_frame(frame))[0]
    assert out["payload"]["join_seq"] == 2
    assert out["extra_field_from_the_future"] == {"x": 1}


def test_bad_prefix_rejected():
    with pytest.raises(wire.BadFrame):
        wire.decode_frames(b"xx\n{}")
    with pytest.raises(wire.BadFrame):
        wire.decode_frames(b"999999999\n")


def test_frame_not_a_record_rejected():
    with pytest.raises(wire.BadFrame):
        wire.decode_frames(b"2\n[]")


frame_strategy = st.fixed_dictionaries(
    {
        "type": st.sampled_from(sorted(wire.SESSION_TYPES)),
        "src": st.text(min_size=1, max_size=20),
        "seq": st.integers(min_value=0, max_value=2**62),
        "payload": st.dictionaries(
            st.text(min_size=1, max_size=10),
            st.integers(-1000, 1000) | st.text(max_size=20) | st.booleans(),
            max_size=5,
        ),
    }
)


@given(frame_strategy)
def test_any_frame_round_trips(frame):
    assert wire.decode_frames(wire.encode_frame(frame)) == [frame]
