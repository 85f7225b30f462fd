import os

import pytest
from hypothesis import given
from hypothesis import strategies as st

from coplay.records import (
    CorruptRecord,
    MemoryRecordLog,
    RecordWriter,
    StorageFull,
    canonical_json,
    decode_record_line,
    encode_record,
    read_record_file,
    truncate_to_clean,
)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**40), 2**40) | st.text(max_size=20),
    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=8), kids, max_size=4),
    max_leaves=12,
)


@given(json_values)
def test_record_round_trip(value):
    assert decode_record_line(encode_record(value)) == value


def test_canonical_json_is_stable():
    a = canonical_json({"b": 1, "a": [1, 2], "c": "é"})
    b = canonical_json({"c": "é", "a": [1, 2], "b": 1})
    assert a == b == '{"a":[1,2],"b":1,"c":"é"}'


def test_checksum_catches_flipped_byte():
    line = bytearray(encode_record({"n": 41}))
    line[line.index(b"4")] = ord("5")
    with pytest.raises(CorruptRecord):
        decode_record_line(bytes(line))


def test_writer_offsets_strictly_increase(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path)
    offsets = [w.append({"i": i}) for i in range(200)]
    w.close()
    assert offsets == sorted(set(offsets))
    recs, clean = read_record_file(path)
    assert clean and [r["i"] for r in recs] == list(range(200))


def test_torn_tail_is_ignored_and_truncatable(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path)
    for i in range(5):
        w.append({"i": i})
    w.close()
    with open(path, "ab") as f:
        f.write(b"1b2c3d4e {\"i\": 5, \"unfinis")
    recs, clean = read_record_file(path)
    assert not clean
    assert [r["i"] for r in recs] == [0, 1, 2, 3, 4]
    truncate_to_clean(path)
    recs2, clean2 = read_record_file(path)
    assert clean2 and len(recs2) == 5


def test_flush_policy_survives_unflushed_tail(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path, flush_every=100, flush_interval_ms=10**9)
    w.append({"i": 0}, now_ms=0)
    w.flush()
    w.append({"i": 1}, now_ms=1)
    # simulate a crash: reopen without close/flush; the OS may or may not
    # have the tail, but whatever is there must parse cleanly up to a torn line
    recs, _ = read_record_file(path)
    assert recs and recs[0] == {"i": 0}
    w.close()


def test_flush_interval_triggers(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path, flush_every=10**9, flush_interval_ms=50)
    w.append({"i": 0}, now_ms=0)
    assert w._pending == 1
    w.append({"i": 1}, now_ms=60)
    assert w._pending == 0  # interval elapsed, flushed
    w.close()


def test_storage_full(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path, max_bytes=64)
    w.append({"i": 0})
    with pytest.raises(StorageFull):
        for i in range(100):
            w.append({"i": i})
    w.close()


def test_memory_log_matches_file_offsets(tmp_path):
    path = str(tmp_path / "x.log")
    w = RecordWriter(path)
    m = MemoryRecordLog()
    objs = [{"i": i, "s": "x" * i} for i in range(20)]
    fo = [w.append(o) for o in objs]
    mo = [m.append(o) for o in objs]
    w.close()
    assert fo == mo
    assert m.size == os.path.getsize(path)
