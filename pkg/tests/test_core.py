from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from metahood.core import (
    GB,
    KB,
    MB,
    TB,
    EntryId,
    EntryRecord,
    EntryType,
    HsmEvent,
    HsmState,
    IllegalTransition,
    ParseError,
    encode_name,
    decode_name,
    file_blocks,
    format_duration,
    format_human,
    format_size,
    next_hsm_state,
    parse_duration,
    parse_entry_id,
    parse_size,
    size_bucket,
)

ROOT = EntryId(0x200000007, 1)
NULL = EntryId(0, 0)


def test_entry_id_canonical_form():
    assert parse_entry_id("0x1:0x2:0x0") == EntryId(1, 2, 0)
    assert str(EntryId(1, 2, 0)) == "0x1:0x2:0x0"
    assert parse_entry_id("0x0:0x0:0x0").is_null


@pytest.mark.parametrize("bad", ["0x1:0x2", "1:2:3", "0x1:0x2:0x3:0x4", "0xg:0x1:0x0", ""])
def test_entry_id_rejects_malformed(bad):
    with pytest.raises(ParseError):
        parse_entry_id(bad)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_entry_id_roundtrip(seq, oid, ver):
    fid = EntryId(seq, oid, ver)
    assert parse_entry_id(str(fid)) == fid


def test_sizes_are_binary():
    assert parse_size("1GB") == 1073741824
    assert parse_size("1024") == 1024
    assert parse_size("16TB") == 16 * 2**40
    assert parse_size("5M") == 5 * MB


@pytest.mark.parametrize("bad", ["1XB", "-1KB", "KB", "99999999999TB"])
def test_size_errors(bad):
    with pytest.raises(ParseError):
        parse_size(bad)


@given(st.integers(0, 2**44))
def test_size_format_parse_identity(n):
    assert parse_size(format_size(n)) == n


@given(st.integers(0, 10**9))
def test_duration_format_parse_identity(n):
    assert parse_duration(format_duration(n)) == n


def test_durations():
    assert parse_duration("30d") == 30 * 86400
    assert parse_duration("2w") == 14 * 86400
    assert parse_duration("90") == 90
    with pytest.raises(ParseError):
        parse_duration("3y")


def test_format_human_report_cells():
    assert format_human(61) == "61"
    assert format_human(4096) == "4.00 KB"
    assert format_human(12288) == "12.00 KB"
    assert format_human(int(20.2 * TB)) == "20.20 TB"
    assert format_human(1.21 * GB) == "1.21 GB"
    assert format_human(KB - 1) == "1023"


def test_size_buckets_edges():
    assert [size_bucket(s) for s in (0, 1, 1023, KB, 32 * KB, MB, 32 * MB, GB, 32 * GB, TB)] == \
        [0, 1, 1, 2, 3, 4, 5, 6, 7, 8]


def test_file_blocks_released_hold_nothing():
    assert file_blocks(1) == 1
    assert file_blocks(1024) == 2
    assert file_blocks(10**6, HsmState.RELEASED) == 0


def test_entry_invariants():
    EntryRecord(ROOT, NULL, "", EntryType.DIR)
    with pytest.raises(ValueError):
        EntryRecord(EntryId(1, 1), ROOT, "a/b", EntryType.FILE)
    with pytest.raises(ValueError):
        EntryRecord(EntryId(1, 1), ROOT, "f", EntryType.FILE, dircount=2)
    with pytest.raises(ValueError):
        EntryRecord(EntryId(1, 1), ROOT, "d", EntryType.DIR, hsm=HsmState.ARCHIVED)
    with pytest.raises(ValueError):
        EntryRecord(EntryId(1, 1), ROOT, "", EntryType.FILE)


def test_hsm_table():
    s = HsmState.NEW
    for ev in (HsmEvent.ARCHIVE_START, HsmEvent.ARCHIVE_DONE, HsmEvent.RELEASE, HsmEvent.RESTORE, HsmEvent.MODIFY):
        s = next_hsm_state(s, ev)
    assert s is HsmState.DIRTY
    with pytest.raises(IllegalTransition):
        next_hsm_state(HsmState.NEW, HsmEvent.MODIFY)
    with pytest.raises(IllegalTransition):
        next_hsm_state(HsmState.NEW, HsmEvent.RELEASE)


@given(st.lists(st.sampled_from(list(HsmEvent)), max_size=30))
def test_hsm_sequences_only_reach_legal_states(events):
    s = HsmState.NEW
    for ev in events:
        if ev is HsmEvent.UNLINK:
            continue
        try:
            nxt = next_hsm_state(s, ev)
        except IllegalTransition:
            continue
        # release only ever happens from a state with a backend copy
        if ev is HsmEvent.RELEASE:
            assert s is HsmState.ARCHIVED
        s = nxt
    assert s in set(HsmState)


@given(st.text(min_size=1, max_size=20))
def test_name_encoding_roundtrip(name):
    enc = encode_name(name)
    assert " " not in enc and "\n" not in enc
    assert decode_name(enc) == name
