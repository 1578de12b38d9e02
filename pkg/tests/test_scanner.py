from __future__ import annotations

import os

import pytest

from metahood import aggregates
from metahood.core import EntryType
from metahood.scanner import FinalizeRefused, TaskPool, ScanTask, finalize_scan, scan
from metahood.simfs import ROOT_FID, PosixSource, SimConfig, create_namespace
from metahood.store import open_store
from metahood.store.dump import entries_section


def _dump(fs, workers=4, **kw):
    st = open_store(**kw)
    scan(fs, st, workers)
    return st.dump_snapshot()


def test_scan_matches_filesystem_state(fs):
    st = open_store()
    rep = scan(fs, st, 3)
    assert rep.errors == 0
    assert rep.entries_seen == len(fs)
    # the simulator renders its own state in the same canonical format
    assert entries_section(st.dump_snapshot()) == entries_section(fs.dump())


def test_scan_worker_count_does_not_matter(fs):
    assert _dump(fs, 1) == _dump(fs, 5)


def test_partitions_union_equals_full(fs):
    full = _dump(fs)
    st = open_store()
    for i in range(3):
        scan(fs, st, 2, partition=(i, 3))
    assert st.dump_snapshot() == full


def test_partition_index_validated(fs, store):
    with pytest.raises(ValueError):
        scan(fs, store, 1, partition=(3, 3))


def test_single_worker_pops_deepest_first(fs, store):
    rep = scan(fs, store, 1, record_trace=True)
    assert rep.trace
    assert all(popped == deepest for _, popped, deepest in rep.trace)


def test_task_pool_orders_by_depth():
    pool = TaskPool()
    for d in (1, 3, 2):
        pool.push(ScanTask(ROOT_FID, d))
    assert [pool.pop().depth for _ in range(3)] == [3, 2, 1]
    for _ in range(3):
        pool.done()
    assert pool.pop() is None


def test_finalize_evicts_missing_entries():
    fs = create_namespace(SimConfig(seed=2), 200)
    st = open_store()
    scan(fs, st, 2)
    victims = fs.ids(EntryType.FILE)[:5]
    for fid in victims:
        fs.unlink(fid)
    scan(fs, st, 2)
    # nothing is evicted until finalize
    assert all(st.get(f) is not None for f in victims)
    ev = finalize_scan(st, now=123)
    assert ev.files == 5 and ev.total == 5
    assert all(st.get(f) is None for f in victims)
    assert {r.id for r in st.softrm_list()} == set(victims)
    assert all(r.rm_time == 123 for r in st.softrm_list())
    assert aggregates.verify(st) == []


def test_finalize_refused_without_all_partitions(fs, store):
    scan(fs, store, 1, partition=(0, 2))
    with pytest.raises(FinalizeRefused):
        finalize_scan(store)
    scan_store = open_store()
    with pytest.raises(FinalizeRefused):
        finalize_scan(scan_store)


def test_rescan_is_idempotent(fs, store):
    scan(fs, store, 2)
    first = store.dump_snapshot()
    scan(fs, store, 2)
    finalize_scan(store)
    assert store.dump_snapshot() == first


def test_posix_scan(tmp_path):
    (tmp_path / "a" / "b").mkdir(parents=True)
    (tmp_path / "a" / "f.txt").write_bytes(b"x" * 3000)
    (tmp_path / "top.bin").write_bytes(b"")
    os.symlink("a/f.txt", tmp_path / "link")
    st = open_store()
    rep = scan(PosixSource(tmp_path), st, 2)
    assert rep.errors == 0
    names = {e.name: e for e in st.iter_entries()}
    assert names["f.txt"].size == 3000 and names["f.txt"].etype is EntryType.FILE
    assert names["link"].etype is EntryType.SYMLINK
    assert names["a"].dircount == 2
    assert st.lookup_path("/a/b").etype is EntryType.DIR
    assert aggregates.verify(st) == []
