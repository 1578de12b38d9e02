"""Transactional application of changelog records to the mirror.

Records describe absolute values for the fields they carry, so applying a
record whose effect is already present changes nothing. Creations call the
filesystem once (in synchronous mode) to fill in what the record does not
carry, such as the OST set and pool of a file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

from metahood.core import DirtyMask, EntryId, EntryRecord, EntryType, HsmState, file_blocks
from metahood.ingest.records import CREATES, ChangelogRecord, RecordType
from metahood.simfs.source import EntryVanished, FsSource, SourceError
from metahood.store.sqlite import Store, Txn

log = logging.getLogger(__name__)

Mode = Literal["sync", "dirty-tag"]
Outcome = Literal["applied", "skipped"]

_ETYPE = {RecordType.MKDIR: EntryType.DIR, RecordType.CREAT: EntryType.FILE, RecordType.SLINK: EntryType.SYMLINK}
_NO_STAT = object()


@dataclass
class ApplyCounters:
    applied: int = 0
    skipped: int = 0
    warnings: int = 0
    messages: list[str] = field(default_factory=list)

    def warn(self, msg: str) -> None:
        self.warnings += 1
        if len(self.messages) < 1000:
            self.messages.append(msg)
        log.warning("ingest: %s", msg)


def needs_stat(rec: ChangelogRecord, mirrored: Optional[EntryRecord], mode: Mode) -> bool:
    """Whether applying ``rec`` wants a filesystem stat first."""
    if mode != "sync":
        return False
    if rec.rtype in CREATES:
        return mirrored is None or mirrored.parent != rec.pfid or mirrored.name != rec.name
    return rec.rtype is RecordType.RENME and mirrored is None


def fetch_stat(src: Optional[FsSource], fid: EntryId) -> Optional[EntryRecord]:
    if src is None:
        return None
    try:
        return src.stat(fid)
    except EntryVanished:
        return None
    except SourceError as exc:
        log.warning("stat %s failed: %s", fid, exc)
        return None


def touch_parent(t: Txn, pid: EntryId, ts: Optional[int], delta: int) -> bool:
    """Adjust a directory's child count and bring its times forward to ``ts``."""
    p = t.get(pid)
    if p is None or p.etype is not EntryType.DIR:
        return False
    changes: dict = {}
    if delta:
        changes["dircount"] = p.dircount + delta
    if ts is not None:
        if ts > p.mtime:
            changes["mtime"] = ts
        if ts > p.ctime:
            changes["ctime"] = ts
    if changes:
        t.upsert(p.evolve(**changes))
    return True


def _tag(e: EntryRecord, mode: Mode, bits: int = DirtyMask.NEED_STAT) -> EntryRecord:
    if mode != "dirty-tag":
        return e
    return e.evolve(dirty_mask=e.dirty_mask | int(bits))


def apply_in_txn(t: Txn, rec: ChangelogRecord, *, stat=_NO_STAT, src: Optional[FsSource] = None,
                 mode: Mode = "sync", count_activity: bool = True,
                 counters: Optional[ApplyCounters] = None) -> Outcome:
    """Apply one record inside an open transaction.

    ``stat`` is a pre-fetched filesystem view of ``rec.fid`` (None when the
    entry is gone); when omitted and needed, ``src`` is asked directly.
    """
    counters = counters if counters is not None else ApplyCounters()
    before = t.get(rec.fid)
    if stat is _NO_STAT:
        stat = fetch_stat(src, rec.fid) if needs_stat(rec, before, mode) else None
    outcome, owner = _dispatch(t, rec, before, stat, mode, counters)
    if outcome == "applied":
        counters.applied += 1
        if count_activity:
            t.add_activity(rec.rtype.value, owner, rec.jobid)
    else:
        counters.skipped += 1
    return outcome


def _dispatch(t: Txn, rec: ChangelogRecord, before: Optional[EntryRecord], stat: Optional[EntryRecord],
              mode: Mode, counters: ApplyCounters) -> tuple[Outcome, Optional[str]]:
    r = rec.rtype
    ts = rec.ts
    if r in CREATES:
        if before is not None and before.parent == rec.pfid and before.name == rec.name:
            return "applied", before.owner
        etype = _ETYPE[r]
        if stat is not None and stat.etype is not etype:
            stat = None
        size = rec.size or 0
        blocks = 0
        osts: tuple[int, ...] = ()
        pool = ""
        if stat is not None:
            osts, pool = stat.ost_set, stat.pool
            if etype is EntryType.DIR:
                size, blocks = stat.size, stat.blocks
            elif etype is EntryType.SYMLINK:
                blocks = stat.blocks
        hsm = rec.hsm_state if etype is EntryType.FILE and rec.hsm_state is not None else HsmState.NONE
        if etype is EntryType.FILE:
            blocks = file_blocks(size, hsm)
        new = EntryRecord(
            id=rec.fid, parent=rec.pfid, name=rec.name, etype=etype, size=size, blocks=blocks,
            owner=rec.owner or "root", group=rec.group or "root",
            mode=rec.mode if rec.mode is not None else 0o644,
            atime=ts, mtime=ts, ctime=ts, ost_set=osts, pool=pool, hsm=hsm,
            dircount=before.dircount if before is not None and etype is EntryType.DIR else 0,
            md_gen=before.md_gen if before is not None else 0,
        )
        new = _tag(new, mode)
        if before is not None:
            # the fid moved since it was mirrored; treat as relocation
            touch_parent(t, before.parent, ts, -1)
        t.upsert(new)
        if not touch_parent(t, rec.pfid, ts, +1):
            counters.warn(f"{r.value} {rec.fid}: parent {rec.pfid} not in mirror")
        return "applied", new.owner

    if r is RecordType.UNLNK or r is RecordType.RMDIR:
        if before is None:
            counters.warn(f"{r.value} {rec.fid}: not in mirror, skipped")
            return "skipped", None
        if before.etype is EntryType.DIR:
            if t.children(before.id):
                counters.warn(f"{r.value} {rec.fid}: directory not empty in mirror, removing subtree")
            t.remove_subtree(before.id, to_softrm=True, rm_time=ts)
        else:
            t.remove(before.id, to_softrm=before.etype is EntryType.FILE, rm_time=ts)
        touch_parent(t, before.parent, ts, -1)
        return "applied", before.owner

    if r is RecordType.RENME:
        assert rec.new_pfid is not None and rec.new_name is not None
        if before is None:
            if stat is None:
                counters.warn(f"RENME {rec.fid}: not in mirror nor filesystem, skipped")
                return "skipped", None
            new = _tag(stat.evolve(parent=rec.new_pfid, name=rec.new_name, dircount=0, md_gen=0), mode,
                       DirtyMask.NEED_STAT | DirtyMask.NEED_PATH)
            t.upsert(new)
            touch_parent(t, rec.new_pfid, ts, +1)
            return "applied", new.owner
        if before.parent == rec.new_pfid and before.name == rec.new_name:
            return "applied", before.owner
        new = before.evolve(parent=rec.new_pfid, name=rec.new_name, ctime=max(before.ctime, ts))
        new = _tag(new, mode, DirtyMask.NEED_STAT | DirtyMask.NEED_PATH)
        t.upsert(new)
        touch_parent(t, before.parent, ts, -1)
        if not touch_parent(t, rec.new_pfid, ts, +1):
            counters.warn(f"RENME {rec.fid}: new parent {rec.new_pfid} not in mirror")
        return "applied", new.owner

    if before is None:
        counters.warn(f"{r.value} {rec.fid}: not in mirror, skipped")
        return "skipped", None

    if r is RecordType.SATTR:
        new = before.evolve(
            mode=rec.mode if rec.mode is not None else before.mode,
            owner=rec.owner if rec.owner is not None else before.owner,
            group=rec.group if rec.group is not None else before.group,
            ctime=max(before.ctime, ts),
        )
    elif r is RecordType.TRUNC or r is RecordType.CLOSE:
        assert rec.size is not None
        if before.etype is EntryType.FILE:
            blocks = file_blocks(rec.size, before.hsm)
        else:
            blocks = before.blocks
        new = before.evolve(size=rec.size, blocks=blocks, mtime=max(before.mtime, ts), ctime=max(before.ctime, ts))
    elif r is RecordType.HSM:
        assert rec.hsm_state is not None
        if before.etype is not EntryType.FILE:
            counters.warn(f"HSM {rec.fid}: not a file, skipped")
            return "skipped", None
        new = before.evolve(hsm=rec.hsm_state, blocks=file_blocks(before.size, rec.hsm_state))
    else:  # pragma: no cover - enum is closed
        raise AssertionError(r)
    t.upsert(_tag(new, mode))
    return "applied", new.owner


def apply_record(store: Store, src: Optional[FsSource], rec: ChangelogRecord, *, mode: Mode = "sync",
                 count_activity: bool = True, counters: Optional[ApplyCounters] = None) -> Outcome:
    """Apply one record in its own transaction (no cursor bookkeeping)."""
    stat = fetch_stat(src, rec.fid) if needs_stat(rec, store.get(rec.fid), mode) else None
    with store.txn() as t:
        return apply_in_txn(t, rec, stat=stat, src=src, mode=mode, count_activity=count_activity,
                            counters=counters)


# ---------------------------------------------------------------------------
# Dirty-tag mode: tags and the updater
# ---------------------------------------------------------------------------


def tag_entry(store: Store, rec: ChangelogRecord) -> bool:
    """Mark ``rec.fid`` as needing a refresh; False if it is not mirrored."""
    bits = DirtyMask.NEED_STAT | (DirtyMask.NEED_PATH if rec.rtype is RecordType.RENME else 0)
    with store.txn() as t:
        e = t.get(rec.fid)
        if e is None:
            return False
        if e.dirty_mask & bits != bits:
            t.upsert(e.evolve(dirty_mask=e.dirty_mask | int(bits)))
        return True


def updater_pass(store: Store, src: FsSource, max_entries: Optional[int] = None) -> int:
    """Refresh up to ``max_entries`` tagged entries with one stat each.

    Attributes come from the filesystem; the structural facts (parent, name,
    child count) stay as the changelog left them. Entries that vanished are
    evicted, files to soft-rm.
    """
    tagged = store.iter_entries("dirty != 0")
    done = 0
    for e in tagged:
        if max_entries is not None and done >= max_entries:
            break
        try:
            fresh: Optional[EntryRecord] = src.stat(e.id)
        except EntryVanished:
            fresh = None
        except SourceError as exc:
            log.warning("updater: stat %s failed: %s", e.id, exc)
            continue
        with store.txn() as t:
            cur = t.get(e.id)
            if cur is None or not cur.dirty_mask:
                continue
            if fresh is None or fresh.etype is not cur.etype:
                t.remove(cur.id, to_softrm=cur.etype is EntryType.FILE, rm_time=src.now())
                touch_parent(t, cur.parent, None, -1)
            else:
                t.upsert(fresh.evolve(parent=cur.parent, name=cur.name, dircount=cur.dircount,
                                      md_gen=cur.md_gen, dirty_mask=0))
        done += 1
    return done
