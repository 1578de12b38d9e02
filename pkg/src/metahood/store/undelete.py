from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Union

from metahood.core import EntryId, EntryRecord, EntryType, HsmState, ParseError, parse_entry_id
from metahood.policyspec.expr import glob_match
from metahood.simfs.backend import HsmBackend

if TYPE_CHECKING:
    from metahood.simfs.sim import SimFs
    from metahood.store.sqlite import Store, Txn

log = logging.getLogger(__name__)


@dataclass
class UndeleteReport:
    restored: list[EntryId] = field(default_factory=list)
    refused: list[tuple[EntryId, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.restored)


def _selected(store: "Store", selector: Union[EntryId, str]):
    if isinstance(selector, str):
        try:
            selector = parse_entry_id(selector)
        except ParseError:
            pass
    if isinstance(selector, EntryId):
        row = store.softrm_get(selector)
        return [row] if row else []
    return [r for r in store.softrm_list() if glob_match(selector, r.last_known_path)]


def undelete(store: "Store", backend: HsmBackend, selector: Union[EntryId, str], *,
             fs: Optional["SimFs"] = None, now: Optional[int] = None) -> UndeleteReport:
    """Bring archived soft-rm rows back to life at their last known path.

    The file comes back released: its data stays in the archive until the
    next restore. With ``fs`` the simulated filesystem is updated too and the
    touched entries are re-read from it; otherwise only the mirror changes.
    ``selector`` is an id (or its text) or a glob over last known paths.
    """
    report = UndeleteReport()
    for row in _selected(store, selector):
        if not row.archived:
            report.refused.append((row.id, "not archived"))
            continue
        key = str(row.id)
        if key not in backend:
            report.refused.append((row.id, "no archived copy in backend"))
            continue
        if store.lookup_path(row.last_known_path) is not None:
            report.refused.append((row.id, f"path occupied: {row.last_known_path}"))
            continue
        if fs is not None:
            from metahood.simfs.sim import SimError

            try:
                touched = fs.restore_entry(row.id, row.last_known_path, size=row.size, owner=row.owner,
                                           group=row.group or row.owner, mode=row.mode)
            except SimError as exc:
                report.refused.append((row.id, str(exc)))
                continue
            with store.txn() as t:
                for fid in touched:
                    rec = fs.stat(fid)
                    before = t.get(fid)
                    if before is not None:
                        rec = rec.evolve(md_gen=before.md_gen)
                    t.upsert(rec)
                t.softrm_delete(row.id)
        else:
            ts = int(time.time()) if now is None else now
            try:
                with store.txn() as t:
                    _restore_mirror_only(t, store, row, ts)
            except ValueError as exc:
                report.refused.append((row.id, str(exc)))
                continue
        report.restored.append(row.id)
        log.info("undeleted %s at %s", row.id, row.last_known_path)
    return report


def _restore_mirror_only(t: "Txn", store: "Store", row, ts: int) -> None:
    parts = [p for p in row.last_known_path.split("/") if p]
    if not parts:
        raise ValueError("cannot undelete the root")
    cur = store.root()
    if cur is None:
        raise ValueError("mirror has no root")
    for i, part in enumerate(parts[:-1]):
        nxt = t.lookup(cur.id, part)
        if nxt is None:
            # invent a directory id that cannot collide with filesystem ids
            fid = EntryId(row.id.seq, row.id.oid, 0x80000000 + i)
            nxt = EntryRecord(id=fid, parent=cur.id, name=part, etype=EntryType.DIR, size=4096, blocks=8,
                              mode=0o755, atime=ts, mtime=ts, ctime=ts)
            t.upsert(nxt)
            _bump(t, cur.id, ts)
        elif nxt.etype is not EntryType.DIR:
            raise ValueError(f"ancestor {part!r} is not a directory")
        cur = t.get(nxt.id)
        assert cur is not None
    t.upsert(EntryRecord(id=row.id, parent=cur.id, name=parts[-1], etype=EntryType.FILE, size=row.size,
                         blocks=0, owner=row.owner, group=row.group or row.owner, mode=row.mode,
                         atime=ts, mtime=ts, ctime=ts, hsm=HsmState.RELEASED))
    _bump(t, cur.id, ts)
    t.softrm_delete(row.id)


def _bump(t: "Txn", dir_id: EntryId, ts: int) -> None:
    d = t.get(dir_id)
    assert d is not None
    t.upsert(d.evolve(dircount=d.dircount + 1, mtime=max(d.mtime, ts), ctime=max(d.ctime, ts)))
