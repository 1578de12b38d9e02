"""SQLite-backed mirror: entries, soft-rm rows, ledger cells, rollups and metadata.

A :class:`Store` owns one or more shards. Each shard is one SQLite database
with its own connection and lock; entries are routed to a shard by a stable
hash of their canonical id text. With a single shard every transaction is
fully atomic. With several, a transaction commits shard by shard, so each
shard's part is atomic on its own.
"""

from __future__ import annotations

import heapq
import json
import logging
import os
import sqlite3
import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Any, Callable, Iterable, Iterator, Optional

from metahood import aggregates
from metahood.aggregates import Cell
from metahood.core import (
    N_BUCKETS,
    NULL_ID,
    EntryId,
    EntryRecord,
    EntryType,
    HsmState,
    UnresolvedPathError,
    resolve_path,
    size_bucket,
    stable_hash,
)
from metahood.store import dump as snapshot
from metahood.store.model import ShardUnavailable, SoftRmRecord, StoreError, TxnAborted, TxnConflict

log = logging.getLogger(__name__)

_HIST_COLS = ", ".join(f"h{i}" for i in range(N_BUCKETS))
_HIST_UPDATE = ", ".join(f"h{i} = h{i} + excluded.h{i}" for i in range(N_BUCKETS))

SCHEMA = f"""
CREATE TABLE IF NOT EXISTS entries (
    fid TEXT PRIMARY KEY, parent TEXT NOT NULL, name TEXT NOT NULL, etype TEXT NOT NULL,
    size INTEGER NOT NULL, blocks INTEGER NOT NULL, owner TEXT NOT NULL, grp TEXT NOT NULL,
    mode INTEGER NOT NULL, atime INTEGER NOT NULL, mtime INTEGER NOT NULL, ctime INTEGER NOT NULL,
    osts TEXT NOT NULL, pool TEXT NOT NULL, hsm TEXT NOT NULL, dircount INTEGER NOT NULL,
    md_gen INTEGER NOT NULL, dirty INTEGER NOT NULL
) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS entries_parent ON entries(parent, name);
CREATE TABLE IF NOT EXISTS softrm (
    fid TEXT PRIMARY KEY, path TEXT NOT NULL, size INTEGER NOT NULL, owner TEXT NOT NULL,
    rm_time INTEGER NOT NULL, archived INTEGER NOT NULL, grp TEXT NOT NULL, mode INTEGER NOT NULL
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS agg (
    dim TEXT NOT NULL, key TEXT NOT NULL, count INTEGER NOT NULL, volume INTEGER NOT NULL,
    spc INTEGER NOT NULL, {", ".join(f"h{i} INTEGER NOT NULL" for i in range(N_BUCKETS))},
    PRIMARY KEY (dim, key)
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS activity (
    scope TEXT NOT NULL, key TEXT NOT NULL, rtype TEXT NOT NULL, count INTEGER NOT NULL,
    PRIMARY KEY (scope, key, rtype)
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS rollup (
    fid TEXT PRIMARY KEY, count INTEGER NOT NULL, volume INTEGER NOT NULL, spc INTEGER NOT NULL
) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL) WITHOUT ROWID;
CREATE TABLE IF NOT EXISTS applied (idx INTEGER PRIMARY KEY, prev INTEGER);
CREATE INDEX IF NOT EXISTS applied_prev ON applied(prev);
"""

_ENTRY_COLS = ("fid, parent, name, etype, size, blocks, owner, grp, mode, atime, mtime, ctime, "
               "osts, pool, hsm, dircount, md_gen, dirty")
_UPSERT_SQL = f"INSERT OR REPLACE INTO entries ({_ENTRY_COLS}) VALUES ({', '.join('?' * 18)})"


@lru_cache(maxsize=1 << 17)
def _fid(text: str) -> EntryId:
    a, b, c = text.split(":")
    return EntryId(int(a, 16), int(b, 16), int(c, 16))


_ETYPES = {t.value: t for t in EntryType}
_HSM = {h.value: h for h in HsmState}


def _to_entry(row: tuple) -> EntryRecord:
    return EntryRecord(
        id=_fid(row[0]), parent=_fid(row[1]), name=row[2], etype=_ETYPES[row[3]], size=row[4],
        blocks=row[5], owner=row[6], group=row[7], mode=row[8], atime=row[9], mtime=row[10],
        ctime=row[11], ost_set=tuple(int(x) for x in row[12].split(",")) if row[12] else (),
        pool=row[13], hsm=_HSM[row[14]], dircount=row[15], md_gen=row[16], dirty_mask=row[17],
    )


def _from_entry(e: EntryRecord) -> tuple:
    return (str(e.id), str(e.parent), e.name, e.etype.value, e.size, e.blocks, e.owner, e.group,
            e.mode, e.atime, e.mtime, e.ctime, ",".join(map(str, e.ost_set)), e.pool, e.hsm.value,
            e.dircount, e.md_gen, e.dirty_mask)


def _to_softrm(row: tuple) -> SoftRmRecord:
    return SoftRmRecord(_fid(row[0]), row[1], row[2], row[3], row[4], bool(row[5]), row[6], row[7])


class Shard:
    """One SQLite database. All access goes through ``lock``."""

    def __init__(self, path: Optional[str] = None, index: int = 0):
        self.path = path
        self.index = index
        self.lock = threading.RLock()
        self.available = True
        self.rows_read = 0
        self.conn = sqlite3.connect(path or ":memory:", isolation_level=None, check_same_thread=False,
                                    timeout=30.0)
        if path:
            self.conn.execute("PRAGMA journal_mode=WAL")
            self.conn.execute("PRAGMA synchronous=NORMAL")
        self.conn.executescript(SCHEMA)

    def check(self) -> None:
        if not self.available:
            raise ShardUnavailable(f"shard {self.index} ({self.path or 'memory'}) is unavailable")

    def execute(self, sql: str, params: Iterable[Any] = ()) -> sqlite3.Cursor:
        self.check()
        return self.conn.execute(sql, tuple(params))

    def entries(self, sql: str, params: Iterable[Any] = ()) -> list[EntryRecord]:
        rows = self.execute(sql, params).fetchall()
        self.rows_read += len(rows)
        return [_to_entry(r) for r in rows]

    def close(self) -> None:
        self.conn.close()


def shard_paths(path: str, k: int) -> list[str]:
    """Shard 0 lives at ``path``; further shards get a numbered suffix."""
    return [path] + [f"{path}.shard{i}" for i in range(1, k)]


class Store:
    """The mirror. Thread safe; see the module docstring for atomicity."""

    def __init__(self, shards: list[Shard], rollup_depth: Optional[int] = None):
        if not shards:
            raise ValueError("a store needs at least one shard")
        self.shards = shards
        self.k = len(shards)
        self._local = threading.local()
        self.rollup_depth = 0
        # lock ordering: shards are always locked in index order
        with self.txn() as t:
            k_meta = t.meta_get("shards")
            if k_meta is None:
                t.meta_set("shards", self.k)
            elif int(k_meta) != self.k:
                raise StoreError(f"store was created with {k_meta} shard(s), opened with {self.k}")
            depth = t.meta_get("rollup_depth")
            if depth is None:
                depth = aggregates.DEFAULT_ROLLUP_DEPTH if rollup_depth is None else rollup_depth
                t.meta_set("rollup_depth", depth)
            elif rollup_depth is not None and int(depth) != rollup_depth:
                raise StoreError(f"store keeps rollups to depth {depth}, requested {rollup_depth}")
        self.rollup_depth = int(depth)

    # -- routing -----------------------------------------------------------

    def route(self, fid: EntryId) -> int:
        return 0 if self.k == 1 else _route(str(fid), self.k)

    def shard_for(self, fid: EntryId) -> Shard:
        return self.shards[self.route(fid)]

    @property
    def rows_read(self) -> int:
        """Entry-table rows fetched so far (instrumentation)."""
        return sum(s.rows_read for s in self.shards)

    # -- transactions --------------------------------------------------------

    @property
    def current_txn(self) -> Optional["Txn"]:
        return getattr(self._local, "txn", None)

    @contextmanager
    def txn(self) -> Iterator["Txn"]:
        """Atomic unit of work. Raising TxnAborted inside rolls back silently.

        A nested ``txn()`` on the same thread joins the outer transaction.
        """
        outer = self.current_txn
        if outer is not None:
            yield outer
            return
        locked: list[Shard] = []
        begun: list[Shard] = []
        try:
            for s in self.shards:
                s.lock.acquire()
                locked.append(s)
            for s in self.shards:
                s.check()
                try:
                    s.conn.execute("BEGIN IMMEDIATE")
                except sqlite3.OperationalError as exc:
                    raise TxnConflict(f"shard {s.index}: {exc}") from exc
                begun.append(s)
            t = Txn(self)
            self._local.txn = t
            try:
                yield t
                t._flush()
            except BaseException:
                self._local.txn = None
                for s in begun:
                    try:
                        s.conn.execute("ROLLBACK")
                    except sqlite3.Error:
                        log.exception("rollback failed on shard %d", s.index)
                begun = []
                raise
            self._local.txn = None
            for s in begun:
                s.conn.execute("COMMIT")
            begun = []
        except TxnAborted:
            pass
        finally:
            self._local.txn = None
            for s in begun:
                try:
                    s.conn.execute("ROLLBACK")
                except sqlite3.Error:
                    pass
            for s in reversed(locked):
                s.lock.release()

    def run(self, body: Callable[["Txn"], Any]) -> str:
        """Run ``body`` in a transaction; returns ``committed`` or ``aborted``."""
        done = False
        with self.txn() as t:
            body(t)
            done = True
        return "committed" if done else "aborted"

    @contextmanager
    def _read(self, shard: Shard) -> Iterator[Shard]:
        with shard.lock:
            shard.check()
            yield shard

    # -- entry reads ---------------------------------------------------------

    def get(self, fid: EntryId) -> Optional[EntryRecord]:
        with self._read(self.shard_for(fid)) as s:
            rows = s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE fid = ?", (str(fid),))
        return rows[0] if rows else None

    def children(self, fid: EntryId) -> list[EntryRecord]:
        out: list[EntryRecord] = []
        for shard in self.shards:
            with self._read(shard) as s:
                out.extend(s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE parent = ?", (str(fid),)))
        out.sort(key=lambda e: e.name)
        return out

    def lookup(self, parent: EntryId, name: str) -> Optional[EntryRecord]:
        for shard in self.shards:
            with self._read(shard) as s:
                rows = s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE parent = ? AND name = ?",
                                 (str(parent), name))
            if rows:
                return rows[0]
        return None

    def root(self) -> Optional[EntryRecord]:
        for shard in self.shards:
            with self._read(shard) as s:
                rows = s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE parent = ?", (str(NULL_ID),))
            if rows:
                return rows[0]
        return None

    def lookup_path(self, path: str) -> Optional[EntryRecord]:
        cur = self.root()
        for part in (p for p in path.split("/") if p):
            if cur is None:
                return None
            cur = self.lookup(cur.id, part)
        return cur

    def resolve_path(self, fid: EntryId) -> str:
        return resolve_path(self.get, fid)

    def iter_entries(self, where: str = "", params: Iterable[Any] = ()) -> Iterator[EntryRecord]:
        """All entries (optionally pre-filtered by SQL), sorted by canonical id text."""
        sql = f"SELECT {_ENTRY_COLS} FROM entries {('WHERE ' + where) if where else ''} ORDER BY fid"
        params = tuple(params)
        per_shard = []
        for shard in self.shards:
            with self._read(shard) as s:
                per_shard.append(s.entries(sql, params))
        if len(per_shard) == 1:
            return iter(per_shard[0])
        return heapq.merge(*per_shard, key=lambda e: str(e.id))

    def count_entries(self) -> int:
        n = 0
        for shard in self.shards:
            with self._read(shard) as s:
                n += s.execute("SELECT COUNT(*) FROM entries").fetchone()[0]
        return n

    # -- soft-rm ---------------------------------------------------------------

    def softrm_get(self, fid: EntryId) -> Optional[SoftRmRecord]:
        with self._read(self.shard_for(fid)) as s:
            row = s.execute("SELECT * FROM softrm WHERE fid = ?", (str(fid),)).fetchone()
        return _to_softrm(row) if row else None

    def softrm_list(self) -> list[SoftRmRecord]:
        per_shard = []
        for shard in self.shards:
            with self._read(shard) as s:
                per_shard.append([_to_softrm(r) for r in s.execute("SELECT * FROM softrm ORDER BY fid")])
        return list(heapq.merge(*per_shard, key=lambda r: str(r.id)))

    # -- ledger ----------------------------------------------------------------

    def agg_get(self, dim: str, key: str) -> Cell:
        total = Cell()
        for shard in self.shards:
            with self._read(shard) as s:
                row = s.execute(f"SELECT count, volume, spc, {_HIST_COLS} FROM agg WHERE dim = ? AND key = ?",
                                (dim, key)).fetchone()
            if row:
                _accumulate(total, row)
        return total

    def agg_cells(self, dim: Optional[str] = None) -> dict[tuple[str, str], Cell]:
        out: dict[tuple[str, str], Cell] = {}
        sql = f"SELECT dim, key, count, volume, spc, {_HIST_COLS} FROM agg"
        params: tuple = ()
        if dim is not None:
            sql += " WHERE dim = ?"
            params = (dim,)
        for shard in self.shards:
            with self._read(shard) as s:
                rows = s.execute(sql, params).fetchall()
            for row in rows:
                cell = out.setdefault((row[0], row[1]), Cell())
                _accumulate(cell, row[2:])
        return {k: c for k, c in out.items() if not c.is_zero()}

    def pending_tags(self) -> int:
        return self.agg_get("tags", aggregates.PENDING).count

    def rollup_get(self, fid: EntryId) -> Optional[tuple[int, int, int]]:
        total = [0, 0, 0]
        found = False
        for shard in self.shards:
            with self._read(shard) as s:
                row = s.execute("SELECT count, volume, spc FROM rollup WHERE fid = ?", (str(fid),)).fetchone()
            if row:
                found = True
                for i in range(3):
                    total[i] += row[i]
        return (total[0], total[1], total[2]) if found else None

    def rollup_rows(self) -> dict[EntryId, tuple[int, int, int]]:
        out: dict[EntryId, list[int]] = {}
        for shard in self.shards:
            with self._read(shard) as s:
                for fid, c, v, sp in s.execute("SELECT fid, count, volume, spc FROM rollup"):
                    r = out.setdefault(_fid(fid), [0, 0, 0])
                    r[0] += c
                    r[1] += v
                    r[2] += sp
        return {k: (r[0], r[1], r[2]) for k, r in out.items()}

    def activity(self) -> dict[str, dict[str, dict[str, int]]]:
        out: dict[str, dict[str, dict[str, int]]] = {}
        for shard in self.shards:
            with self._read(shard) as s:
                for scope, key, rtype, count in s.execute("SELECT scope, key, rtype, count FROM activity"):
                    per = out.setdefault(scope, {}).setdefault(key, {})
                    per[rtype] = per.get(rtype, 0) + count
        return out

    # -- metadata --------------------------------------------------------------

    def meta_get(self, key: str, default: Any = None) -> Any:
        with self._read(self.shards[0]) as s:
            row = s.execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return json.loads(row[0]) if row else default

    @property
    def cursor(self) -> int:
        return int(self.meta_get("cursor", 0))

    # -- query, dump, restore ----------------------------------------------------

    def query(self, q, now: Optional[int] = None) -> list[EntryRecord]:
        from metahood.store.query import run_query

        return run_query(self, q, now)

    def dump_snapshot(self, *, include_softrm: bool = True) -> str:
        with self._all_locked():
            return snapshot.render(self.iter_entries(), self.softrm_list(), include_softrm=include_softrm)

    def restore_snapshot(self, text: str) -> int:
        """Load a dump into an empty store, rebuilding the ledger and rollups."""
        entries, softrm = snapshot.parse(text)
        with self.txn() as t:
            if self.count_entries():
                raise StoreError("restore needs an empty store")
            for e in entries:
                self.shard_for(e.id).execute(_UPSERT_SQL, _from_entry(e))
            for r in softrm:
                t.softrm_put(r)
            for (dim, key), cell in aggregates.fold(entries).items():
                t.agg_add_cell(dim, key, cell, shard=0)
            for fid, (c, v, s) in aggregates.fold_rollups(entries, self.rollup_depth).items():
                t.rollup_add(fid, c, v, s)
        return len(entries)

    @contextmanager
    def _all_locked(self) -> Iterator[None]:
        for s in self.shards:
            s.lock.acquire()
        try:
            yield
        finally:
            for s in reversed(self.shards):
                s.lock.release()

    def close(self) -> None:
        for s in self.shards:
            s.close()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@lru_cache(maxsize=1 << 17)
def _route(text: str, k: int) -> int:
    return stable_hash(text) % k


def _accumulate(cell: Cell, row) -> None:
    cell.count += row[0]
    cell.volume += row[1]
    cell.spc += row[2]
    for i in range(N_BUCKETS):
        cell.hist[i] += row[3 + i]


class Txn:
    """Mutations of one transaction. Obtain through ``Store.txn()``.

    Entry rows are written immediately (visible to this transaction's reads);
    ledger, rollup and activity deltas are buffered and flushed at commit.
    """

    def __init__(self, store: Store):
        self.store = store
        self.rollup_depth = store.rollup_depth
        self._agg: dict[int, dict[tuple[str, str], list[int]]] = {}
        self._roll: dict[int, dict[EntryId, list[int]]] = {}
        self._act: dict[int, dict[tuple[str, str, str], int]] = {}
        self._cache: dict[EntryId, Optional[EntryRecord]] = {}
        # shard that receives ledger deltas of the entry being mutated
        self._home = 0

    # -- reads -----------------------------------------------------------------

    def get(self, fid: EntryId) -> Optional[EntryRecord]:
        try:
            return self._cache[fid]
        except KeyError:
            pass
        rows = self.store.shard_for(fid).entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE fid = ?", (str(fid),))
        rec = rows[0] if rows else None
        self._cache[fid] = rec
        return rec

    def children(self, fid: EntryId) -> list[EntryRecord]:
        out: list[EntryRecord] = []
        for s in self.store.shards:
            out.extend(s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE parent = ?", (str(fid),)))
        out.sort(key=lambda e: e.name)
        for e in out:
            self._cache[e.id] = e
        return out

    def lookup(self, parent: EntryId, name: str) -> Optional[EntryRecord]:
        for s in self.store.shards:
            rows = s.entries(f"SELECT {_ENTRY_COLS} FROM entries WHERE parent = ? AND name = ?", (str(parent), name))
            if rows:
                return rows[0]
        return None

    def resolve_path(self, fid: EntryId) -> str:
        return resolve_path(self.get, fid)

    def chain(self, fid: EntryId) -> Optional[list[EntryId]]:
        """Ids from ``fid`` up to the root, inclusive; None if the chain is broken."""
        out = []
        cur = fid
        for _ in range(4096):
            e = self.get(cur)
            if e is None:
                return None
            out.append(cur)
            if e.is_root:
                return out
            cur = e.parent
        return None

    def tree_depth(self, fid: EntryId) -> Optional[int]:
        c = self.chain(fid)
        return None if c is None else len(c) - 1

    # -- ledger hooks ------------------------------------------------------------

    def agg_add(self, dim: str, key: str, sign: int, size: int, spc: int) -> None:
        cells = self._agg.setdefault(self._home, {})
        v = cells.get((dim, key))
        if v is None:
            v = cells[(dim, key)] = [0] * (3 + N_BUCKETS)
        v[0] += sign
        v[1] += sign * size
        v[2] += sign * spc
        v[3 + size_bucket(size)] += sign

    def agg_add_cell(self, dim: str, key: str, cell: Cell, shard: int) -> None:
        cells = self._agg.setdefault(shard, {})
        v = cells.setdefault((dim, key), [0] * (3 + N_BUCKETS))
        for i, x in enumerate(cell.as_tuple()):
            v[i] += x

    def rollup_ancestors(self, parent: EntryId) -> list[EntryId]:
        if self.rollup_depth <= 0 or parent.is_null:
            return []
        c = self.chain(parent)
        if c is None:
            return []
        # c[i] sits at tree depth len(c) - 1 - i
        return c[max(0, len(c) - 1 - self.rollup_depth):]

    def rollup_add(self, fid: EntryId, count: int, volume: int, spc: int) -> None:
        rows = self._roll.setdefault(self._home, {})
        r = rows.get(fid)
        if r is None:
            r = rows[fid] = [0, 0, 0]
        r[0] += count
        r[1] += volume
        r[2] += spc

    def rollup_delete(self, fid: EntryId) -> None:
        for i, s in enumerate(self.store.shards):
            s.execute("DELETE FROM rollup WHERE fid = ?", (str(fid),))
            self._roll.get(i, {}).pop(fid, None)

    def rollup_get(self, fid: EntryId) -> tuple[int, int, int]:
        total = [0, 0, 0]
        for i, s in enumerate(self.store.shards):
            row = s.execute("SELECT count, volume, spc FROM rollup WHERE fid = ?", (str(fid),)).fetchone()
            pend = self._roll.get(i, {}).get(fid)
            for j in range(3):
                total[j] += (row[j] if row else 0) + (pend[j] if pend else 0)
        return total[0], total[1], total[2]

    def add_activity(self, rtype: str, owner: Optional[str], jobid: str) -> None:
        act = self._act.setdefault(self._home, {})
        keys = [("all", "", rtype)]
        if owner is not None:
            keys.append(("owner", owner, rtype))
        if jobid:
            keys.append(("jobid", jobid, rtype))
        for k in keys:
            act[k] = act.get(k, 0) + 1

    # -- entry writes ------------------------------------------------------------

    def upsert(self, e: EntryRecord) -> Optional[EntryRecord]:
        """Insert or replace ``e``; returns the previous row (or None).

        Moving a directory relocates its whole subtree in the rollups.
        """
        before = self.get(e.id)
        home = self.store.route(e.id)
        if before is not None and before == e:
            return before
        self._home = home
        shard = self.store.shards[home]
        if before is None:
            shard.execute("DELETE FROM softrm WHERE fid = ?", (str(e.id),))
        moved_dir = (before is not None and e.etype is EntryType.DIR and before.parent != e.parent
                     and self.rollup_depth > 0)
        if moved_dir:
            aggregates.on_delta(self, before, e, rollups=False)
            self._move_subtree(before, e)
        else:
            aggregates.on_delta(self, before, e)
        shard.execute(_UPSERT_SQL, _from_entry(e))
        self._cache[e.id] = e
        return before

    def _move_subtree(self, before: EntryRecord, after: EntryRecord) -> None:
        assert self._home == self.store.route(after.id)
        # post-order walk collecting every directory's subtree totals
        sub: dict[EntryId, list[int]] = {}
        rel: dict[EntryId, int] = {before.id: 0}
        order: list[EntryId] = []
        stack: list[tuple[EntryId, bool]] = [(before.id, False)]
        kids: dict[EntryId, list[EntryRecord]] = {}
        while stack:
            fid, done = stack.pop()
            if done:
                tot = [0, 0, 0]
                for ch in kids[fid]:
                    c, v, s = aggregates.rollup_contribution(ch)
                    tot[0] += c
                    tot[1] += v
                    tot[2] += s
                    if ch.id in sub:
                        for j in range(3):
                            tot[j] += sub[ch.id][j]
                sub[fid] = tot
                order.append(fid)
                continue
            stack.append((fid, True))
            kids[fid] = self.children(fid)
            for ch in kids[fid]:
                if ch.etype is EntryType.DIR:
                    rel[ch.id] = rel[fid] + 1
                    stack.append((ch.id, False))
        s_tot = sub[before.id]
        c, v, s = aggregates.rollup_contribution(before)
        for anc in self.rollup_ancestors(before.parent):
            self.rollup_add(anc, -(c + s_tot[0]), -(v + s_tot[1]), -(s + s_tot[2]))
        for fid in order:
            self.rollup_delete(fid)
        c, v, s = aggregates.rollup_contribution(after)
        for anc in self.rollup_ancestors(after.parent):
            self.rollup_add(anc, c + s_tot[0], v + s_tot[1], s + s_tot[2])
        pdepth = self.tree_depth(after.parent)
        if pdepth is None:
            return
        for fid in order:
            if pdepth + 1 + rel[fid] <= self.rollup_depth:
                self.rollup_add(fid, *sub[fid])

    def remove(self, fid: EntryId, *, to_softrm: bool = False, rm_time: int = 0,
               path: Optional[str] = None, archived: Optional[bool] = None) -> bool:
        """Delete an entry; files may be kept as soft-rm rows. False if absent."""
        before = self.get(fid)
        if before is None:
            return False
        self._home = self.store.route(fid)
        shard = self.store.shards[self._home]
        if to_softrm and before.etype is EntryType.FILE:
            if path is None:
                try:
                    path = self.resolve_path(fid)
                except UnresolvedPathError as exc:
                    path = "/" + exc.suffix
            if archived is None:
                archived = before.hsm in (HsmState.ARCHIVED, HsmState.RELEASED)
            self.softrm_put(SoftRmRecord(fid, path, before.size, before.owner, rm_time, archived,
                                         before.group, before.mode))
        if before.etype is EntryType.DIR and self.rollup_depth > 0:
            self.rollup_delete(fid)
        aggregates.on_delta(self, before, None)
        shard.execute("DELETE FROM entries WHERE fid = ?", (str(fid),))
        self._cache[fid] = None
        return True

    def remove_subtree(self, fid: EntryId, *, to_softrm: bool, rm_time: int) -> int:
        """Remove ``fid`` and everything below it, deepest first."""
        n = 0
        for ch in self.children(fid):
            if ch.etype is EntryType.DIR:
                n += self.remove_subtree(ch.id, to_softrm=to_softrm, rm_time=rm_time)
            else:
                n += self.remove(ch.id, to_softrm=to_softrm, rm_time=rm_time)
        return n + self.remove(fid, to_softrm=to_softrm, rm_time=rm_time)

    # -- soft-rm -----------------------------------------------------------------

    def softrm_get(self, fid: EntryId) -> Optional[SoftRmRecord]:
        row = self.store.shard_for(fid).execute("SELECT * FROM softrm WHERE fid = ?", (str(fid),)).fetchone()
        return _to_softrm(row) if row else None

    def softrm_put(self, r: SoftRmRecord) -> None:
        self.store.shard_for(r.id).execute(
            "INSERT OR REPLACE INTO softrm VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            (str(r.id), r.last_known_path, r.size, r.owner, r.rm_time, int(r.archived),
             r.group or r.owner, r.mode))

    def softrm_delete(self, fid: EntryId) -> bool:
        cur = self.store.shard_for(fid).execute("DELETE FROM softrm WHERE fid = ?", (str(fid),))
        return cur.rowcount > 0

    # -- metadata ------------------------------------------------------------------

    def meta_get(self, key: str, default: Any = None) -> Any:
        row = self.store.shards[0].execute("SELECT value FROM meta WHERE key = ?", (key,)).fetchone()
        return json.loads(row[0]) if row else default

    def meta_set(self, key: str, value: Any) -> None:
        self.store.shards[0].execute("INSERT OR REPLACE INTO meta VALUES (?, ?)", (key, json.dumps(value)))

    def execute(self, sql: str, params: Iterable[Any] = (), shard: int = 0) -> sqlite3.Cursor:
        """Raw statement on one shard (bookkeeping tables only)."""
        return self.store.shards[shard].execute(sql, params)

    # -- commit ------------------------------------------------------------------

    def _flush(self) -> None:
        agg_sql = (f"INSERT INTO agg (dim, key, count, volume, spc, {_HIST_COLS}) "
                   f"VALUES ({', '.join('?' * (5 + N_BUCKETS))}) ON CONFLICT (dim, key) DO UPDATE SET "
                   f"count = count + excluded.count, volume = volume + excluded.volume, "
                   f"spc = spc + excluded.spc, {_HIST_UPDATE}")
        for i, cells in self._agg.items():
            rows = [(d, k, *v) for (d, k), v in cells.items() if any(v)]
            if rows:
                self.store.shards[i].conn.executemany(agg_sql, rows)
        roll_sql = ("INSERT INTO rollup (fid, count, volume, spc) VALUES (?, ?, ?, ?) ON CONFLICT (fid) DO UPDATE "
                    "SET count = count + excluded.count, volume = volume + excluded.volume, spc = spc + excluded.spc")
        for i, rows in self._roll.items():
            data = [(str(f), *v) for f, v in rows.items() if any(v)]
            if data:
                self.store.shards[i].conn.executemany(roll_sql, data)
        act_sql = ("INSERT INTO activity (scope, key, rtype, count) VALUES (?, ?, ?, ?) ON CONFLICT "
                   "(scope, key, rtype) DO UPDATE SET count = count + excluded.count")
        for i, act in self._act.items():
            if act:
                self.store.shards[i].conn.executemany(act_sql, [(*k, v) for k, v in act.items()])
        self._agg.clear()
        self._roll.clear()
        self._act.clear()


def open_store(path: Optional[str | os.PathLike] = None, *, shards: Optional[int] = None,
               rollup_depth: Optional[int] = None) -> Store:
    """Open (creating if needed) a store at ``path``; in-memory when path is None.

    With ``shards`` unset, an existing store's shard count is reused.
    """
    if path is None:
        return Store([Shard(None, i) for i in range(shards or 1)], rollup_depth)
    path = os.fspath(path)
    if shards is None:
        shards = _recorded_shards(path) or 1
    if shards < 1:
        raise ValueError("shard count must be >= 1")
    return Store([Shard(p, i) for i, p in enumerate(shard_paths(path, shards))], rollup_depth)


def _recorded_shards(path: str) -> Optional[int]:
    if not os.path.exists(path):
        return None
    conn = sqlite3.connect(path)
    try:
        row = conn.execute("SELECT value FROM meta WHERE key = 'shards'").fetchone()
    except sqlite3.Error:
        return None
    finally:
        conn.close()
    return int(json.loads(row[0])) if row else None


def sharded(stores: list[Store]) -> Store:
    """Compose single-shard stores into one store routed by stable fid hash.

    The stores must be empty and are consumed (use the returned store).
    """
    if not stores:
        raise ValueError("k must be >= 1")
    shards: list[Shard] = []
    depth = stores[0].rollup_depth
    for i, st in enumerate(stores):
        if st.k != 1:
            raise StoreError("only single-shard stores can be composed")
        if st.count_entries():
            raise StoreError("composed stores must start empty")
        if st.rollup_depth != depth:
            raise StoreError("composed stores disagree on rollup depth")
        sh = st.shards[0]
        sh.index = i
        with sh.lock:
            sh.execute("DELETE FROM meta WHERE key = 'shards'")
        shards.append(sh)
    return Store(shards, depth)
