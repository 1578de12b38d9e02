"""Deterministic simulated Lustre-like filesystem.

The namespace, OST allocation and HSM state live in memory. Every mutation
made through :func:`apply_op` (or the SimFs convenience methods) appends
changelog records with strictly increasing indices.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from metahood.core import (
    GB,
    MB,
    NULL_ID,
    EntryId,
    EntryRecord,
    EntryType,
    HsmEvent,
    HsmState,
    IllegalTransition,
    MetahoodError,
    file_blocks,
    next_hsm_state,
    parse_entry_id,
)
from metahood.ingest.records import ChangelogRecord, RecordType
from metahood.simfs.backend import HsmBackend
from metahood.simfs.source import EntryVanished, OstStat
from metahood.store import dump as snapshot

ROOT_FID = EntryId(0x200000007, 0x1, 0x0)
FIRST_SEQ = 0x200000400
DIR_SIZE = 4096
JOBIDS = ("", "", "job.1001", "job.1002", "job.2040", "make.17", "dd.3")


class SimError(MetahoodError):
    pass


class SimCapacityError(SimError):
    """An allocation would exceed an OST's capacity."""


class InapplicableOp(SimError):
    """The workload op does not apply to the current state; nothing was emitted."""


@dataclass
class SimConfig:
    seed: int = 0
    ost_count: int = 8
    ost_capacity: int = 64 * GB
    pools: dict[str, tuple[int, ...]] = field(default_factory=dict)
    stripe_count: int = 2
    owners: tuple[tuple[str, str, float], ...] = (
        ("foo", "foo", 4.0),
        ("bar", "users", 2.0),
        ("baz", "users", 1.0),
        ("root", "root", 1.0),
    )
    fanout: float = 16.0
    symlink_ratio: float = 0.03
    max_file_size: int = 64 * MB
    hsm: bool = True
    base_time: int = 1_700_000_000

    def __post_init__(self) -> None:
        if self.stripe_count < 1:
            raise ValueError("stripe_count must be >= 1")
        if self.ost_count < 1:
            raise ValueError("ost_count must be >= 1")
        self.pools = {k: tuple(v) for k, v in self.pools.items()}
        for name, osts in self.pools.items():
            if not osts or any(not 0 <= i < self.ost_count for i in osts):
                raise ValueError(f"pool {name!r} references unknown OSTs {osts}")
        self.owners = tuple((o, g, float(w)) for o, g, w in self.owners)


@dataclass
class _Node:
    id: EntryId
    parent: EntryId
    name: str
    etype: EntryType
    size: int = 0
    owner: str = "root"
    group: str = "root"
    mode: int = 0o644
    atime: int = 0
    mtime: int = 0
    ctime: int = 0
    osts: tuple[int, ...] = ()
    pool: str = ""
    hsm: HsmState = HsmState.NONE
    content: str = ""
    version: int = 0
    # directory default pool, inherited by files created below it
    default_pool: str = ""
    children: Optional[dict[str, EntryId]] = None


@dataclass(frozen=True)
class WorkloadOp:
    kind: str
    target: Optional[EntryId] = None
    parent: Optional[EntryId] = None
    name: Optional[str] = None
    size: Optional[int] = None
    mode: Optional[int] = None
    owner: Optional[str] = None
    group: Optional[str] = None
    event: Optional[HsmEvent] = None
    jobid: str = ""


OP_KINDS = ("mkdir", "create", "symlink", "write", "setattr", "rename", "unlink", "rmdir", "hsm_event")

DEFAULT_MIX: dict[str, float] = {
    "create": 30, "mkdir": 5, "symlink": 2, "write": 25, "setattr": 10,
    "rename": 8, "unlink": 12, "rmdir": 3, "hsm_event": 5,
}


def _content_hash(fid: EntryId, version: int) -> str:
    return hashlib.sha256(f"{fid}/{version}".encode()).hexdigest()[:16]


class SimFs:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.backend = HsmBackend()
        self.clock = cfg.base_time
        self.next_index = 1
        self.changelog: list[ChangelogRecord] = []
        self.stat_calls = 0
        self._lock = threading.RLock()
        self._nodes: dict[EntryId, _Node] = {}
        self._by_type: dict[EntryType, list[EntryId]] = {t: [] for t in EntryType}
        self._pos: dict[EntryId, int] = {}
        self._ost_used = [0] * cfg.ost_count
        self._rr: dict[str, int] = {}
        self._seq = FIRST_SEQ
        self._oid = 0
        root = _Node(ROOT_FID, NULL_ID, "", EntryType.DIR, size=DIR_SIZE, mode=0o755,
                     atime=cfg.base_time, mtime=cfg.base_time, ctime=cfg.base_time, children={})
        self._nodes[ROOT_FID] = root

    # -- FsSource -----------------------------------------------------------

    def root(self) -> EntryId:
        return ROOT_FID

    def readdir(self, dir_id: EntryId) -> list[tuple[str, EntryId]]:
        with self._lock:
            node = self._nodes.get(dir_id)
            if node is None:
                raise EntryVanished(dir_id)
            if node.children is None:
                raise SimError(f"not a directory: {dir_id}")
            return list(node.children.items())

    def stat(self, entry_id: EntryId) -> EntryRecord:
        with self._lock:
            self.stat_calls += 1
            node = self._nodes.get(entry_id)
            if node is None:
                raise EntryVanished(entry_id)
            return self._record(node)

    def ost_usage(self) -> list[OstStat]:
        with self._lock:
            owner_pool = {}
            for pname in sorted(self.cfg.pools):
                for i in self.cfg.pools[pname]:
                    owner_pool.setdefault(i, pname)
            return [OstStat(i, self.cfg.ost_capacity, self._ost_used[i], owner_pool.get(i, ""))
                    for i in range(self.cfg.ost_count)]

    def now(self) -> int:
        return self.clock

    # -- inspection ---------------------------------------------------------

    def _record(self, n: _Node) -> EntryRecord:
        if n.etype is EntryType.FILE:
            blocks = file_blocks(n.size, n.hsm)
        elif n.etype is EntryType.DIR:
            blocks = DIR_SIZE // 512
        else:
            blocks = 0
        return EntryRecord(
            id=n.id, parent=n.parent, name=n.name, etype=n.etype, size=n.size, blocks=blocks,
            owner=n.owner, group=n.group, mode=n.mode, atime=n.atime, mtime=n.mtime, ctime=n.ctime,
            ost_set=n.osts, pool=n.pool, hsm=n.hsm,
            dircount=len(n.children) if n.children is not None else 0,
        )

    def __len__(self) -> int:
        """Number of entries, root excluded."""
        return len(self._nodes) - 1

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._nodes

    def entries(self) -> list[EntryRecord]:
        with self._lock:
            return [self._record(n) for n in self._nodes.values()]

    def ids(self, etype: EntryType | None = None) -> list[EntryId]:
        with self._lock:
            if etype is None:
                return list(self._nodes)
            return list(self._by_type[etype])

    def content_hash(self, entry_id: EntryId) -> str:
        with self._lock:
            node = self._node(entry_id)
            return node.content

    def path_of(self, entry_id: EntryId) -> str:
        with self._lock:
            names = []
            node = self._node(entry_id)
            while not node.parent.is_null:
                names.append(node.name)
                node = self._nodes[node.parent]
            return "/" + "/".join(reversed(names))

    def lookup(self, path: str) -> Optional[EntryId]:
        with self._lock:
            node = self._nodes[ROOT_FID]
            for part in (p for p in path.split("/") if p):
                if node.children is None or part not in node.children:
                    return None
                node = self._nodes[node.children[part]]
            return node.id

    def allocation(self, entry_id: EntryId) -> dict[int, int]:
        """Bytes held by the file on each of its OSTs."""
        with self._lock:
            return self._alloc(self._node(entry_id))

    def dump(self) -> str:
        """Filesystem state in the mirror's snapshot format."""
        with self._lock:
            recs = sorted((self._record(n) for n in self._nodes.values()), key=lambda r: str(r.id))
        return snapshot.render(recs, ())

    def set_atime(self, entry_id: EntryId, atime: int) -> None:
        """Simulate a read access. Access times are not changelogged."""
        with self._lock:
            self._node(entry_id).atime = atime

    # -- internals ----------------------------------------------------------

    def _node(self, entry_id: EntryId) -> _Node:
        node = self._nodes.get(entry_id)
        if node is None:
            raise InapplicableOp(f"no such entry: {entry_id}")
        return node

    def _new_fid(self) -> EntryId:
        self._oid += 1
        if self._oid > 0xFFFFFFFF:
            self._seq += 1
            self._oid = 1
        return EntryId(self._seq, self._oid, 0)

    def _tick(self, dt: int = 1) -> int:
        self.clock += dt
        return self.clock

    def _track(self, node: _Node) -> None:
        lst = self._by_type[node.etype]
        self._pos[node.id] = len(lst)
        lst.append(node.id)

    def _untrack(self, node: _Node) -> None:
        lst = self._by_type[node.etype]
        i = self._pos.pop(node.id)
        last = lst.pop()
        if last != node.id:
            lst[i] = last
            self._pos[last] = i

    @staticmethod
    def _alloc(node: _Node) -> dict[int, int]:
        if node.etype is not EntryType.FILE or node.hsm is HsmState.RELEASED or not node.osts:
            return {}
        per = math.ceil(node.size / len(node.osts))
        return {i: per for i in node.osts}

    def _reallocate(self, node: _Node, old: dict[int, int]) -> None:
        new = self._alloc(node)
        for i in set(old) | set(new):
            if self._ost_used[i] - old.get(i, 0) + new.get(i, 0) > self.cfg.ost_capacity:
                raise SimCapacityError(f"OST {i} would exceed capacity")
        for i in set(old) | set(new):
            self._ost_used[i] += new.get(i, 0) - old.get(i, 0)

    def _place(self, pool: str) -> tuple[int, ...]:
        cands = list(self.cfg.pools[pool]) if pool else list(range(self.cfg.ost_count))
        n = min(self.cfg.stripe_count, len(cands))
        start = self._rr.get(pool, 0)
        self._rr[pool] = start + 1
        return tuple(cands[(start + j) % len(cands)] for j in range(n))

    def _emit(self, rtype: RecordType, node: _Node, ts: int, jobid: str = "", **fields) -> ChangelogRecord:
        rec = ChangelogRecord(index=self.next_index, rtype=rtype, ts=ts, fid=node.id,
                              pfid=fields.pop("pfid", node.parent), name=fields.pop("name", node.name),
                              jobid=jobid, **fields)
        self.next_index += 1
        self.changelog.append(rec)
        return rec

    def _touch(self, dir_id: EntryId, ts: int) -> None:
        d = self._nodes[dir_id]
        d.mtime = max(d.mtime, ts)
        d.ctime = max(d.ctime, ts)

    def _check_new_child(self, parent: EntryId, name: str) -> _Node:
        p = self._node(parent)
        if p.children is None:
            raise InapplicableOp(f"parent {parent} is not a directory")
        if not name or "/" in name:
            raise InapplicableOp(f"invalid name {name!r}")
        if name in p.children:
            raise InapplicableOp(f"name {name!r} exists under {parent}")
        return p

    def _add(self, p: _Node, node: _Node) -> None:
        self._nodes[node.id] = node
        assert p.children is not None
        p.children[node.name] = node.id
        self._track(node)

    # -- mutations (each returns the records it emitted) ---------------------

    def mkdir(self, parent: EntryId, name: str, *, owner: str = "root", group: str = "root",
              mode: int = 0o755, jobid: str = "", ts: int | None = None,
              emit: bool = True) -> list[ChangelogRecord]:
        with self._lock:
            p = self._check_new_child(parent, name)
            t = self._tick() if ts is None else ts
            node = _Node(self._new_fid(), parent, name, EntryType.DIR, size=DIR_SIZE, owner=owner,
                         group=group, mode=mode, atime=t, mtime=t, ctime=t, children={},
                         default_pool=p.default_pool)
            self._add(p, node)
            self._touch(parent, t)
            if not emit:
                return []
            return [self._emit(RecordType.MKDIR, node, t, jobid, owner=owner, group=group, mode=mode)]

    def create(self, parent: EntryId, name: str, *, size: int = 0, owner: str = "root",
               group: str = "root", mode: int = 0o644, pool: str | None = None, jobid: str = "",
               ts: int | None = None, emit: bool = True) -> list[ChangelogRecord]:
        with self._lock:
            p = self._check_new_child(parent, name)
            if pool is None:
                pool = p.default_pool
            if pool and pool not in self.cfg.pools:
                raise InapplicableOp(f"unknown pool {pool!r}")
            t = self._tick() if ts is None else ts
            fid = self._new_fid()
            hsm = HsmState.NEW if self.cfg.hsm else HsmState.NONE
            node = _Node(fid, parent, name, EntryType.FILE, size=0, owner=owner, group=group, mode=mode,
                         atime=t, mtime=t, ctime=t, pool=pool, hsm=hsm, content=_content_hash(fid, 0))
            rr_before = dict(self._rr)
            node.osts = self._place(pool)
            if size:
                node.size = size
                try:
                    self._reallocate(node, {})
                except SimCapacityError:
                    self._rr = rr_before
                    raise
                node.version = 1
                node.content = _content_hash(fid, 1)
            self._add(p, node)
            self._touch(parent, t)
            if not emit:
                return []
            recs = [self._emit(RecordType.CREAT, node, t, jobid, owner=owner, group=group, mode=mode,
                               hsm_state=hsm if self.cfg.hsm else None)]
            if size:
                recs.append(self._emit(RecordType.CLOSE, node, t, jobid, size=size))
            return recs

    def symlink(self, parent: EntryId, name: str, target: str, *, owner: str = "root",
                group: str = "root", jobid: str = "", ts: int | None = None,
                emit: bool = True) -> list[ChangelogRecord]:
        with self._lock:
            p = self._check_new_child(parent, name)
            t = self._tick() if ts is None else ts
            node = _Node(self._new_fid(), parent, name, EntryType.SYMLINK, size=len(target), owner=owner,
                         group=group, mode=0o777, atime=t, mtime=t, ctime=t)
            self._add(p, node)
            self._touch(parent, t)
            if not emit:
                return []
            return [self._emit(RecordType.SLINK, node, t, jobid, owner=owner, group=group, mode=0o777,
                               size=len(target))]

    def write(self, fid: EntryId, new_size: int, *, jobid: str = "") -> list[ChangelogRecord]:
        """Rewrite a file's content at ``new_size`` (grow emits CLOSE, shrink TRUNC)."""
        with self._lock:
            node = self._node(fid)
            if node.etype is not EntryType.FILE:
                raise InapplicableOp("write on a non-file")
            if node.hsm is HsmState.ARCHIVING:
                raise InapplicableOp("write while archiving")
            if new_size < 0:
                raise InapplicableOp("negative size")
            t = self._tick()
            recs: list[ChangelogRecord] = []
            old_alloc = self._alloc(node)
            old = (node.size, node.hsm)
            if node.hsm is HsmState.RELEASED:
                # implicit restore before the data is touched
                node.hsm = HsmState.ARCHIVED
            node.size = new_size
            try:
                self._reallocate(node, old_alloc)
            except SimCapacityError:
                node.size, node.hsm = old
                raise InapplicableOp("no space left for write") from None
            if old[1] is HsmState.RELEASED:
                recs.append(self._emit(RecordType.HSM, node, t, jobid, hsm_state=HsmState.ARCHIVED))
            node.version += 1
            node.content = _content_hash(fid, node.version)
            node.mtime = node.ctime = t
            rtype = RecordType.TRUNC if new_size < old[0] else RecordType.CLOSE
            recs.append(self._emit(rtype, node, t, jobid, size=new_size))
            if node.hsm is HsmState.ARCHIVED:
                node.hsm = next_hsm_state(node.hsm, HsmEvent.MODIFY)
                recs.append(self._emit(RecordType.HSM, node, t, jobid, hsm_state=node.hsm))
            return recs

    def setattr(self, fid: EntryId, *, mode: int | None = None, owner: str | None = None,
                group: str | None = None, jobid: str = "") -> list[ChangelogRecord]:
        with self._lock:
            node = self._node(fid)
            if mode is None and owner is None and group is None:
                raise InapplicableOp("setattr without attributes")
            t = self._tick()
            if mode is not None:
                node.mode = mode
            if owner is not None:
                node.owner = owner
            if group is not None:
                node.group = group
            node.ctime = t
            return [self._emit(RecordType.SATTR, node, t, jobid, mode=node.mode, owner=node.owner,
                               group=node.group)]

    def rename(self, fid: EntryId, new_parent: EntryId, new_name: str, *,
               jobid: str = "") -> list[ChangelogRecord]:
        with self._lock:
            node = self._node(fid)
            if node.parent.is_null:
                raise InapplicableOp("cannot rename the root")
            np = self._check_new_child(new_parent, new_name)
            if node.etype is EntryType.DIR:
                cur: Optional[EntryId] = new_parent
                while cur is not None and not cur.is_null:
                    if cur == fid:
                        raise InapplicableOp("cannot move a directory below itself")
                    cur = self._nodes[cur].parent
            t = self._tick()
            old_parent, old_name = node.parent, node.name
            op = self._nodes[old_parent]
            assert op.children is not None and np.children is not None
            del op.children[old_name]
            np.children[new_name] = fid
            node.parent, node.name = new_parent, new_name
            node.ctime = t
            self._touch(old_parent, t)
            self._touch(new_parent, t)
            return [self._emit(RecordType.RENME, node, t, jobid, pfid=old_parent, name=old_name,
                               new_pfid=new_parent, new_name=new_name)]

    def unlink(self, fid: EntryId, *, jobid: str = "") -> list[ChangelogRecord]:
        with self._lock:
            node = self._node(fid)
            if node.etype is EntryType.DIR:
                raise InapplicableOp("unlink on a directory")
            t = self._tick()
            self._reallocate_free(node)
            self._drop(node, t)
            return [self._emit(RecordType.UNLNK, node, t, jobid)]

    def rmdir(self, fid: EntryId, *, jobid: str = "") -> list[ChangelogRecord]:
        with self._lock:
            node = self._node(fid)
            if node.etype is not EntryType.DIR or node.parent.is_null:
                raise InapplicableOp("rmdir needs a non-root directory")
            if node.children:
                raise InapplicableOp("directory not empty")
            t = self._tick()
            self._drop(node, t)
            return [self._emit(RecordType.RMDIR, node, t, jobid)]

    def _reallocate_free(self, node: _Node) -> None:
        for i, n in self._alloc(node).items():
            self._ost_used[i] -= n

    def _drop(self, node: _Node, t: int) -> None:
        p = self._nodes[node.parent]
        assert p.children is not None
        del p.children[node.name]
        del self._nodes[node.id]
        self._untrack(node)
        self._touch(node.parent, t)

    def hsm_event(self, fid: EntryId, event: HsmEvent, *, jobid: str = "") -> list[ChangelogRecord]:
        """Drive the copytool side of HSM for one file."""
        if event is HsmEvent.MODIFY:
            with self._lock:
                node = self._node(fid)
                if (node.hsm, event) not in _LEGAL:
                    raise IllegalTransition(node.hsm, event)
                return self.write(fid, node.size, jobid=jobid)
        if event is HsmEvent.UNLINK:
            return self.unlink(fid, jobid=jobid)
        with self._lock:
            node = self._node(fid)
            if node.etype is not EntryType.FILE:
                raise InapplicableOp("hsm event on a non-file")
            new_state = next_hsm_state(node.hsm, event)
            old_alloc = self._alloc(node)
            old_state = node.hsm
            content = self.backend.fetch(str(fid)) if event is HsmEvent.RESTORE else node.content
            node.hsm = new_state
            if event is HsmEvent.RESTORE:
                try:
                    self._reallocate(node, old_alloc)
                except SimCapacityError:
                    node.hsm = old_state
                    raise
                node.content = content
            elif event is HsmEvent.RELEASE:
                self._reallocate(node, old_alloc)
            elif event is HsmEvent.ARCHIVE_DONE:
                hsm_backend_store(self, fid)
            t = self._tick()
            return [self._emit(RecordType.HSM, node, t, jobid, hsm_state=new_state)]

    def restore_entry(self, fid: EntryId, path: str, *, size: int, owner: str, group: str,
                      mode: int = 0o644) -> list[EntryId]:
        """Re-create a deleted, archived file in the released state (undelete).

        Missing ancestor directories are created. Returns the ids whose
        attributes changed so the caller can re-stat them.
        """
        with self._lock:
            parts = [p for p in path.split("/") if p]
            if not parts:
                raise InapplicableOp("cannot undelete the root")
            if fid in self._nodes:
                raise InapplicableOp(f"{fid} already exists")
            if self.lookup(path) is not None:
                raise InapplicableOp(f"path occupied: {path}")
            content = self.backend.fetch(str(fid))
            touched: list[EntryId] = []
            cur = ROOT_FID
            for part in parts[:-1]:
                node = self._nodes[cur]
                assert node.children is not None
                if part not in node.children:
                    self.mkdir(cur, part)
                    touched.extend([cur, node.children[part]])
                nxt = node.children[part]
                if self._nodes[nxt].children is None:
                    raise InapplicableOp(f"ancestor {part!r} is not a directory")
                cur = nxt
            p = self._nodes[cur]
            t = self._tick()
            node = _Node(fid, cur, parts[-1], EntryType.FILE, size=size, owner=owner, group=group,
                         mode=mode, atime=t, mtime=t, ctime=t, osts=self._place(p.default_pool),
                         pool=p.default_pool, hsm=HsmState.RELEASED, content=content)
            self._add(p, node)
            self._touch(cur, t)
            self._emit(RecordType.CREAT, node, t, owner=owner, group=group, mode=mode,
                       hsm_state=HsmState.RELEASED)
            if size:
                self._emit(RecordType.CLOSE, node, t, size=size)
            touched.extend([cur, fid])
            return list(dict.fromkeys(touched))

    # -- persistence --------------------------------------------------------

    def to_state(self) -> dict:
        with self._lock:
            cfg = asdict(self.cfg)
            cfg["pools"] = {k: list(v) for k, v in self.cfg.pools.items()}
            nodes = []
            for n in self._nodes.values():
                nodes.append([str(n.id), str(n.parent), n.name, n.etype.value, n.size, n.owner, n.group,
                              n.mode, n.atime, n.mtime, n.ctime, list(n.osts), n.pool, n.hsm.value,
                              n.content, n.version, n.default_pool,
                              None if n.children is None else list(n.children)])
            return {
                "format": "metahood-simfs-1",
                "config": cfg,
                "clock": self.clock,
                "next_index": self.next_index,
                "seq": self._seq,
                "oid": self._oid,
                "rr": self._rr,
                "ost_used": self._ost_used,
                "nodes": nodes,
                "by_type": {t.value: [str(i) for i in ids] for t, ids in self._by_type.items()},
                "backend": self.backend.to_dict(),
            }

    @classmethod
    def from_state(cls, state: Mapping) -> "SimFs":
        if state.get("format") != "metahood-simfs-1":
            raise SimError("not a simulated filesystem state file")
        raw = dict(state["config"])
        raw["owners"] = tuple(tuple(o) for o in raw["owners"])
        fs = cls(SimConfig(**raw))
        fs.clock = state["clock"]
        fs.next_index = state["next_index"]
        fs._seq, fs._oid = state["seq"], state["oid"]
        fs._rr = dict(state["rr"])
        fs._ost_used = list(state["ost_used"])
        fs._nodes = {}
        listings: list[tuple[_Node, list[str]]] = []
        for row in state["nodes"]:
            (fid, parent, name, etype, size, owner, group, mode, atime, mtime, ctime, osts, pool, hsm,
             content, version, default_pool, children) = row
            node = _Node(parse_entry_id(fid), parse_entry_id(parent), name, EntryType(etype), size, owner,
                         group, mode, atime, mtime, ctime, tuple(osts), pool, HsmState(hsm), content,
                         version, default_pool, None if children is None else {})
            fs._nodes[node.id] = node
            if children is not None:
                listings.append((node, children))
        index = {(n.parent, n.name): n.id for n in fs._nodes.values()}
        for node, names in listings:
            node.children = {n: index[(node.id, n)] for n in names}
        fs._by_type = {t: [parse_entry_id(i) for i in state["by_type"][t.value]] for t in EntryType}
        fs._pos = {i: k for ids in fs._by_type.values() for k, i in enumerate(ids)}
        fs.backend = HsmBackend(state["backend"])
        return fs

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_state(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "SimFs":
        return cls.from_state(json.loads(Path(path).read_text()))

    def write_changelog(self, path: str | Path, records: Iterable[ChangelogRecord] | None = None) -> int:
        recs = self.changelog if records is None else list(records)
        with open(path, "w", encoding="utf-8") as fh:
            for r in recs:
                fh.write(r.format() + "\n")
        return len(recs)


_LEGAL = {(HsmState.ARCHIVED, HsmEvent.MODIFY), (HsmState.RELEASED, HsmEvent.MODIFY)}


def hsm_backend_store(fs: SimFs, entry_id: EntryId) -> str:
    """Copy the file's current content hash into the archive; returns the object key."""
    with fs._lock:
        node = fs._node(entry_id)
        if node.etype is not EntryType.FILE:
            raise InapplicableOp("only files can be archived")
        return fs.backend.store(str(entry_id), node.content)


def hsm_backend_fetch(fs: SimFs, key: str) -> str:
    return fs.backend.fetch(key)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _pick_owner(rng: random.Random, owners) -> tuple[str, str]:
    o, g, _ = rng.choices(owners, weights=[w for _, _, w in owners])[0]
    return o, g


def _random_size(rng: random.Random, cfg: SimConfig) -> int:
    if rng.random() < 0.05:
        return 0
    return int(2 ** rng.uniform(0, math.log2(cfg.max_file_size)))


_EXTS = (".dat", ".tar", ".log", ".h5", ".txt", ".out")


def create_namespace(cfg: SimConfig, n_entries: int) -> SimFs:
    """Populate a fresh filesystem with ``n_entries`` entries (root excluded).

    The initial population predates changelog registration, so no records
    are emitted; access times are spread over the year before ``base_time``.
    """
    if n_entries < 1:
        raise ValueError("n_entries must be >= 1")
    fs = SimFs(cfg)
    rng = random.Random(cfg.seed)
    dirs = [ROOT_FID]
    pools = sorted(cfg.pools)
    p_dir = 1.0 / cfg.fanout
    for i in range(n_entries):
        parent = rng.choice(dirs)
        owner, group = _pick_owner(rng, cfg.owners)
        atime = cfg.base_time - rng.randrange(0, 365 * 86400)
        mtime = atime - rng.randrange(0, 30 * 86400)
        r = rng.random()
        if r < p_dir:
            fs.mkdir(parent, f"d{i}", owner=owner, group=group, mode=0o755, ts=mtime, emit=False)
            fid = fs._by_type[EntryType.DIR][-1]
            node = fs._nodes[fid]
            if pools and parent == ROOT_FID and rng.random() < 0.5:
                node.default_pool = rng.choice(pools)
            dirs.append(fid)
        elif r < p_dir + cfg.symlink_ratio:
            fs.symlink(parent, f"l{i}", f"target-{rng.randrange(10**6)}", owner=owner, group=group,
                       ts=mtime, emit=False)
            node = fs._nodes[fs._by_type[EntryType.SYMLINK][-1]]
        else:
            size = _random_size(rng, cfg)
            mode = rng.choice((0o644, 0o640, 0o600, 0o664))
            fs.create(parent, f"f{i}{rng.choice(_EXTS)}", size=size, owner=owner, group=group,
                      mode=mode, ts=mtime, emit=False)
            node = fs._nodes[fs._by_type[EntryType.FILE][-1]]
        node.atime = atime
        node.mtime = node.ctime = mtime
    return fs


def apply_op(fs: SimFs, op: WorkloadOp) -> list[ChangelogRecord]:
    k = op.kind
    owner = op.owner or "root"
    group = op.group or owner
    if k == "mkdir":
        return fs.mkdir(_req(op.parent), _req(op.name), owner=owner, group=group,
                        mode=op.mode if op.mode is not None else 0o755, jobid=op.jobid)
    if k == "create":
        return fs.create(_req(op.parent), _req(op.name), size=op.size or 0, owner=owner, group=group,
                         mode=op.mode if op.mode is not None else 0o644, jobid=op.jobid)
    if k == "symlink":
        return fs.symlink(_req(op.parent), _req(op.name), "target", owner=owner, group=group, jobid=op.jobid)
    if k == "write":
        return fs.write(_req(op.target), _req(op.size), jobid=op.jobid)
    if k == "setattr":
        return fs.setattr(_req(op.target), mode=op.mode, owner=op.owner, group=op.group, jobid=op.jobid)
    if k == "rename":
        return fs.rename(_req(op.target), _req(op.parent), _req(op.name), jobid=op.jobid)
    if k == "unlink":
        return fs.unlink(_req(op.target), jobid=op.jobid)
    if k == "rmdir":
        return fs.rmdir(_req(op.target), jobid=op.jobid)
    if k == "hsm_event":
        try:
            return fs.hsm_event(_req(op.target), _req(op.event), jobid=op.jobid)
        except IllegalTransition as exc:
            raise InapplicableOp(str(exc)) from None
    raise InapplicableOp(f"unknown op kind {k!r}")


def _req(value):
    if value is None:
        raise InapplicableOp("op is missing a required selector")
    return value


def _draw_op(fs: SimFs, rng: random.Random, kind: str) -> WorkloadOp:
    cfg = fs.cfg
    jobid = rng.choice(JOBIDS)
    dirs = fs._by_type[EntryType.DIR]
    files = fs._by_type[EntryType.FILE]
    links = fs._by_type[EntryType.SYMLINK]

    def any_dir() -> EntryId:
        return ROOT_FID if not dirs or rng.random() < 0.1 else rng.choice(dirs)

    idx = fs.next_index
    if kind in ("mkdir", "create", "symlink"):
        owner, group = _pick_owner(rng, cfg.owners)
        prefix = {"mkdir": "d", "create": "f", "symlink": "l"}[kind]
        name = f"w{prefix}{idx}" + (rng.choice(_EXTS) if kind == "create" else "")
        size = _random_size(rng, cfg) if kind == "create" else None
        return WorkloadOp(kind, parent=any_dir(), name=name, size=size, owner=owner, group=group,
                          mode=0o755 if kind == "mkdir" else 0o644, jobid=jobid)
    if kind == "write":
        if not files:
            raise InapplicableOp("no files")
        fid = rng.choice(files)
        cur = fs._nodes[fid].size
        if rng.random() < 0.7:
            new = cur + rng.randrange(1, 8 * MB)
        else:
            new = rng.randrange(0, cur) if cur else 0
        return WorkloadOp("write", target=fid, size=new, jobid=jobid)
    if kind == "setattr":
        pool = files + dirs + links
        if not pool:
            raise InapplicableOp("no entries")
        fid = rng.choice(pool)
        owner = group = None
        if rng.random() < 0.3:
            owner, group = _pick_owner(rng, cfg.owners)
        return WorkloadOp("setattr", target=fid, mode=rng.choice((0o600, 0o640, 0o644, 0o664, 0o755)),
                          owner=owner, group=group, jobid=jobid)
    if kind == "rename":
        pool = files + dirs + links
        if not pool:
            raise InapplicableOp("no entries")
        fid = rng.choice(pool)
        node = fs._nodes[fid]
        target = any_dir()
        name = node.name
        tnode = fs._nodes[target]
        if tnode.children is not None and name in tnode.children:
            name = f"{node.name}.r{idx}"
        return WorkloadOp("rename", target=fid, parent=target, name=name, jobid=jobid)
    if kind == "unlink":
        pool = files + links
        if not pool:
            raise InapplicableOp("no files")
        return WorkloadOp("unlink", target=rng.choice(pool), jobid=jobid)
    if kind == "rmdir":
        if not dirs:
            raise InapplicableOp("no directories")
        return WorkloadOp("rmdir", target=rng.choice(dirs), jobid=jobid)
    if kind == "hsm_event":
        if not files:
            raise InapplicableOp("no files")
        fid = rng.choice(files)
        state = fs._nodes[fid].hsm
        event = {
            HsmState.NONE: HsmEvent.ARCHIVE_START,
            HsmState.NEW: HsmEvent.ARCHIVE_START,
            HsmState.DIRTY: HsmEvent.ARCHIVE_START,
            HsmState.ARCHIVING: HsmEvent.ARCHIVE_DONE,
            HsmState.ARCHIVED: HsmEvent.RELEASE,
            HsmState.RELEASED: HsmEvent.RESTORE,
        }[state]
        return WorkloadOp("hsm_event", target=fid, event=event, jobid=jobid)
    raise ValueError(f"unknown op kind {kind!r}")


def random_workload(fs: SimFs, seed: int, n_ops: int, mix: Mapping[str, float] | None = None,
                    *, retries: int = 16) -> list[ChangelogRecord]:
    """Apply ``n_ops`` randomly drawn applicable ops; returns the records emitted.

    An op that cannot be made applicable within ``retries`` draws is skipped;
    no index is consumed for it.
    """
    mix = dict(DEFAULT_MIX if mix is None else mix)
    unknown = set(mix) - set(OP_KINDS)
    if unknown:
        raise ValueError(f"unknown op kinds in mix: {sorted(unknown)}")
    kinds = [k for k in OP_KINDS if mix.get(k, 0) > 0]
    weights = [mix[k] for k in kinds]
    rng = random.Random(seed)
    out: list[ChangelogRecord] = []
    with fs._lock:
        for _ in range(n_ops):
            for _attempt in range(retries):
                kind = rng.choices(kinds, weights=weights)[0]
                try:
                    op = _draw_op(fs, rng, kind)
                    out.extend(apply_op(fs, op))
                    break
                except (InapplicableOp, SimCapacityError):
                    continue
    return out
